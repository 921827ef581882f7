/**
 * Depth ordering for front-to-back compositing: counting sort over 16-bit
 * quantized view depth. O(n) per camera move, stable within a bucket so ties
 * keep index order.
 */

const BUCKETS = 65536;

export function sortByDepth(depths: Float32Array, indices: Uint32Array,
                            out: Uint32Array): void {
  const n = indices.length;
  if (n === 0) return;
  let lo = Infinity;
  let hi = -Infinity;
  for (let i = 0; i < n; i++) {
    const d = depths[i];
    if (d < lo) lo = d;
    if (d > hi) hi = d;
  }
  const scale = hi > lo ? (BUCKETS - 1) / (hi - lo) : 0;
  const counts = new Uint32Array(BUCKETS + 1);
  const keys = new Uint16Array(n);
  for (let i = 0; i < n; i++) {
    const k = ((depths[i] - lo) * scale) | 0;
    keys[i] = k;
    counts[k + 1]++;
  }
  for (let k = 0; k < BUCKETS; k++) counts[k + 1] += counts[k];
  for (let i = 0; i < n; i++) {
    out[counts[keys[i]]++] = indices[i];
  }
}
