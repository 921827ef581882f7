/**
 * Plane visibility: a splat is visible iff its stored plane coordinate m is
 * strictly below the slider offset. Bit-identical to the trainer's forward
 * rule (epsilon = 0.5).
 */

export function visibleIndices(truncValues: Float32Array, planeZ: number): Uint32Array {
  const out = new Uint32Array(truncValues.length);
  let n = 0;
  for (let i = 0; i < truncValues.length; i++) {
    if (truncValues[i] < planeZ) out[n++] = i;
  }
  return out.subarray(0, n);
}

export function visibleCount(truncValues: Float32Array, planeZ: number): number {
  let n = 0;
  for (let i = 0; i < truncValues.length; i++) {
    if (truncValues[i] < planeZ) n++;
  }
  return n;
}
