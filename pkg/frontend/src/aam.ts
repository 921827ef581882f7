/**
 * CPU forward pass of the plane-conditioned deformation MLP.
 *
 * Mirrors the trainer exactly: positional encoding laid out as
 * [v | sin(2^0 pi v) | cos(2^0 pi v) | sin(2^1 pi v) | ...] per block,
 * two rectifier trunk layers, three linear heads; position deltas scaled by
 * posScale. Math runs in doubles over the float32 weights.
 */

import { AamModel } from './model.js';

export function positionalEncoding(v: number, levels: number): Float64Array {
  const out = new Float64Array(2 * levels + 1);
  out[0] = v;
  for (let k = 0; k < levels; k++) {
    const phase = Math.pow(2, k) * Math.PI * v;
    out[1 + 2 * k] = Math.sin(phase);
    out[2 + 2 * k] = Math.cos(phase);
  }
  return out;
}

export interface Deformation {
  dMu: Float64Array;     // (V,3)
  dRot: Float64Array;    // (V,4)
  dScale: Float64Array;  // (V,3)
}

export function aamForward(aam: AamModel, positions: Float32Array,
                           indices: Uint32Array, planeZ: number): Deformation {
  const n = indices.length;
  const posWidth = 3 * (2 * aam.peLevelsPos + 1);
  const zWidth = 2 * aam.peLevelsZ + 1;
  const inWidth = posWidth + zWidth;
  const encZ = positionalEncoding(planeZ, aam.peLevelsZ);

  const trunk0 = aam.layers.get('trunk0')!;
  const trunk1 = aam.layers.get('trunk1')!;
  const headMu = aam.layers.get('head_mu')!;
  const headRot = aam.layers.get('head_rot')!;
  const headScale = aam.layers.get('head_scale')!;
  const h = aam.hidden;

  const enc = new Float64Array(inWidth);
  const h0 = new Float64Array(h);
  const h1 = new Float64Array(h);
  const dMu = new Float64Array(n * 3);
  const dRot = new Float64Array(n * 4);
  const dScale = new Float64Array(n * 3);

  for (let row = 0; row < n; row++) {
    const p = indices[row] * 3;
    // block layout: raw xyz, then per-level sin(3) and cos(3) blocks
    enc[0] = positions[p];
    enc[1] = positions[p + 1];
    enc[2] = positions[p + 2];
    for (let k = 0; k < aam.peLevelsPos; k++) {
      const f = Math.pow(2, k) * Math.PI;
      for (let c = 0; c < 3; c++) {
        const phase = f * positions[p + c];
        enc[3 + 6 * k + c] = Math.sin(phase);
        enc[6 + 6 * k + c] = Math.cos(phase);
      }
    }
    enc.set(encZ, posWidth);

    dense(enc, trunk0.w, trunk0.b, h0, true);
    dense(h0, trunk1.w, trunk1.b, h1, true);
    denseInto(h1, headMu.w, headMu.b, dMu, row * 3, 3, aam.posScale);
    denseInto(h1, headRot.w, headRot.b, dRot, row * 4, 4, 1.0);
    denseInto(h1, headScale.w, headScale.b, dScale, row * 3, 3, 1.0);
  }
  return { dMu, dRot, dScale };
}

function dense(x: Float64Array, w: Float32Array, b: Float32Array,
               out: Float64Array, relu: boolean): void {
  const nIn = x.length;
  const nOut = out.length;
  for (let j = 0; j < nOut; j++) out[j] = b[j];
  for (let i = 0; i < nIn; i++) {
    const xi = x[i];
    if (xi === 0) continue;
    const base = i * nOut;
    for (let j = 0; j < nOut; j++) out[j] += xi * w[base + j];
  }
  if (relu) {
    for (let j = 0; j < nOut; j++) if (out[j] < 0) out[j] = 0;
  }
}

function denseInto(x: Float64Array, w: Float32Array, b: Float32Array,
                   out: Float64Array, offset: number, nOut: number,
                   scale: number): void {
  for (let j = 0; j < nOut; j++) out[offset + j] = b[j];
  for (let i = 0; i < x.length; i++) {
    const xi = x[i];
    if (xi === 0) continue;
    const base = i * nOut;
    for (let j = 0; j < nOut; j++) out[offset + j] += xi * w[base + j];
  }
  for (let j = 0; j < nOut; j++) out[offset + j] *= scale;
}
