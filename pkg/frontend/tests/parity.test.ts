/**
 * Parity against the trainer: visibility decisions must bit-match, the
 * deformation MLP must agree to float32 resolution, and the positional
 * encoding must use the identical block layout.
 */
import { readFileSync } from 'node:fs';
import { fileURLToPath } from 'node:url';
import { describe, expect, it } from 'vitest';

import { aamForward, positionalEncoding } from '../src/aam.js';
import { visibleCount, visibleIndices } from '../src/mask.js';
import { parseModel } from '../src/model.js';
import { ViewerState } from '../src/viewer.js';

const fixtureDir = fileURLToPath(new URL('./fixtures/', import.meta.url));
const parity = JSON.parse(readFileSync(fixtureDir + 'parity.json', 'utf-8'));

function loadModel() {
  const raw = readFileSync(fixtureDir + parity.model_file);
  return parseModel(raw.buffer.slice(raw.byteOffset, raw.byteOffset + raw.byteLength));
}

describe('visibility parity', () => {
  const model = loadModel();
  for (const entry of parity.visibility) {
    it(`bit-matches the mask at z=${entry.z}`, () => {
      const indices = visibleIndices(model.truncValues, entry.z);
      expect(indices.length).toBe(entry.visible_count);
      expect(visibleCount(model.truncValues, entry.z)).toBe(entry.visible_count);
      const mask = new Array(model.count).fill(0);
      for (const i of indices) mask[i] = 1;
      expect(mask).toEqual(entry.mask);
    });
  }
});

describe('positional encoding parity', () => {
  for (const entry of parity.positional_encoding) {
    it(`matches at v=${entry.value}`, () => {
      const enc = positionalEncoding(entry.value, entry.levels);
      expect(enc.length).toBe(entry.encoding.length);
      for (let i = 0; i < enc.length; i++) {
        expect(Math.abs(enc[i] - entry.encoding[i])).toBeLessThan(1e-12);
      }
    });
  }
});

describe('deformation parity', () => {
  const model = loadModel();
  for (const entry of parity.deformation) {
    it(`matches aam outputs at z=${entry.z} within 1e-5`, () => {
      const indices = visibleIndices(model.truncValues, entry.z);
      expect(Array.from(indices)).toEqual(entry.visible_indices);
      const deform = aamForward(model.aam!, model.positions, indices, entry.z);
      const check = (got: Float64Array, want: number[][], width: number) => {
        for (let r = 0; r < want.length; r++) {
          for (let c = 0; c < width; c++) {
            expect(Math.abs(got[r * width + c] - want[r][c])).toBeLessThan(1e-5);
          }
        }
      };
      check(deform.dMu, entry.d_mu, 3);
      check(deform.dRot, entry.d_rot, 4);
      check(deform.dScale, entry.d_scale, 3);
    });
  }
});

describe('viewer state', () => {
  it('re-evaluates the MLP exactly once per plane change', () => {
    const state = new ViewerState(loadModel());
    const evals0 = state.aamEvaluations;
    state.updatePlane(parity.visibility[1].z);
    expect(state.aamEvaluations).toBe(evals0 + 1);
    // camera motion must not re-evaluate
    state.camera.azimuth += 25;
    state.viewDepths();
    state.cameraPose();
    expect(state.aamEvaluations).toBe(evals0 + 1);
  });

  it('buffers cover exactly the visible subset', () => {
    const state = new ViewerState(loadModel());
    const entry = parity.visibility[0];
    state.updatePlane(entry.z);
    expect(state.buffers.count).toBe(entry.visible_count);
    expect(state.buffers.centers.length).toBe(entry.visible_count * 3);
    for (let i = 0; i < state.buffers.count; i++) {
      expect(state.buffers.colors[i * 4 + 3]).toBeGreaterThan(0);
      expect(state.buffers.colors[i * 4 + 3]).toBeLessThan(1);
    }
  });

  it('empty plane offset hides everything', () => {
    const model = loadModel();
    const state = new ViewerState(model);
    let min = Infinity;
    for (const m of model.truncValues) min = Math.min(min, m);
    state.updatePlane(min - 1);
    expect(state.buffers.count).toBe(0);
  });
});
