import { describe, expect, it } from 'vitest';

import { covariance3d, directionFromAngles, orbitRotation, quatToRotation,
         sigmoid } from '../src/math.js';
import { sortByDepth } from '../src/sort.js';

describe('quaternion to rotation', () => {
  it('identity quaternion', () => {
    const r = quatToRotation(1, 0, 0, 0);
    expect(r).toEqual([1, 0, 0, 0, 1, 0, 0, 0, 1]);
  });

  it('pi about z', () => {
    const r = quatToRotation(0, 0, 0, 1);
    expect(r[0]).toBeCloseTo(-1, 12);
    expect(r[4]).toBeCloseTo(-1, 12);
    expect(r[8]).toBeCloseTo(1, 12);
  });

  it('is scale invariant', () => {
    const a = quatToRotation(0.7, 0.1, -0.3, 0.2);
    const b = quatToRotation(1.4, 0.2, -0.6, 0.4);
    for (let i = 0; i < 9; i++) expect(a[i]).toBeCloseTo(b[i], 12);
  });
});

describe('covariance3d', () => {
  it('identity rotation, unit scales', () => {
    const c = covariance3d([1, 0, 0, 0], [0, 0, 0]);
    expect(c[0]).toBeCloseTo(1, 12);
    expect(c[3]).toBeCloseTo(1, 12);
    expect(c[5]).toBeCloseTo(1, 12);
    expect(c[1]).toBeCloseTo(0, 12);
  });

  it('axis-aligned log scales', () => {
    const c = covariance3d([1, 0, 0, 0], [Math.log(2), 0, 0]);
    expect(c[0]).toBeCloseTo(4, 10);
    expect(c[3]).toBeCloseTo(1, 10);
  });
});

describe('orbit camera', () => {
  it('rotation rows are orthonormal', () => {
    for (const [az, el] of [[0, 0], [45, 30], [200, -60], [90, 89]]) {
      const r = orbitRotation(directionFromAngles(az, el));
      for (let i = 0; i < 3; i++) {
        for (let j = 0; j < 3; j++) {
          const dot = r[3 * i] * r[3 * j] + r[3 * i + 1] * r[3 * j + 1]
            + r[3 * i + 2] * r[3 * j + 2];
          expect(dot).toBeCloseTo(i === j ? 1 : 0, 10);
        }
      }
    }
  });

  it('forward row points from camera to target', () => {
    const dir = directionFromAngles(30, 10);
    const r = orbitRotation(dir);
    // forward = -dir
    expect(r[6]).toBeCloseTo(-dir[0], 12);
    expect(r[7]).toBeCloseTo(-dir[1], 12);
    expect(r[8]).toBeCloseTo(-dir[2], 12);
  });
});

describe('sigmoid', () => {
  it('midpoint and symmetry', () => {
    expect(sigmoid(0)).toBe(0.5);
    expect(sigmoid(3) + sigmoid(-3)).toBeCloseTo(1, 12);
  });
});

describe('depth sort', () => {
  it('orders ascending vs the library sort oracle', () => {
    const n = 5000;
    const depths = new Float32Array(n);
    let seed = 1234;
    for (let i = 0; i < n; i++) {
      seed = (seed * 1103515245 + 12345) % 2147483648;
      depths[i] = seed / 2147483648;
    }
    const identity = new Uint32Array(n);
    for (let i = 0; i < n; i++) identity[i] = i;
    const out = new Uint32Array(n);
    sortByDepth(depths, identity, out);
    const oracle = Array.from(identity).sort((a, b) => depths[a] - depths[b]);
    // bucketed sort: order must be monotone within quantization resolution
    let span = 0;
    for (let i = 0; i < n; i++) span = Math.max(span, depths[i]);
    const eps = span / 65535 + 1e-9;
    for (let i = 1; i < n; i++) {
      expect(depths[out[i]]).toBeGreaterThanOrEqual(depths[out[i - 1]] - eps);
    }
    // exact agreement of the multiset
    expect(Array.from(out).sort((a, b) => a - b))
      .toEqual(Array.from(oracle as number[]).sort((a, b) => a - b));
  });

  it('empty input is fine', () => {
    sortByDepth(new Float32Array(0), new Uint32Array(0), new Uint32Array(0));
  });
});
