/** Small vector/quaternion helpers shared by the CPU-side splat math. */

export type Vec3 = [number, number, number];

/** Rotation matrix (row-major 9) of a normalized quaternion, scalar first. */
export function quatToRotation(w: number, x: number, y: number, z: number): number[] {
  const n = Math.sqrt(w * w + x * x + y * y + z * z);
  w /= n; x /= n; y /= n; z /= n;
  return [
    1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
    2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
    2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
  ];
}

/**
 * World covariance R diag(exp(s))^2 R^T; returns the six upper-triangle
 * entries (c00, c01, c02, c11, c12, c22).
 */
export function covariance3d(q: [number, number, number, number],
                             logScales: Vec3): number[] {
  const r = quatToRotation(q[0], q[1], q[2], q[3]);
  const d = [Math.exp(logScales[0]), Math.exp(logScales[1]), Math.exp(logScales[2])];
  // A = R * diag(d); Sigma = A A^T
  const a = [
    r[0] * d[0], r[1] * d[1], r[2] * d[2],
    r[3] * d[0], r[4] * d[1], r[5] * d[2],
    r[6] * d[0], r[7] * d[1], r[8] * d[2],
  ];
  const dot = (i: number, j: number) =>
    a[3 * i] * a[3 * j] + a[3 * i + 1] * a[3 * j + 1] + a[3 * i + 2] * a[3 * j + 2];
  return [dot(0, 0), dot(0, 1), dot(0, 2), dot(1, 1), dot(1, 2), dot(2, 2)];
}

export function sigmoid(x: number): number {
  return x >= 0 ? 1 / (1 + Math.exp(-x)) : Math.exp(x) / (1 + Math.exp(x));
}

/**
 * World-to-camera rotation for an orbit camera at center + radius*dir looking
 * at center (x-right, y-down, z-forward; same construction as the trainer's
 * dataset cameras). Returns rows [right, down, forward].
 */
export function orbitRotation(dir: Vec3): number[] {
  const len = Math.hypot(dir[0], dir[1], dir[2]);
  const f: Vec3 = [-dir[0] / len, -dir[1] / len, -dir[2] / len];
  let up: Vec3 = [0, 0, 1];
  if (Math.abs(f[0] * up[0] + f[1] * up[1] + f[2] * up[2]) > 0.999) {
    up = [0, 1, 0];
  }
  const rx = f[1] * up[2] - f[2] * up[1];
  const ry = f[2] * up[0] - f[0] * up[2];
  const rz = f[0] * up[1] - f[1] * up[0];
  const rl = Math.hypot(rx, ry, rz);
  const r: Vec3 = [rx / rl, ry / rl, rz / rl];
  const d: Vec3 = [
    f[1] * r[2] - f[2] * r[1],
    f[2] * r[0] - f[0] * r[2],
    f[0] * r[1] - f[1] * r[0],
  ];
  return [r[0], r[1], r[2], d[0], d[1], d[2], f[0], f[1], f[2]];
}

export function directionFromAngles(azimuthDeg: number, elevationDeg: number): Vec3 {
  const az = (azimuthDeg * Math.PI) / 180;
  const el = (elevationDeg * Math.PI) / 180;
  return [Math.cos(el) * Math.cos(az), Math.cos(el) * Math.sin(az), Math.sin(el)];
}
