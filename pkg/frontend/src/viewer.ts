/**
 * Viewer state: which splats are visible at the current plane offset, their
 * deformed parameters, and depth order for the current camera. Pure data
 * logic, no DOM or GL, so it is exercised directly by the test suite.
 *
 * The deformation cache is keyed by the plane offset: moving the camera never
 * re-evaluates the MLP, moving the slider does exactly one re-evaluation.
 */

import { aamForward } from './aam.js';
import { covariance3d, directionFromAngles, orbitRotation, sigmoid, Vec3 } from './math.js';
import { visibleIndices } from './mask.js';
import { SplatModel } from './model.js';

export interface OrbitCamera {
  azimuth: number;
  elevation: number;
  radius: number;
  target: Vec3;
}

/** Per-visible-splat render payload: 12 floats per splat. */
export interface SplatBuffers {
  count: number;
  centers: Float32Array;   // (V,3) deformed world positions
  covariances: Float32Array; // (V,6) world covariance upper triangle
  colors: Float32Array;    // (V,4) rgb + opacity, activated
}

export class ViewerState {
  model: SplatModel;
  camera: OrbitCamera;
  planeZ: number;
  visible: Uint32Array = new Uint32Array(0);
  buffers: SplatBuffers = { count: 0, centers: new Float32Array(0),
                            covariances: new Float32Array(0),
                            colors: new Float32Array(0) };
  aamEvaluations = 0;

  constructor(model: SplatModel) {
    this.model = model;
    const c: Vec3 = [
      (model.boundsMin[0] + model.boundsMax[0]) / 2,
      (model.boundsMin[1] + model.boundsMax[1]) / 2,
      (model.boundsMin[2] + model.boundsMax[2]) / 2,
    ];
    const diag = Math.hypot(model.boundsMax[0] - model.boundsMin[0],
                            model.boundsMax[1] - model.boundsMin[1],
                            model.boundsMax[2] - model.boundsMin[2]);
    this.camera = { azimuth: 30, elevation: 20, radius: 1.2 * diag, target: c };
    this.planeZ = model.boundsMax[2];
    this.updatePlane(this.planeZ);
  }

  /** Recompute visibility, run the deformation MLP, rebuild render buffers. */
  updatePlane(z: number): void {
    this.planeZ = z;
    const m = this.model;
    this.visible = visibleIndices(m.truncValues, z);
    const v = this.visible.length;
    const centers = new Float32Array(v * 3);
    const covs = new Float32Array(v * 6);
    const colors = new Float32Array(v * 4);

    let deform = null;
    if (m.aam !== null && v > 0) {
      deform = aamForward(m.aam, m.positions, this.visible, z);
      this.aamEvaluations++;
    }
    for (let row = 0; row < v; row++) {
      const i = this.visible[row];
      let px = m.positions[i * 3];
      let py = m.positions[i * 3 + 1];
      let pz = m.positions[i * 3 + 2];
      let q: [number, number, number, number] = [
        m.rotations[i * 4], m.rotations[i * 4 + 1],
        m.rotations[i * 4 + 2], m.rotations[i * 4 + 3]];
      let s: Vec3 = [m.logScales[i * 3], m.logScales[i * 3 + 1], m.logScales[i * 3 + 2]];
      if (deform !== null) {
        px += deform.dMu[row * 3];
        py += deform.dMu[row * 3 + 1];
        pz += deform.dMu[row * 3 + 2];
        q = [q[0] + deform.dRot[row * 4], q[1] + deform.dRot[row * 4 + 1],
             q[2] + deform.dRot[row * 4 + 2], q[3] + deform.dRot[row * 4 + 3]];
        s = [s[0] + deform.dScale[row * 3], s[1] + deform.dScale[row * 3 + 1],
             s[2] + deform.dScale[row * 3 + 2]];
      }
      centers[row * 3] = px;
      centers[row * 3 + 1] = py;
      centers[row * 3 + 2] = pz;
      const cov = covariance3d(q, s);
      for (let k = 0; k < 6; k++) covs[row * 6 + k] = cov[k];
      colors[row * 4] = sigmoid(m.colorLogits[i * 3]);
      colors[row * 4 + 1] = sigmoid(m.colorLogits[i * 3 + 1]);
      colors[row * 4 + 2] = sigmoid(m.colorLogits[i * 3 + 2]);
      colors[row * 4 + 3] = sigmoid(m.opacityLogits[i]);
    }
    this.buffers = { count: v, centers, covariances: covs, colors };
  }

  /** World-to-camera rotation rows + camera position for the orbit state. */
  cameraPose(): { rot: number[]; pos: Vec3 } {
    const dir = directionFromAngles(this.camera.azimuth, this.camera.elevation);
    const rot = orbitRotation(dir);
    const t = this.camera.target;
    const pos: Vec3 = [t[0] + dir[0] * this.camera.radius,
                       t[1] + dir[1] * this.camera.radius,
                       t[2] + dir[2] * this.camera.radius];
    return { rot, pos };
  }

  /** View-space depths of the visible splats for the current camera. */
  viewDepths(): Float32Array {
    const { rot, pos } = this.cameraPose();
    const v = this.buffers.count;
    const depths = new Float32Array(v);
    const c = this.buffers.centers;
    for (let row = 0; row < v; row++) {
      const x = c[row * 3] - pos[0];
      const y = c[row * 3 + 1] - pos[1];
      const z = c[row * 3 + 2] - pos[2];
      depths[row] = rot[6] * x + rot[7] * y + rot[8] * z;
    }
    return depths;
  }
}
