/** UI wiring: model loading, orbit controls, plane slider, render loop. */

import { parseModel, ModelFormatError, SplatModel } from './model.js';
import { SplatRenderer } from './renderer.js';
import { ViewerState } from './viewer.js';
import { sortByDepth } from './sort.js';

const canvas = document.getElementById('view') as HTMLCanvasElement;
const errorBanner = document.getElementById('error') as HTMLDivElement;
const slider = document.getElementById('plane-slider') as HTMLInputElement;
const planeInput = document.getElementById('plane-value') as HTMLInputElement;
const bgToggle = document.getElementById('bg-toggle') as HTMLInputElement;
const fpsLabel = document.getElementById('fps') as HTMLSpanElement;
const countLabel = document.getElementById('counts') as HTMLSpanElement;
const filePicker = document.getElementById('file') as HTMLInputElement;

let state: ViewerState | null = null;
let renderer: SplatRenderer | null = null;
let order = new Uint32Array(0);
let needsSort = true;
const fpsSamples: number[] = [];
let lastFrame = performance.now();

const FOV_DEG = 50;

function showError(message: string): void {
  errorBanner.textContent = message;
  errorBanner.style.display = 'block';
}

function focalPixels(): number {
  return canvas.height / (2 * Math.tan((FOV_DEG * Math.PI) / 360));
}

function setModel(buffer: ArrayBuffer): void {
  try {
    const model: SplatModel = parseModel(buffer);
    state = new ViewerState(model);
    renderer = renderer ?? new SplatRenderer(canvas);
    const lo = model.boundsMin[2] - 0.2;
    const hi = model.boundsMax[2] + 0.2;
    slider.min = String(lo);
    slider.max = String(hi);
    slider.step = String((hi - lo) / 500);
    applyUrlParams();
    slider.value = String(state.planeZ);
    planeInput.value = state.planeZ.toFixed(3);
    renderer.setSplats(state.buffers);
    needsSort = true;
    errorBanner.style.display = 'none';
  } catch (e) {
    if (e instanceof ModelFormatError) {
      showError(`Could not load model (${e.kind}): ${e.message}`);
    } else {
      showError(`Could not load model: ${e}`);
    }
  }
}

function applyUrlParams(): void {
  if (state === null) return;
  const params = new URLSearchParams(window.location.search);
  const num = (key: string) => {
    const raw = params.get(key);
    return raw === null ? null : Number(raw);
  };
  const az = num('az');
  const el = num('el');
  const r = num('r');
  const z = num('z');
  if (az !== null) state.camera.azimuth = az;
  if (el !== null) state.camera.elevation = el;
  if (r !== null) state.camera.radius = r;
  if (z !== null) state.updatePlane(z);
}

function setPlane(z: number): void {
  if (state === null || renderer === null) return;
  state.updatePlane(z);
  renderer.setSplats(state.buffers);
  planeInput.value = z.toFixed(3);
  needsSort = true;
}

slider.addEventListener('input', () => setPlane(Number(slider.value)));
planeInput.addEventListener('change', () => {
  const z = Number(planeInput.value);
  if (Number.isFinite(z)) {
    slider.value = String(z);
    setPlane(z);
  }
});
bgToggle.addEventListener('change', () => {
  canvas.style.background = bgToggle.checked ? '#ffffff' : '#000000';
});

let dragging = false;
let lastX = 0;
let lastY = 0;
canvas.addEventListener('mousedown', (e) => {
  dragging = true;
  lastX = e.clientX;
  lastY = e.clientY;
});
window.addEventListener('mouseup', () => { dragging = false; });
window.addEventListener('mousemove', (e) => {
  if (!dragging || state === null) return;
  state.camera.azimuth -= (e.clientX - lastX) * 0.4;
  state.camera.elevation = Math.max(-89, Math.min(
    89, state.camera.elevation + (e.clientY - lastY) * 0.4));
  lastX = e.clientX;
  lastY = e.clientY;
  needsSort = true;
});
canvas.addEventListener('wheel', (e) => {
  if (state === null) return;
  e.preventDefault();
  state.camera.radius *= Math.exp(e.deltaY * 0.001);
  needsSort = true;
}, { passive: false });

filePicker.addEventListener('change', async () => {
  const f = filePicker.files?.[0];
  if (f) setModel(await f.arrayBuffer());
});

async function fetchInitialModel(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const url = params.get('model') ?? 'model.cgs';
  try {
    const response = await fetch(url);
    if (!response.ok) throw new Error(`${response.status} ${response.statusText}`);
    setModel(await response.arrayBuffer());
  } catch (e) {
    showError(`No model at ${url} (${e}); use the file picker.`);
  }
}

function frame(): void {
  const now = performance.now();
  if (state !== null && renderer !== null) {
    if (needsSort) {
      const depths = state.viewDepths();
      const identity = new Uint32Array(state.buffers.count);
      for (let i = 0; i < identity.length; i++) identity[i] = i;
      order = new Uint32Array(state.buffers.count);
      sortByDepth(depths, identity, order);
      needsSort = false;
    }
    const { rot, pos } = state.cameraPose();
    renderer.draw(order, rot, pos, focalPixels());

    const dt = now - lastFrame;
    fpsSamples.push(1000 / Math.max(dt, 1e-3));
    if (fpsSamples.length > 60) fpsSamples.shift();
    const fps = fpsSamples.reduce((a, b) => a + b, 0) / fpsSamples.length;
    fpsLabel.textContent = fps.toFixed(0);
    countLabel.textContent =
      `${state.buffers.count} / ${state.model.count} visible (plane ` +
      `${state.planeZ.toFixed(3)}, MLP evals ${state.aamEvaluations})`;
  }
  lastFrame = now;
  requestAnimationFrame(frame);
}

fetchInitialModel();
requestAnimationFrame(frame);
