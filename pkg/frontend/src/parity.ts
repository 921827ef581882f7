/**
 * In-browser screenshot parity harness: loads a fixture model plus reference
 * renders produced by the command-line renderer, draws each fixture camera /
 * plane pair with the WebGL path, and reports per-pair PSNR (pass at 30 dB).
 * Open parity.html next to an exported fixtures directory.
 */

import { parseModel } from './model.js';
import { SplatRenderer } from './renderer.js';
import { ViewerState } from './viewer.js';
import { sortByDepth } from './sort.js';

interface RenderFixture {
  azimuth: number;
  elevation: number;
  radius: number;
  z: number;
  size: number;
  fov_deg: number;
  center: [number, number, number];
  background: [number, number, number];
  file: string;
}

const table = document.getElementById('results') as HTMLTableElement;
const summary = document.getElementById('summary') as HTMLDivElement;

function row(cells: string[], cls = ''): void {
  const tr = document.createElement('tr');
  tr.className = cls;
  for (const c of cells) {
    const td = document.createElement('td');
    td.textContent = c;
    tr.appendChild(td);
  }
  table.appendChild(tr);
}

async function loadReference(url: string, size: number): Promise<Float32Array> {
  const img = new Image();
  img.src = url;
  await img.decode();
  const scratch = document.createElement('canvas');
  scratch.width = size;
  scratch.height = size;
  const ctx = scratch.getContext('2d')!;
  ctx.drawImage(img, 0, 0);
  const data = ctx.getImageData(0, 0, size, size).data;
  const out = new Float32Array(size * size * 3);
  for (let i = 0; i < size * size; i++) {
    out[i * 3] = data[i * 4] / 255;
    out[i * 3 + 1] = data[i * 4 + 1] / 255;
    out[i * 3 + 2] = data[i * 4 + 2] / 255;
  }
  return out;
}

function psnr(a: Float32Array, b: Float32Array): number {
  let mse = 0;
  for (let i = 0; i < a.length; i++) {
    const d = a[i] - b[i];
    mse += d * d;
  }
  mse /= a.length;
  return mse === 0 ? Infinity : -10 * Math.log10(mse);
}

async function run(): Promise<void> {
  const base = new URLSearchParams(window.location.search).get('fixtures')
    ?? 'tests/fixtures';
  const parity = await (await fetch(`${base}/parity.json`)).json();
  const buffer = await (await fetch(`${base}/${parity.model_file}`)).arrayBuffer();
  const state = new ViewerState(parseModel(buffer));

  const canvas = document.createElement('canvas');
  const renderer = new SplatRenderer(canvas);
  const gl = (canvas.getContext('webgl2'))!;

  row(['camera', 'plane z', 'visible', 'PSNR [dB]', 'status'], 'head');
  let passes = 0;
  const fixtures: RenderFixture[] = parity.renders ?? [];
  for (const fx of fixtures) {
    canvas.width = fx.size;
    canvas.height = fx.size;
    state.camera.azimuth = fx.azimuth;
    state.camera.elevation = fx.elevation;
    state.camera.radius = fx.radius;
    state.camera.target = fx.center;
    state.updatePlane(fx.z);
    renderer.setSplats(state.buffers);

    const depths = state.viewDepths();
    const identity = new Uint32Array(state.buffers.count);
    for (let i = 0; i < identity.length; i++) identity[i] = i;
    const order = new Uint32Array(state.buffers.count);
    sortByDepth(depths, identity, order);
    const { rot, pos } = state.cameraPose();
    const focal = fx.size / (2 * Math.tan((fx.fov_deg * Math.PI) / 360));
    renderer.draw(order, rot, pos, focal);

    const raw = new Uint8Array(fx.size * fx.size * 4);
    gl.readPixels(0, 0, fx.size, fx.size, gl.RGBA, gl.UNSIGNED_BYTE, raw);
    const got = new Float32Array(fx.size * fx.size * 3);
    const bg = fx.background;
    for (let y = 0; y < fx.size; y++) {
      for (let x = 0; x < fx.size; x++) {
        const src = ((fx.size - 1 - y) * fx.size + x) * 4;  // GL reads bottom-up
        const dst = (y * fx.size + x) * 3;
        const a = raw[src + 3] / 255;
        got[dst] = raw[src] / 255 + (1 - a) * bg[0];
        got[dst + 1] = raw[src + 1] / 255 + (1 - a) * bg[1];
        got[dst + 2] = raw[src + 2] / 255 + (1 - a) * bg[2];
      }
    }
    const want = await loadReference(`${base}/${fx.file}`, fx.size);
    const db = psnr(got, want);
    const ok = db >= 30;
    if (ok) passes++;
    row([`az ${fx.azimuth} el ${fx.elevation}`, fx.z.toFixed(3),
         String(state.buffers.count), db.toFixed(2), ok ? 'PASS' : 'FAIL'],
        ok ? 'pass' : 'fail');
  }
  summary.textContent = `${passes}/${fixtures.length} camera/plane pairs at PSNR >= 30 dB`;
}

run().catch((e) => { summary.textContent = `error: ${e}`; });
