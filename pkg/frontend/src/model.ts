/**
 * Model-file parsing. Byte layout (all little-endian):
 *   bytes 0..7   magic "CGSPLAT1"
 *   bytes 8..11  uint32 header length (multiple of 4)
 *   header       UTF-8 JSON
 *   payload      raw float32 arrays in header-declared order, then the
 *                deformation-model layers (weight matrix row-major, bias).
 */

export interface AamLayer {
  name: string;
  rows: number;
  cols: number;
  w: Float32Array;
  b: Float32Array;
}

export interface AamModel {
  peLevelsPos: number;
  peLevelsZ: number;
  hidden: number;
  posScale: number;
  layers: Map<string, AamLayer>;
}

export interface SplatModel {
  count: number;
  positions: Float32Array;      // (N,3)
  rotations: Float32Array;      // (N,4) unnormalized quaternions, w first
  logScales: Float32Array;      // (N,3)
  colorLogits: Float32Array;    // (N,3)
  opacityLogits: Float32Array;  // (N,)
  truncValues: Float32Array;    // (N,)
  aam: AamModel | null;
  plane_normal: [number, number, number];
  boundsMin: [number, number, number];
  boundsMax: [number, number, number];
  background: [number, number, number];
  header: Record<string, unknown>;
}

export class ModelFormatError extends Error {
  constructor(public kind: 'magic' | 'version' | 'length' | 'values' | 'header',
              message: string) {
    super(message);
    this.name = 'ModelFormatError';
  }
}

const MAGIC = 'CGSPLAT1';
const VERSION = 1;

const CLOUD_FIELDS: Array<[string, number]> = [
  ['positions', 3],
  ['rotations', 4],
  ['log_scales', 3],
  ['color_logits', 3],
  ['opacity_logits', 1],
  ['trunc_values', 1],
];

function checkFinite(arr: Float32Array, what: string): void {
  for (let i = 0; i < arr.length; i++) {
    if (!Number.isFinite(arr[i])) {
      throw new ModelFormatError('values', `non-finite value in ${what}`);
    }
  }
}

export function parseModel(buffer: ArrayBuffer): SplatModel {
  if (buffer.byteLength < 12) {
    throw new ModelFormatError('magic', 'file too short to be a splat model');
  }
  const bytes = new Uint8Array(buffer);
  let magic = '';
  for (let i = 0; i < 8; i++) magic += String.fromCharCode(bytes[i]);
  if (magic !== MAGIC) {
    throw new ModelFormatError('magic', `bad magic ${JSON.stringify(magic)}`);
  }
  const view = new DataView(buffer);
  const headerLen = view.getUint32(8, true);
  if (12 + headerLen > buffer.byteLength) {
    throw new ModelFormatError('length', 'truncated header');
  }
  let header: any;
  try {
    header = JSON.parse(new TextDecoder().decode(
      new Uint8Array(buffer, 12, headerLen)));
  } catch (e) {
    throw new ModelFormatError('header', `unreadable header: ${e}`);
  }
  if (header.version !== VERSION) {
    throw new ModelFormatError('version', `unsupported version ${header.version}`);
  }

  const count: number = header.count;
  let expected = 0;
  for (const f of header.fields) {
    expected += f.shape.reduce((a: number, b: number) => a * b, 1);
  }
  if (header.aam) {
    for (const layer of header.aam.layers) {
      expected += layer.rows * layer.cols + layer.cols;
    }
  }
  const payloadBytes = buffer.byteLength - 12 - headerLen;
  if (payloadBytes !== expected * 4) {
    throw new ModelFormatError(
      'length', `payload is ${payloadBytes} bytes, header declares ${expected * 4}`);
  }

  let offset = 12 + headerLen;
  const fields = new Map<string, Float32Array>();
  for (const f of header.fields) {
    const size = f.shape.reduce((a: number, b: number) => a * b, 1);
    const arr = new Float32Array(buffer, offset, size);
    checkFinite(arr, f.name);
    fields.set(f.name, arr);
    offset += size * 4;
  }
  for (const [name, width] of CLOUD_FIELDS) {
    const arr = fields.get(name);
    if (!arr || arr.length !== count * width) {
      throw new ModelFormatError('header', `missing or mis-shaped field ${name}`);
    }
  }

  let aam: AamModel | null = null;
  if (header.aam) {
    aam = {
      peLevelsPos: header.aam.pe_levels_pos,
      peLevelsZ: header.aam.pe_levels_z,
      hidden: header.aam.hidden,
      posScale: header.aam.pos_scale,
      layers: new Map(),
    };
    for (const layer of header.aam.layers) {
      const w = new Float32Array(buffer, offset, layer.rows * layer.cols);
      offset += layer.rows * layer.cols * 4;
      const b = new Float32Array(buffer, offset, layer.cols);
      offset += layer.cols * 4;
      checkFinite(w, `layer ${layer.name}`);
      aam.layers.set(layer.name, { name: layer.name, rows: layer.rows,
                                   cols: layer.cols, w, b });
    }
  }

  const scene = header.scene ?? {};
  const cfg = header.train_config ?? {};
  return {
    count,
    positions: fields.get('positions')!,
    rotations: fields.get('rotations')!,
    logScales: fields.get('log_scales')!,
    colorLogits: fields.get('color_logits')!,
    opacityLogits: fields.get('opacity_logits')!,
    truncValues: fields.get('trunc_values')!,
    aam,
    plane_normal: header.plane_normal ?? [0, 0, 1],
    boundsMin: scene.bounds_min ?? [-0.5, -0.5, -0.5],
    boundsMax: scene.bounds_max ?? [0.5, 0.5, 0.5],
    background: cfg.background ?? [0, 0, 0],
    header,
  };
}
