/**
 * WebGL2 splat renderer: one instanced quad per visible splat, splat data in
 * a float texture, depth order supplied per frame as an instance attribute.
 *
 * The vertex shader reproduces the trainer's screen-space math: world
 * covariance pushed through the camera rotation and the perspective Jacobian,
 * plus the 0.3-pixel low-pass floor; quad extents cover the density cutoff
 * ellipse (squared Mahalanobis 24). Compositing is front-to-back with
 * premultiplied alpha: dst = dst + (1 - dst.a) * src.
 */

import { SplatBuffers } from './viewer.js';

const TEX_WIDTH = 1024;
const TEXELS_PER_SPLAT = 4;

const VERT = `#version 300 es
precision highp float;
precision highp sampler2D;

uniform sampler2D uSplats;
uniform mat3 uViewRot;      // world-to-camera rotation rows
uniform vec3 uCamPos;
uniform vec2 uFocal;        // fx, fy in pixels
uniform vec2 uPrincipal;    // cx, cy in pixels
uniform vec2 uViewport;     // width, height in pixels

in vec2 aCorner;            // quad corner in [-1,1]^2
in uint aSplatIndex;        // sorted order -> splat row in the texture

out vec2 vCorner;
out vec4 vColor;

vec4 texel(uint row, uint slot) {
  uint idx = row * uint(${TEXELS_PER_SPLAT}) + slot;
  return texelFetch(uSplats, ivec2(idx % uint(${TEX_WIDTH}), idx / uint(${TEX_WIDTH})), 0);
}

void main() {
  uint row = aSplatIndex;
  vec4 t0 = texel(row, 0u);   // world position, opacity
  vec4 t1 = texel(row, 1u);   // cov 00 01 02 11
  vec4 t2 = texel(row, 2u);   // cov 12 22, unused
  vec4 t3 = texel(row, 3u);   // rgb, 1

  vec3 p = uViewRot * (t0.xyz - uCamPos);
  if (p.z < 0.01) { gl_Position = vec4(0.0, 0.0, 2.0, 1.0); return; }

  mat3 S = mat3(t1.x, t1.y, t1.z,
                t1.y, t1.w, t2.x,
                t1.z, t2.x, t2.y);
  float iz = 1.0 / p.z;
  // Jacobian rows of the pinhole map at p (column-major constructor)
  mat3 J = mat3(uFocal.x * iz, 0.0, 0.0,
                0.0, uFocal.y * iz, 0.0,
                -uFocal.x * p.x * iz * iz, -uFocal.y * p.y * iz * iz, 0.0);
  mat3 M = J * uViewRot;
  mat3 C = M * S * transpose(M);
  float a = C[0][0] + 0.3;
  float b = C[1][0];
  float c = C[1][1] + 0.3;

  // eigen decomposition of [[a,b],[b,c]]
  float mid = 0.5 * (a + c);
  float det = a * c - b * b;
  float disc = sqrt(max(mid * mid - det, 0.0));
  float l1 = mid + disc;
  float l2 = max(mid - disc, 0.0);
  // eigenvector of the larger eigenvalue; axis-aligned when b ~ 0
  vec2 e1 = (abs(b) > 1e-9) ? normalize(vec2(b, l1 - a))
                            : ((a >= c) ? vec2(1.0, 0.0) : vec2(0.0, 1.0));
  vec2 e2 = vec2(-e1.y, e1.x);
  float k = sqrt(24.0);
  vec2 axis1 = e1 * (k * sqrt(l1));
  vec2 axis2 = e2 * (k * sqrt(l2));

  vec2 center = vec2(uFocal.x * p.x * iz + uPrincipal.x,
                     uFocal.y * p.y * iz + uPrincipal.y);
  vec2 px = center + aCorner.x * axis1 + aCorner.y * axis2;
  // pixel centers sit at integer coordinates; GL samples at half-integers
  vec2 ndc = vec2((px.x + 0.5) * 2.0 / uViewport.x - 1.0,
                  1.0 - (px.y + 0.5) * 2.0 / uViewport.y);
  gl_Position = vec4(ndc, 0.0, 1.0);
  vCorner = aCorner;
  vColor = vec4(t3.rgb, t0.w);
}
`;

const FRAG = `#version 300 es
precision highp float;
in vec2 vCorner;
in vec4 vColor;
out vec4 outColor;

void main() {
  float q = 24.0 * dot(vCorner, vCorner);
  if (q > 24.0) discard;
  float alpha = vColor.a * exp(-0.5 * q);
  outColor = vec4(vColor.rgb * alpha, alpha);
}
`;

export class SplatRenderer {
  private gl: WebGL2RenderingContext;
  private program!: WebGLProgram;
  private texture!: WebGLTexture;
  private indexBuffer!: WebGLBuffer;
  private cornerBuffer!: WebGLBuffer;
  private vao!: WebGLVertexArrayObject;
  private uniforms: Record<string, WebGLUniformLocation> = {};
  private capacity = 0;

  constructor(private canvas: HTMLCanvasElement) {
    const gl = canvas.getContext('webgl2', { alpha: true, antialias: false,
                                             premultipliedAlpha: true });
    if (!gl) throw new Error('WebGL2 is required');
    this.gl = gl;
    this.init();
    canvas.addEventListener('webglcontextlost', (e) => e.preventDefault());
    canvas.addEventListener('webglcontextrestored', () => this.init());
  }

  private init(): void {
    const gl = this.gl;
    const compile = (type: number, src: string) => {
      const sh = gl.createShader(type)!;
      gl.shaderSource(sh, src);
      gl.compileShader(sh);
      if (!gl.getShaderParameter(sh, gl.COMPILE_STATUS)) {
        throw new Error(`shader: ${gl.getShaderInfoLog(sh)}`);
      }
      return sh;
    };
    const prog = gl.createProgram()!;
    gl.attachShader(prog, compile(gl.VERTEX_SHADER, VERT));
    gl.attachShader(prog, compile(gl.FRAGMENT_SHADER, FRAG));
    gl.linkProgram(prog);
    if (!gl.getProgramParameter(prog, gl.LINK_STATUS)) {
      throw new Error(`link: ${gl.getProgramInfoLog(prog)}`);
    }
    this.program = prog;
    for (const name of ['uSplats', 'uViewRot', 'uCamPos', 'uFocal', 'uPrincipal',
                        'uViewport']) {
      this.uniforms[name] = gl.getUniformLocation(prog, name)!;
    }

    this.vao = gl.createVertexArray()!;
    gl.bindVertexArray(this.vao);
    this.cornerBuffer = gl.createBuffer()!;
    gl.bindBuffer(gl.ARRAY_BUFFER, this.cornerBuffer);
    gl.bufferData(gl.ARRAY_BUFFER,
                  new Float32Array([-1, -1, 1, -1, -1, 1, 1, 1]), gl.STATIC_DRAW);
    const locCorner = gl.getAttribLocation(prog, 'aCorner');
    gl.enableVertexAttribArray(locCorner);
    gl.vertexAttribPointer(locCorner, 2, gl.FLOAT, false, 0, 0);

    this.indexBuffer = gl.createBuffer()!;
    gl.bindBuffer(gl.ARRAY_BUFFER, this.indexBuffer);
    const locIndex = gl.getAttribLocation(prog, 'aSplatIndex');
    gl.enableVertexAttribArray(locIndex);
    gl.vertexAttribIPointer(locIndex, 1, gl.UNSIGNED_INT, 0, 0);
    gl.vertexAttribDivisor(locIndex, 1);
    gl.bindVertexArray(null);

    this.texture = gl.createTexture()!;
    gl.bindTexture(gl.TEXTURE_2D, this.texture);
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MIN_FILTER, gl.NEAREST);
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MAG_FILTER, gl.NEAREST);
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_S, gl.CLAMP_TO_EDGE);
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_T, gl.CLAMP_TO_EDGE);
    this.capacity = 0;
  }

  /** Upload the visible-splat payload (on plane change). */
  setSplats(buffers: SplatBuffers): void {
    const gl = this.gl;
    const n = buffers.count;
    const rows = Math.max(1, Math.ceil((n * TEXELS_PER_SPLAT) / TEX_WIDTH));
    const data = new Float32Array(TEX_WIDTH * rows * 4);
    for (let i = 0; i < n; i++) {
      const o = i * TEXELS_PER_SPLAT * 4;
      data[o] = buffers.centers[i * 3];
      data[o + 1] = buffers.centers[i * 3 + 1];
      data[o + 2] = buffers.centers[i * 3 + 2];
      data[o + 3] = buffers.colors[i * 4 + 3];
      data[o + 4] = buffers.covariances[i * 6];
      data[o + 5] = buffers.covariances[i * 6 + 1];
      data[o + 6] = buffers.covariances[i * 6 + 2];
      data[o + 7] = buffers.covariances[i * 6 + 3];
      data[o + 8] = buffers.covariances[i * 6 + 4];
      data[o + 9] = buffers.covariances[i * 6 + 5];
      data[o + 12] = buffers.colors[i * 4];
      data[o + 13] = buffers.colors[i * 4 + 1];
      data[o + 14] = buffers.colors[i * 4 + 2];
      data[o + 15] = 1;
    }
    gl.bindTexture(gl.TEXTURE_2D, this.texture);
    gl.texImage2D(gl.TEXTURE_2D, 0, gl.RGBA32F, TEX_WIDTH, rows, 0, gl.RGBA,
                  gl.FLOAT, data);
    this.capacity = n;
  }

  /** Draw splats in the given front-to-back order. */
  draw(order: Uint32Array, viewRot: number[], camPos: number[],
       focal: number): void {
    const gl = this.gl;
    const w = this.canvas.width;
    const h = this.canvas.height;
    gl.viewport(0, 0, w, h);
    gl.disable(gl.DEPTH_TEST);
    gl.enable(gl.BLEND);
    gl.blendFuncSeparate(gl.ONE_MINUS_DST_ALPHA, gl.ONE,
                         gl.ONE_MINUS_DST_ALPHA, gl.ONE);
    gl.clearColor(0, 0, 0, 0);
    gl.clear(gl.COLOR_BUFFER_BIT);
    if (order.length === 0 || this.capacity === 0) return;

    gl.useProgram(this.program);
    gl.activeTexture(gl.TEXTURE0);
    gl.bindTexture(gl.TEXTURE_2D, this.texture);
    gl.uniform1i(this.uniforms.uSplats, 0);
    // column-major mat3 from row-major world-to-camera rows
    gl.uniformMatrix3fv(this.uniforms.uViewRot, false, new Float32Array([
      viewRot[0], viewRot[3], viewRot[6],
      viewRot[1], viewRot[4], viewRot[7],
      viewRot[2], viewRot[5], viewRot[8]]));
    gl.uniform3f(this.uniforms.uCamPos, camPos[0], camPos[1], camPos[2]);
    gl.uniform2f(this.uniforms.uFocal, focal, focal);
    gl.uniform2f(this.uniforms.uPrincipal, (w - 1) / 2, (h - 1) / 2);
    gl.uniform2f(this.uniforms.uViewport, w, h);

    gl.bindVertexArray(this.vao);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.indexBuffer);
    gl.bufferData(gl.ARRAY_BUFFER, order, gl.DYNAMIC_DRAW);
    gl.drawArraysInstanced(gl.TRIANGLE_STRIP, 0, 4, order.length);
    gl.bindVertexArray(null);
  }
}
