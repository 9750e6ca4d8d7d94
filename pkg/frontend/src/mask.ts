/** Binary mask rasters and their PNG wire form.
 *
 * The service accepts masks only as single-channel PNGs whose pixels are
 * exactly 0 or 255, base64-encoded inside the spec payload. Encoding and
 * decoding are implemented here (grayscale 8-bit, zlib via pako) so the
 * raster a user painted is exactly the raster the server sees.
 */
import { deflate, inflate } from "pako";

export interface MaskRaster {
  width: number;
  height: number;
  /** row-major, one byte per pixel, each strictly 0 or 255 */
  data: Uint8Array;
}

export class MaskError extends Error {}

const PNG_SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

export function emptyMask(width: number, height: number): MaskRaster {
  if (width < 1 || height < 1) throw new MaskError(`bad mask size ${width}x${height}`);
  return { width, height, data: new Uint8Array(width * height) };
}

export function fillRect(
  mask: MaskRaster,
  y0: number,
  y1: number,
  x0: number,
  x1: number,
  on = true,
): void {
  for (let y = Math.max(0, y0); y < Math.min(mask.height, y1); y++) {
    for (let x = Math.max(0, x0); x < Math.min(mask.width, x1); x++) {
      mask.data[y * mask.width + x] = on ? 255 : 0;
    }
  }
}

export function countOn(mask: MaskRaster): number {
  let n = 0;
  for (const v of mask.data) if (v === 255) n++;
  return n;
}

export function masksEqual(a: MaskRaster, b: MaskRaster): boolean {
  if (a.width !== b.width || a.height !== b.height) return false;
  for (let i = 0; i < a.data.length; i++) if (a.data[i] !== b.data[i]) return false;
  return true;
}

function assertBinary(data: Uint8Array): void {
  for (let i = 0; i < data.length; i++) {
    const v = data[i];
    if (v !== 0 && v !== 255) {
      throw new MaskError(`mask pixel ${i} has value ${v}; only 0 and 255 are allowed`);
    }
  }
}

// -- CRC32 (PNG chunk checksums) ----------------------------------------------

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < bytes.length; i++) {
    c = CRC_TABLE[(c ^ bytes[i]!) & 0xff]! ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

// -- byte plumbing --------------------------------------------------------------

function u32be(value: number): Uint8Array {
  return new Uint8Array([(value >>> 24) & 0xff, (value >>> 16) & 0xff, (value >>> 8) & 0xff, value & 0xff]);
}

function readU32be(bytes: Uint8Array, at: number): number {
  return ((bytes[at]! << 24) | (bytes[at + 1]! << 16) | (bytes[at + 2]! << 8) | bytes[at + 3]!) >>> 0;
}

function concatBytes(parts: Uint8Array[]): Uint8Array {
  const out = new Uint8Array(parts.reduce((n, p) => n + p.length, 0));
  let at = 0;
  for (const p of parts) {
    out.set(p, at);
    at += p.length;
  }
  return out;
}

function chunk(type: string, body: Uint8Array): Uint8Array {
  const typeBytes = new TextEncoder().encode(type);
  const crc = crc32(concatBytes([typeBytes, body]));
  return concatBytes([u32be(body.length), typeBytes, body, u32be(crc)]);
}

// -- PNG encode -------------------------------------------------------------------

export function encodeMaskPng(mask: MaskRaster): Uint8Array {
  const { width, height, data } = mask;
  if (data.length !== width * height) {
    throw new MaskError(`raster length ${data.length} != ${width}x${height}`);
  }
  assertBinary(data);
  const ihdr = concatBytes([
    u32be(width),
    u32be(height),
    new Uint8Array([8, 0, 0, 0, 0]), // 8-bit grayscale, deflate, standard filters, no interlace
  ]);
  const scanlines = new Uint8Array(height * (width + 1));
  for (let y = 0; y < height; y++) {
    scanlines[y * (width + 1)] = 0; // filter: none
    scanlines.set(data.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
  }
  return concatBytes([
    new Uint8Array(PNG_SIGNATURE),
    chunk("IHDR", ihdr),
    chunk("IDAT", deflate(scanlines)),
    chunk("IEND", new Uint8Array(0)),
  ]);
}

// -- PNG decode -------------------------------------------------------------------

function unfilter(raw: Uint8Array, width: number, height: number): Uint8Array {
  // bytes-per-pixel is 1, so "left" is simply the previous byte in the row
  const stride = width + 1;
  if (raw.length !== stride * height) {
    throw new MaskError(`decompressed size ${raw.length} != expected ${stride * height}`);
  }
  const out = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * stride]!;
    for (let x = 0; x < width; x++) {
      const v = raw[y * stride + 1 + x]!;
      const left = x > 0 ? out[y * width + x - 1]! : 0;
      const up = y > 0 ? out[(y - 1) * width + x]! : 0;
      const upLeft = x > 0 && y > 0 ? out[(y - 1) * width + x - 1]! : 0;
      let value: number;
      switch (filter) {
        case 0:
          value = v;
          break;
        case 1:
          value = v + left;
          break;
        case 2:
          value = v + up;
          break;
        case 3:
          value = v + Math.floor((left + up) / 2);
          break;
        case 4: {
          const p = left + up - upLeft;
          const pa = Math.abs(p - left);
          const pb = Math.abs(p - up);
          const pc = Math.abs(p - upLeft);
          value = v + (pa <= pb && pa <= pc ? left : pb <= pc ? up : upLeft);
          break;
        }
        default:
          throw new MaskError(`unsupported PNG filter type ${filter} on row ${y}`);
      }
      out[y * width + x] = value & 0xff;
    }
  }
  return out;
}

export function decodeMaskPng(bytes: Uint8Array): MaskRaster {
  for (let i = 0; i < PNG_SIGNATURE.length; i++) {
    if (bytes[i] !== PNG_SIGNATURE[i]) throw new MaskError("not a PNG");
  }
  let at = 8;
  let width = 0;
  let height = 0;
  let seenHeader = false;
  const idat: Uint8Array[] = [];
  while (at < bytes.length) {
    const length = readU32be(bytes, at);
    const type = new TextDecoder().decode(bytes.subarray(at + 4, at + 8));
    const body = bytes.subarray(at + 8, at + 8 + length);
    at += 12 + length;
    if (type === "IHDR") {
      width = readU32be(body, 0);
      height = readU32be(body, 4);
      const [depth, color, , , interlace] = [body[8], body[9], body[10], body[11], body[12]];
      if (depth !== 8 || color !== 0) {
        throw new MaskError(`mask PNG must be 8-bit grayscale, got depth ${depth} color type ${color}`);
      }
      if (interlace !== 0) throw new MaskError("interlaced PNGs are not supported");
      seenHeader = true;
    } else if (type === "IDAT") {
      idat.push(body);
    } else if (type === "IEND") {
      break;
    }
  }
  if (!seenHeader || idat.length === 0) throw new MaskError("PNG is missing IHDR or IDAT");
  const data = unfilter(inflate(concatBytes(idat)), width, height);
  assertBinary(data);
  return { width, height, data };
}

// -- base64 (node 20 and browsers both expose btoa/atob) ----------------------------

export function bytesToBase64(bytes: Uint8Array): string {
  let binary = "";
  const CHUNK = 0x2000;
  for (let i = 0; i < bytes.length; i += CHUNK) {
    binary += String.fromCharCode(...bytes.subarray(i, i + CHUNK));
  }
  return btoa(binary);
}

export function base64ToBytes(b64: string): Uint8Array {
  const binary = atob(b64);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}

export function maskToBase64Png(mask: MaskRaster): string {
  return bytesToBase64(encodeMaskPng(mask));
}

export function maskFromBase64Png(b64: string): MaskRaster {
  return decodeMaskPng(base64ToBytes(b64));
}
