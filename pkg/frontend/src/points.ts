/** Drag-point geometry for the canvas overlay.
 *
 * Every drag pair moves the 3x3 patch of pixels centered on the source
 * point to the one centered on the destination; the preview highlights
 * exactly the cells the engine will pair, so only offsets that keep both
 * patches on the canvas are kept.
 */

export type Point = [number, number]; // [y, x]

export interface DragPair {
  src: Point;
  dst: Point;
}

export interface Size {
  width: number;
  height: number;
}

function inBounds(y: number, x: number, size: Size): boolean {
  return y >= 0 && y < size.height && x >= 0 && x < size.width;
}

/** The 3x3 patch cells around a point, clipped to cells whose counterpart
 * under the pair's offset is also on the canvas (mirrors the engine). */
export function pairPatchCells(pair: DragPair, size: Size): { src: Point[]; dst: Point[] } {
  const src: Point[] = [];
  const dst: Point[] = [];
  for (let dy = -1; dy <= 1; dy++) {
    for (let dx = -1; dx <= 1; dx++) {
      const sy = pair.src[0] + dy;
      const sx = pair.src[1] + dx;
      const ty = pair.dst[0] + dy;
      const tx = pair.dst[1] + dx;
      if (inBounds(sy, sx, size) && inBounds(ty, tx, size)) {
        src.push([sy, sx]);
        dst.push([ty, tx]);
      }
    }
  }
  return { src, dst };
}

export function validatePair(pair: DragPair, size: Size): string | null {
  if (!inBounds(pair.src[0], pair.src[1], size)) return "source point is outside the image";
  if (!inBounds(pair.dst[0], pair.dst[1], size)) return "target point is outside the image";
  if (pairPatchCells(pair, size).src.length === 0) return "patch has no cells on the canvas";
  return null;
}

/** Arrow geometry for drawing: from source (red) to destination (blue). */
export function arrowFor(pair: DragPair): { from: Point; to: Point; length: number } {
  const dy = pair.dst[0] - pair.src[0];
  const dx = pair.dst[1] - pair.src[1];
  return { from: pair.src, to: pair.dst, length: Math.hypot(dy, dx) };
}
