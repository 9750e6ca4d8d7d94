/** Edit drafts and their wire serialization.
 *
 * The client never derives preserve/fill masks itself; it ships exactly what
 * the user drew (object/reference/target/share masks, an offset, a scale
 * factor, drag pairs) and the engine rebuilds the rest. The payload shapes
 * here must stay in lockstep with the service validator; the golden files
 * under goldens/ are checked against it from the engine's test suite.
 */
import { countOn, maskToBase64Png, MaskRaster, masksEqual } from "./mask.js";
import { DragPair, Size, validatePair } from "./points.js";

export const SCHEMA_VERSION = 1;

export type TaskKind = "moving" | "resizing" | "replacing" | "pasting" | "dragging";

export const TASK_KINDS: readonly TaskKind[] = [
  "moving",
  "resizing",
  "replacing",
  "pasting",
  "dragging",
];

export interface EditDraft {
  kind: TaskKind;
  /** object to move/resize (moving, resizing) or to re-skin (replacing) */
  objectMask?: MaskRaster;
  /** appearance source; required for replacing/pasting, optional ring override otherwise */
  referenceMask?: MaskRaster;
  /** paste destination footprint (pasting) */
  targetMask?: MaskRaster;
  /** region to keep untouched while dragging */
  shareMask?: MaskRaster;
  offset?: [number, number]; // [dy, dx]
  gamma?: number;
  points?: DragPair[];
  weights?: Record<string, number>;
}

export interface SpecPayload {
  v: number;
  kind: TaskKind;
  masks: Record<string, string>;
  offset?: [number, number];
  gamma?: number;
  points?: { src: [number, number]; dst: [number, number] }[];
  weights?: Record<string, number>;
}

export class SpecDraftError extends Error {
  constructor(public reasons: string[]) {
    super(reasons.join("; "));
  }
}

function maskBounds(mask: MaskRaster): { y0: number; y1: number; x0: number; x1: number } | null {
  let y0 = mask.height;
  let y1 = -1;
  let x0 = mask.width;
  let x1 = -1;
  for (let y = 0; y < mask.height; y++) {
    for (let x = 0; x < mask.width; x++) {
      if (mask.data[y * mask.width + x] === 255) {
        if (y < y0) y0 = y;
        if (y > y1) y1 = y;
        if (x < x0) x0 = x;
        if (x > x1) x1 = x;
      }
    }
  }
  return y1 < 0 ? null : { y0, y1, x0, x1 };
}

function checkMask(
  reasons: string[],
  mask: MaskRaster | undefined,
  field: string,
  size: Size | null,
): mask is MaskRaster {
  if (!mask) {
    reasons.push(`${field}: required for this task kind`);
    return false;
  }
  if (countOn(mask) === 0) {
    reasons.push(`${field}: mask is empty`);
    return false;
  }
  if (size && (mask.width !== size.width || mask.height !== size.height)) {
    reasons.push(`${field}: mask is ${mask.width}x${mask.height}, image is ${size.width}x${size.height}`);
    return false;
  }
  return true;
}

function isIntPair(v: unknown): v is [number, number] {
  return Array.isArray(v) && v.length === 2 && v.every((n) => Number.isInteger(n));
}

/** Client-side mirror of the server checks, for inline feedback. */
export function validateDraft(draft: EditDraft, imageSize: Size | null = null): string[] {
  const reasons: string[] = [];
  if (!TASK_KINDS.includes(draft.kind)) {
    return [`kind: must be one of ${TASK_KINDS.join(", ")}`];
  }
  if (draft.kind === "moving" || draft.kind === "resizing") {
    const ok = checkMask(reasons, draft.objectMask, "masks.object", imageSize);
    if (!isIntPair(draft.offset)) {
      reasons.push("offset: must be [dy, dx] integers");
    } else if (ok && draft.objectMask) {
      const b = maskBounds(draft.objectMask)!;
      const scale = draft.kind === "resizing" && draft.gamma ? draft.gamma : 1;
      const [dy, dx] = draft.offset;
      if (scale === 1) {
        if (
          b.y0 + dy < 0 ||
          b.y1 + dy >= draft.objectMask.height ||
          b.x0 + dx < 0 ||
          b.x1 + dx >= draft.objectMask.width
        ) {
          reasons.push("offset: moves the object outside the image");
        }
      }
    }
    if (draft.kind === "resizing" && (typeof draft.gamma !== "number" || draft.gamma <= 0)) {
      reasons.push("gamma: must be a number > 0");
    }
  } else if (draft.kind === "replacing") {
    checkMask(reasons, draft.objectMask, "masks.object", imageSize);
    checkMask(reasons, draft.referenceMask, "masks.reference", null);
  } else if (draft.kind === "pasting") {
    const refOk = checkMask(reasons, draft.referenceMask, "masks.reference", null);
    const tgtOk = checkMask(reasons, draft.targetMask, "masks.target", imageSize);
    if (refOk && tgtOk && countOn(draft.referenceMask!) !== countOn(draft.targetMask!)) {
      reasons.push("masks.target: must cover exactly as many pixels as masks.reference");
    }
  } else if (draft.kind === "dragging") {
    const ok = checkMask(reasons, draft.shareMask, "masks.share", imageSize);
    if (!draft.points || draft.points.length === 0) {
      reasons.push("points: must be a nonempty list");
    } else if (ok && draft.shareMask) {
      const size = { width: draft.shareMask.width, height: draft.shareMask.height };
      draft.points.forEach((pair, i) => {
        const problem = validatePair(pair, size);
        if (problem) reasons.push(`points[${i}]: ${problem}`);
      });
    }
  }
  if (draft.weights) {
    for (const [key, value] of Object.entries(draft.weights)) {
      if (typeof value !== "number" || !Number.isFinite(value)) {
        reasons.push(`weights.${key}: must be a finite number`);
      }
    }
  }
  return reasons;
}

export function serializeDraft(draft: EditDraft, imageSize: Size | null = null): SpecPayload {
  const reasons = validateDraft(draft, imageSize);
  if (reasons.length > 0) throw new SpecDraftError(reasons);
  const payload: SpecPayload = { v: SCHEMA_VERSION, kind: draft.kind, masks: {} };
  if (draft.kind === "moving" || draft.kind === "resizing") {
    payload.masks["object"] = maskToBase64Png(draft.objectMask!);
    payload.offset = [draft.offset![0], draft.offset![1]];
    if (draft.kind === "resizing") payload.gamma = draft.gamma!;
    if (draft.referenceMask) payload.masks["reference"] = maskToBase64Png(draft.referenceMask);
  } else if (draft.kind === "replacing") {
    payload.masks["object"] = maskToBase64Png(draft.objectMask!);
    payload.masks["reference"] = maskToBase64Png(draft.referenceMask!);
  } else if (draft.kind === "pasting") {
    payload.masks["reference"] = maskToBase64Png(draft.referenceMask!);
    payload.masks["target"] = maskToBase64Png(draft.targetMask!);
  } else {
    payload.points = draft.points!.map((p) => ({
      src: [p.src[0], p.src[1]],
      dst: [p.dst[0], p.dst[1]],
    }));
    payload.masks["share"] = maskToBase64Png(draft.shareMask!);
  }
  if (draft.weights && Object.keys(draft.weights).length > 0) {
    payload.weights = { ...draft.weights };
  }
  return payload;
}

/** True when two drafts would serialize to the same payload. */
export function draftsEquivalent(a: EditDraft, b: EditDraft): boolean {
  if (a.kind !== b.kind) return false;
  const masks: (keyof EditDraft)[] = ["objectMask", "referenceMask", "targetMask", "shareMask"];
  for (const key of masks) {
    const ma = a[key] as MaskRaster | undefined;
    const mb = b[key] as MaskRaster | undefined;
    if (!!ma !== !!mb) return false;
    if (ma && mb && !masksEqual(ma, mb)) return false;
  }
  return JSON.stringify([a.offset, a.gamma, a.points, a.weights]) ===
    JSON.stringify([b.offset, b.gamma, b.points, b.weights]);
}
