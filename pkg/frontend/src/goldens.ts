/** Canonical drafts, one per task kind. Their serialized payloads are the
 * golden files the engine's test suite validates against its own parser, so
 * the two sides cannot drift apart silently. Everything here is
 * deterministic: fixed rasters, fixed offsets, fixed points. */
import { EditDraft, serializeDraft, SpecPayload, TaskKind } from "./editspec.js";
import { emptyMask, fillRect, MaskRaster } from "./mask.js";

function rect(w: number, h: number, y0: number, y1: number, x0: number, x1: number): MaskRaster {
  const m = emptyMask(w, h);
  fillRect(m, y0, y1, x0, x1);
  return m;
}

export function goldenDrafts(): Record<TaskKind, EditDraft> {
  const shareMask = rect(32, 32, 0, 32, 0, 32);
  fillRect(shareMask, 6, 25, 6, 15, false); // keep clear of both drag patches
  return {
    moving: {
      kind: "moving",
      objectMask: rect(16, 16, 4, 8, 3, 7),
      offset: [5, 4],
      weights: { w_edit: 1.5 },
    },
    resizing: {
      kind: "resizing",
      objectMask: rect(16, 16, 6, 9, 6, 9),
      offset: [0, 0],
      gamma: 2.0,
    },
    replacing: {
      kind: "replacing",
      objectMask: rect(16, 16, 3, 9, 3, 9),
      referenceMask: rect(16, 16, 2, 8, 9, 14),
    },
    pasting: {
      kind: "pasting",
      referenceMask: rect(16, 16, 2, 6, 2, 6),
      targetMask: rect(16, 16, 9, 13, 8, 12),
    },
    dragging: {
      kind: "dragging",
      points: [{ src: [10, 10], dst: [20, 10] }],
      shareMask,
    },
  };
}

export function goldenPayloads(): Record<TaskKind, SpecPayload> {
  const drafts = goldenDrafts();
  const out = {} as Record<TaskKind, SpecPayload>;
  for (const kind of Object.keys(drafts) as TaskKind[]) {
    out[kind] = serializeDraft(drafts[kind]);
  }
  return out;
}
