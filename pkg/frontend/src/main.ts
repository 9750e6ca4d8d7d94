/** Single-page canvas client. All state lives in a CanvasSession; this file
 * is only wiring between DOM events and the session/api modules. */
import { DrageditApi } from "./api.js";
import { TaskKind, TASK_KINDS } from "./editspec.js";
import { emptyMask, MaskRaster } from "./mask.js";
import { DragPair, pairPatchCells } from "./points.js";
import { CanvasSession } from "./session.js";

const api = new DrageditApi("");
let session = new CanvasSession(api);
let pendingSource: [number, number] | null = null;
let brushOn = true;

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
};

const canvas = $("canvas") as unknown as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const problems = $("problems");
const historyEl = $("history");
const phaseEl = $("phase");
const previewImg = $("preview") as unknown as HTMLImageElement;

function activeMaskSlot(): "objectMask" | "referenceMask" | "targetMask" | "shareMask" {
  const kind = session.draft.kind;
  const slot = ($("mask-slot") as unknown as HTMLSelectElement).value;
  if (kind === "dragging") return "shareMask";
  if (kind === "pasting") return slot === "reference" ? "referenceMask" : "targetMask";
  if (kind === "replacing") return slot === "reference" ? "referenceMask" : "objectMask";
  return slot === "reference" ? "referenceMask" : "objectMask";
}

function ensureMask(): MaskRaster {
  const slot = activeMaskSlot();
  const size = session.imageSize ?? { width: canvas.width, height: canvas.height };
  let mask = session.draft[slot];
  if (!mask || mask.width !== size.width || mask.height !== size.height) {
    mask = emptyMask(size.width, size.height);
    session.setMask(slot, mask);
  }
  return mask;
}

function paint(ev: PointerEvent): void {
  if (!(ev.buttons & 1)) return;
  const rect = canvas.getBoundingClientRect();
  const x = Math.floor(((ev.clientX - rect.left) / rect.width) * canvas.width);
  const y = Math.floor(((ev.clientY - rect.top) / rect.height) * canvas.height);
  const mask = ensureMask();
  const radius = Number(($("brush") as unknown as HTMLInputElement).value) || 1;
  for (let dy = -radius; dy <= radius; dy++) {
    for (let dx = -radius; dx <= radius; dx++) {
      const yy = y + dy;
      const xx = x + dx;
      if (yy >= 0 && yy < mask.height && xx >= 0 && xx < mask.width && dy * dy + dx * dx <= radius * radius) {
        mask.data[yy * mask.width + xx] = brushOn ? 255 : 0;
      }
    }
  }
  redraw();
}

function placePoint(ev: MouseEvent): void {
  if (session.draft.kind !== "dragging") return;
  const rect = canvas.getBoundingClientRect();
  const x = Math.floor(((ev.clientX - rect.left) / rect.width) * canvas.width);
  const y = Math.floor(((ev.clientY - rect.top) / rect.height) * canvas.height);
  if (!pendingSource) {
    pendingSource = [y, x];
  } else {
    session.addDragPair({ src: pendingSource, dst: [y, x] });
    pendingSource = null;
  }
  redraw();
}

function drawArrow(pair: DragPair): void {
  const [sy, sx] = pair.src;
  const [ty, tx] = pair.dst;
  ctx.strokeStyle = "#ffd400";
  ctx.beginPath();
  ctx.moveTo(sx + 0.5, sy + 0.5);
  ctx.lineTo(tx + 0.5, ty + 0.5);
  ctx.stroke();
  const size = { width: canvas.width, height: canvas.height };
  const cells = pairPatchCells(pair, size);
  ctx.fillStyle = "rgba(255,0,0,.5)";
  for (const [y, x] of cells.src) ctx.fillRect(x, y, 1, 1);
  ctx.fillStyle = "rgba(0,80,255,.5)";
  for (const [y, x] of cells.dst) ctx.fillRect(x, y, 1, 1);
}

function redraw(): void {
  const layers = session.layers;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const done = () => {
    if (layers.maskOverlay) {
      ctx.fillStyle = "rgba(0,255,120,.35)";
      const m = layers.maskOverlay;
      for (let y = 0; y < m.height; y++) {
        for (let x = 0; x < m.width; x++) {
          if (m.data[y * m.width + x] === 255) ctx.fillRect(x, y, 1, 1);
        }
      }
    }
    for (const pair of layers.arrows) drawArrow(pair);
    const reasons = session.draftProblems();
    problems.textContent = reasons.length ? reasons.join("\n") : "draft is valid";
    problems.className = reasons.length ? "bad" : "good";
  };
  if (layers.imageUrl) {
    const img = new Image();
    img.onload = () => {
      canvas.width = img.naturalWidth;
      canvas.height = img.naturalHeight;
      ctx.drawImage(img, 0, 0);
      done();
    };
    img.src = layers.imageUrl;
  } else {
    done();
  }
}

function renderHistory(): void {
  historyEl.replaceChildren(
    ...session.history.map((entry, i) => {
      const div = document.createElement("div");
      div.className = "job";
      const label = document.createElement("span");
      label.textContent = `${i + 1}. ${entry.kind} - ${entry.phase}` + (entry.error ? ` (${entry.error})` : "");
      div.appendChild(label);
      if (entry.thumbnailUrl) {
        const img = document.createElement("img");
        img.src = entry.thumbnailUrl;
        img.width = 64;
        div.appendChild(img);
        const btn = document.createElement("button");
        btn.textContent = "continue from this";
        btn.onclick = async () => {
          session = await session.continueEdit(entry.jobId);
          renderHistory();
          redraw();
        };
        div.appendChild(btn);
      }
      return div;
    }),
  );
}

async function submit(): Promise<void> {
  const kind = ($("kind") as unknown as HTMLSelectElement).value as TaskKind;
  session.draft.kind = kind;
  const offset = ($("offset") as unknown as HTMLInputElement).value.split(",").map(Number);
  if (offset.length === 2 && offset.every(Number.isInteger)) {
    session.draft = { ...session.draft, offset: [offset[0]!, offset[1]!] };
  }
  const gamma = Number(($("gamma") as unknown as HTMLInputElement).value);
  if (gamma > 0) session.draft = { ...session.draft, gamma };
  if (!session.draftValid()) {
    redraw();
    return;
  }
  if (!session.bankId) {
    phaseEl.textContent = "inverting...";
    await session.prepareBank({ steps: 50, prompt: ($("prompt") as unknown as HTMLInputElement).value || undefined });
  }
  const entry = await session.submit();
  renderHistory();
  const handle = session.watch(entry.jobId, (event) => {
    phaseEl.textContent = `${entry.phase} (${entry.stepsSeen} steps)`;
    if (event.event === "preview") {
      previewImg.src = entry.previewUrls[entry.previewUrls.length - 1] ?? "";
    }
    renderHistory();
  });
  const end = await handle.done;
  if (end) {
    const status = await api.jobStatus(entry.jobId);
    session.applyStatus(status);
    renderHistory();
  }
}

export function wire(): void {
  const kindSelect = $("kind") as unknown as HTMLSelectElement;
  kindSelect.replaceChildren(
    ...TASK_KINDS.map((k) => {
      const opt = document.createElement("option");
      opt.value = k;
      opt.textContent = k;
      return opt;
    }),
  );
  kindSelect.onchange = () => {
    session.setKind(kindSelect.value as TaskKind);
    pendingSource = null;
    redraw();
  };
  ($("file") as unknown as HTMLInputElement).onchange = async (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (!file) return;
    await session.uploadImage(new Uint8Array(await file.arrayBuffer()));
    redraw();
  };
  canvas.addEventListener("pointermove", paint);
  canvas.addEventListener("pointerdown", (ev) => {
    if (session.draft.kind === "dragging" && ev.shiftKey) placePoint(ev);
    else paint(ev);
  });
  $("erase").onclick = () => {
    brushOn = !brushOn;
    $("erase").textContent = brushOn ? "erase" : "paint";
  };
  $("submit").onclick = () => void submit();
  redraw();
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  wire();
}
