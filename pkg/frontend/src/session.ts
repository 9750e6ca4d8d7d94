/** One editing session: an image, its bank, the draft being composed, and
 * the jobs submitted so far. Continuing from a finished result seeds a new
 * session whose source image is that result, so edits chain. */
import { DrageditApi, JobStatus } from "./api.js";
import { EditDraft, serializeDraft, TaskKind, validateDraft } from "./editspec.js";
import { MaskRaster } from "./mask.js";
import { DragPair, Size } from "./points.js";
import { JobEvent, streamJobEvents } from "./sse.js";

export interface JobHistoryEntry {
  jobId: string;
  kind: TaskKind;
  phase: string;
  thumbnailUrl: string | null;
  previewUrls: string[];
  stepsSeen: number;
  error: string | null;
}

export interface LayerStack {
  imageUrl: string | null;
  maskOverlay: MaskRaster | null;
  arrows: DragPair[];
}

export class CanvasSession {
  imageId: string | null = null;
  imageSize: Size | null = null;
  bankId: string | null = null;
  draft: EditDraft = { kind: "moving" };
  history: JobHistoryEntry[] = [];

  constructor(public api: DrageditApi) {}

  /** image, then the painted mask, then drag arrows on top */
  get layers(): LayerStack {
    const activeMask =
      this.draft.kind === "dragging"
        ? this.draft.shareMask
        : this.draft.kind === "pasting"
          ? this.draft.targetMask
          : this.draft.objectMask;
    return {
      imageUrl: this.imageId ? this.api.imageUrl(this.imageId) : null,
      maskOverlay: activeMask ?? null,
      arrows: this.draft.kind === "dragging" ? (this.draft.points ?? []) : [],
    };
  }

  draftProblems(): string[] {
    return validateDraft(this.draft, this.imageSize);
  }

  draftValid(): boolean {
    return this.draftProblems().length === 0;
  }

  async uploadImage(png: Uint8Array): Promise<string> {
    const up = await this.api.uploadImage(png);
    this.imageId = up.image_id;
    this.imageSize = { height: up.size[0], width: up.size[1] };
    this.bankId = null; // a new image needs a new bank
    return up.image_id;
  }

  async prepareBank(opts: { steps?: number; prompt?: string; refImageId?: string } = {}): Promise<string> {
    if (!this.imageId) throw new Error("no image uploaded");
    const bank = await this.api.createBank({
      image_id: this.imageId,
      ref_image_id: opts.refImageId,
      steps: opts.steps,
      prompt: opts.prompt,
    });
    this.bankId = bank.bank_id;
    return bank.bank_id;
  }

  /** Submit the draft. The history entry is optimistic (queued) and is
   * reconciled against polls and the event stream. */
  async submit(config: Record<string, unknown> = {}): Promise<JobHistoryEntry> {
    if (!this.bankId) throw new Error("no bank prepared");
    const payload = serializeDraft(this.draft, this.imageSize);
    const submitted = await this.api.submitEdit(this.bankId, payload, config);
    let entry = this.history.find((e) => e.jobId === submitted.job_id);
    if (!entry) {
      entry = {
        jobId: submitted.job_id,
        kind: this.draft.kind,
        phase: "queued",
        thumbnailUrl: null,
        previewUrls: [],
        stepsSeen: 0,
        error: null,
      };
      this.history.push(entry);
    }
    return entry;
  }

  /** Fold a polled status into the optimistic entry (poll wins). */
  applyStatus(status: JobStatus): JobHistoryEntry {
    const entry = this.history.find((e) => e.jobId === status.job_id);
    if (!entry) throw new Error(`unknown job ${status.job_id}`);
    entry.phase = status.phase;
    entry.error = status.error;
    entry.previewUrls = status.artifacts.preview_urls;
    if (status.phase === "done" && status.artifacts.result_url) {
      entry.thumbnailUrl = status.artifacts.result_url;
    }
    return entry;
  }

  /** Subscribe to a job's event stream; one subscription per job. */
  watch(jobId: string, onEvent?: (event: JobEvent) => void) {
    const entry = this.history.find((e) => e.jobId === jobId);
    if (!entry) throw new Error(`unknown job ${jobId}`);
    return streamJobEvents(
      this.api.eventsUrl(jobId),
      (event) => {
        if (event.event === "phase") entry.phase = event.phase;
        if (event.event === "step") entry.stepsSeen += 1;
        if (event.event === "preview") {
          entry.previewUrls = [...entry.previewUrls, this.api.previewUrl(jobId, event.index)];
        }
        if (event.event === "end") {
          entry.phase = event.phase;
          entry.error = event.error;
        }
        onEvent?.(event);
      },
      { fetchImpl: this.api.fetchImpl },
    );
  }

  /** Start over from a finished job's output: fetch the result, upload it as
   * the next session's source image, keep the task kind. */
  async continueEdit(jobId: string): Promise<CanvasSession> {
    const entry = this.history.find((e) => e.jobId === jobId);
    if (!entry || entry.phase !== "done") {
      throw new Error("can only continue from a finished job");
    }
    const resultPng = await this.api.fetchResult(jobId);
    const next = new CanvasSession(this.api);
    await next.uploadImage(resultPng);
    next.draft = { kind: this.draft.kind };
    return next;
  }

  // -- draft mutators (thin, used by the canvas glue) ------------------------

  setKind(kind: TaskKind): void {
    this.draft = { kind };
  }

  setMask(which: "objectMask" | "referenceMask" | "targetMask" | "shareMask", mask: MaskRaster): void {
    this.draft = { ...this.draft, [which]: mask };
  }

  addDragPair(pair: DragPair): void {
    this.draft = { ...this.draft, points: [...(this.draft.points ?? []), pair] };
  }

  removeDragPair(index: number): void {
    const points = [...(this.draft.points ?? [])];
    points.splice(index, 1);
    this.draft = { ...this.draft, points };
  }
}
