/** Typed client for the editing service. All traffic goes through the HTTP
 * and SSE endpoints; the fetch implementation is injectable for tests. */
import { SpecPayload } from "./editspec.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface ImageUpload {
  image_id: string;
  size: [number, number]; // [height, width]
}

export interface BankInfo {
  bank_id: string;
  preparing_seconds: number;
  has_reference: boolean;
  reused: boolean;
}

export interface EditSubmission {
  job_id: string;
  status_url: string;
  reused: boolean;
}

export interface JobStatus {
  job_id: string;
  phase: "queued" | "inverting" | "sampling" | "done" | "failed" | "cancelled";
  spec_kind: string | null;
  cancel_requested: boolean;
  error: string | null;
  timings: { preparing_seconds: number | null; inference_seconds: number | null };
  artifacts: {
    result_url: string | null;
    preview_urls: string[];
    step_log_url: string | null;
  };
}

export interface FieldError {
  field: string;
  message: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public errors: FieldError[],
  ) {
    super(errors.map((e) => (e.field ? `${e.field}: ${e.message}` : e.message)).join("; "));
  }
}

async function parseOrThrow<T>(res: Response): Promise<T> {
  if (res.ok) return (await res.json()) as T;
  let errors: FieldError[] = [{ field: "", message: res.statusText }];
  try {
    const body = (await res.json()) as { errors?: FieldError[] };
    if (body.errors) errors = body.errors;
  } catch {
    // keep the status line
  }
  throw new ApiError(res.status, errors);
}

export class DrageditApi {
  constructor(
    public baseUrl: string = "",
    public readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return this.baseUrl + path;
  }

  async uploadImage(png: Uint8Array): Promise<ImageUpload> {
    const res = await this.fetchImpl(this.url("/images"), {
      method: "POST",
      headers: { "content-type": "image/png" },
      body: png as unknown as BodyInit,
    });
    return parseOrThrow<ImageUpload>(res);
  }

  imageUrl(imageId: string): string {
    return this.url(`/images/${imageId}`);
  }

  async createBank(req: {
    image_id: string;
    ref_image_id?: string;
    steps?: number;
    prompt?: string;
  }): Promise<BankInfo> {
    const res = await this.fetchImpl(this.url("/banks"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ v: 1, ...req }),
    });
    return parseOrThrow<BankInfo>(res);
  }

  async submitEdit(
    bankId: string,
    spec: SpecPayload,
    config: Record<string, unknown> = {},
  ): Promise<EditSubmission> {
    const res = await this.fetchImpl(this.url("/edits"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ v: 1, bank_id: bankId, spec, config }),
    });
    return parseOrThrow<EditSubmission>(res);
  }

  async jobStatus(jobId: string): Promise<JobStatus> {
    const res = await this.fetchImpl(this.url(`/edits/${jobId}`));
    return parseOrThrow<JobStatus>(res);
  }

  async cancel(jobId: string): Promise<void> {
    const res = await this.fetchImpl(this.url(`/edits/${jobId}/cancel`), { method: "POST" });
    await parseOrThrow(res);
  }

  async validateSpec(
    spec: SpecPayload,
  ): Promise<{ ok: boolean; kind: string; image_size: [number, number] }> {
    const res = await this.fetchImpl(this.url("/specs/validate"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(spec),
    });
    return parseOrThrow(res);
  }

  async fetchResult(jobId: string): Promise<Uint8Array> {
    const res = await this.fetchImpl(this.url(`/edits/${jobId}/result`));
    if (!res.ok) throw new ApiError(res.status, [{ field: "", message: "result not ready" }]);
    return new Uint8Array(await res.arrayBuffer());
  }

  eventsUrl(jobId: string): string {
    return this.url(`/edits/${jobId}/events`);
  }

  previewUrl(jobId: string, index: number): string {
    return this.url(`/edits/${jobId}/previews/${index}`);
  }
}
