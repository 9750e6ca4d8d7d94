/** Incremental parser for the job event stream.
 *
 * The service replays the whole event log on (re)connect, so a consumer can
 * resume after a dropped connection by re-subscribing and skipping the
 * events it has already seen.
 */

export interface PhaseEvent {
  event: "phase";
  phase: string;
}

export interface StepEvent {
  event: "step";
  t: number;
  seconds: number;
  gradient_norm: number | null;
  energy: number | null;
}

export interface PreviewEvent {
  event: "preview";
  t: number;
  index: number;
}

export interface EndEvent {
  event: "end";
  phase: string;
  error: string | null;
}

export type JobEvent = PhaseEvent | StepEvent | PreviewEvent | EndEvent;

export class SseParser {
  private buffer = "";

  /** Feed a text chunk; returns the events completed by it. */
  feed(chunk: string): JobEvent[] {
    this.buffer += chunk;
    const events: JobEvent[] = [];
    for (;;) {
      const split = this.buffer.indexOf("\n\n");
      if (split < 0) break;
      const block = this.buffer.slice(0, split);
      this.buffer = this.buffer.slice(split + 2);
      const fields = new Map<string, string>();
      for (const line of block.split("\n")) {
        const colon = line.indexOf(": ");
        if (colon > 0) fields.set(line.slice(0, colon), line.slice(colon + 2));
      }
      const data = fields.get("data");
      if (data !== undefined) events.push(JSON.parse(data) as JobEvent);
    }
    return events;
  }
}

export interface StreamHandle {
  done: Promise<EndEvent | null>;
  abort(): void;
}

/** Stream a job's events, invoking onEvent for each one after `skip`.
 * Resolves with the terminal event (or null if aborted first). */
export function streamJobEvents(
  url: string,
  onEvent: (event: JobEvent) => void,
  options: { skip?: number; fetchImpl?: (url: string, init?: RequestInit) => Promise<Response> } = {},
): StreamHandle {
  const controller = new AbortController();
  const fetchImpl = options.fetchImpl ?? fetch;
  let seen = 0;
  const skip = options.skip ?? 0;
  const done = (async (): Promise<EndEvent | null> => {
    const res = await fetchImpl(url, { signal: controller.signal });
    if (!res.ok || !res.body) throw new Error(`event stream failed: ${res.status}`);
    const reader = res.body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    try {
      for (;;) {
        const { value, done: eof } = await reader.read();
        if (eof) break;
        for (const event of parser.feed(decoder.decode(value, { stream: true }))) {
          seen += 1;
          if (seen <= skip) continue;
          onEvent(event);
          if (event.event === "end") return event;
        }
      }
    } catch (err) {
      if (!controller.signal.aborted) throw err;
    }
    return null;
  })();
  return { done, abort: () => controller.abort() };
}
