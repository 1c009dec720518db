/** Server-sent event subscription with gap-free resume.
 *
 * Frames arrive as `id: <seq>\ndata: <json>\n\n`. The subscriber tracks the
 * last delivered sequence number and reconnects from there, so a dropped
 * connection never skips or duplicates an event. Events are rejected (and the
 * stream re-opened) if a sequence gap is ever observed — the log is the source
 * of truth and must be consumed contiguously.
 */

import type { EventRecord } from "./types.js";

export interface SseFrame {
  id: number;
  data: string;
}

/** Incremental parser: feed arbitrary chunks, receive complete frames. */
export class SseParser {
  private buffer = "";

  push(chunk: string): SseFrame[] {
    this.buffer += chunk;
    const frames: SseFrame[] = [];
    let boundary: number;
    while ((boundary = this.buffer.indexOf("\n\n")) !== -1) {
      const raw = this.buffer.slice(0, boundary);
      this.buffer = this.buffer.slice(boundary + 2);
      const frame = parseFrame(raw);
      if (frame) frames.push(frame);
    }
    return frames;
  }
}

function parseFrame(raw: string): SseFrame | null {
  let id: number | null = null;
  const dataLines: string[] = [];
  for (const line of raw.split("\n")) {
    if (line.startsWith("id: ")) id = Number(line.slice(4));
    else if (line.startsWith("data: ")) dataLines.push(line.slice(6));
    else if (line.startsWith("data:")) dataLines.push(line.slice(5));
  }
  if (id === null || dataLines.length === 0) return null;
  return { id, data: dataLines.join("\n") };
}

export interface SubscribeOptions {
  /** Deliver events with seq > fromSeq (default 0: from the start). */
  fromSeq?: number;
  /** Milliseconds between reconnect attempts (default 250). */
  retryDelayMs?: number;
  /** Stop after an event of one of these kinds (default run terminals). */
  terminalKinds?: readonly string[];
  signal?: AbortSignal;
}

export const DEFAULT_TERMINAL_KINDS = ["run_completed", "run_aborted"] as const;

/**
 * Consume a run's event stream until a terminal event, resuming from the last
 * delivered sequence across connection drops. `openStream` is called with the
 * resume point for every (re)connection.
 */
export async function subscribe(
  openStream: (fromSeq: number) => Promise<Response>,
  onEvent: (event: EventRecord) => void,
  options: SubscribeOptions = {},
): Promise<number> {
  const terminal = new Set(options.terminalKinds ?? DEFAULT_TERMINAL_KINDS);
  const retryDelayMs = options.retryDelayMs ?? 250;
  let delivered = options.fromSeq ?? 0;

  for (;;) {
    if (options.signal?.aborted) return delivered;
    let sawTerminal = false;
    try {
      const response = await openStream(delivered);
      if (!response.ok || !response.body) {
        throw new Error(`event stream rejected: HTTP ${response.status}`);
      }
      const reader = response.body.getReader();
      const decoder = new TextDecoder();
      const parser = new SseParser();
      for (;;) {
        const { done, value } = await reader.read();
        if (done) break;
        for (const frame of parser.push(decoder.decode(value, { stream: true }))) {
          if (frame.id <= delivered) continue; // replayed on resume: drop
          if (frame.id !== delivered + 1) {
            // a gap means this connection is unusable; resume from `delivered`
            await reader.cancel();
            throw new Error(`sequence gap: got ${frame.id}, expected ${delivered + 1}`);
          }
          const event = JSON.parse(frame.data) as EventRecord;
          delivered = frame.id;
          onEvent(event);
          if (terminal.has(event.kind)) sawTerminal = true;
          if (options.signal?.aborted) {
            await reader.cancel();
            return delivered;
          }
        }
        if (sawTerminal) {
          await reader.cancel();
          break;
        }
      }
    } catch (error) {
      if (options.signal?.aborted) return delivered;
      await sleep(retryDelayMs);
      continue;
    }
    if (sawTerminal) return delivered;
    // stream closed without a terminal event: reconnect from the resume point
    await sleep(retryDelayMs);
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
