import { describe, expect, it } from "vitest";

import { SseParser, subscribe } from "../src/sse.js";
import type { EventRecord } from "../src/types.js";

function frame(seq: number, kind: string): string {
  const record: EventRecord = { seq, ts: seq, kind, payload: {} };
  return `id: ${seq}\ndata: ${JSON.stringify(record)}\n\n`;
}

function streamResponse(chunks: string[]): Response {
  const encoder = new TextEncoder();
  const body = new ReadableStream<Uint8Array>({
    start(controller) {
      for (const chunk of chunks) controller.enqueue(encoder.encode(chunk));
      controller.close();
    },
  });
  return new Response(body, {
    status: 200,
    headers: { "content-type": "text/event-stream" },
  });
}

describe("SseParser", () => {
  it("reassembles frames split across arbitrary chunk boundaries", () => {
    const parser = new SseParser();
    const wire = frame(1, "run_started") + frame(2, "plan_proposed");
    const frames = [
      ...parser.push(wire.slice(0, 7)),
      ...parser.push(wire.slice(7, 40)),
      ...parser.push(wire.slice(40)),
    ];
    expect(frames.map((f) => f.id)).toEqual([1, 2]);
    expect(JSON.parse(frames[0]!.data).kind).toBe("run_started");
  });

  it("buffers an incomplete trailing frame until its terminator arrives", () => {
    const parser = new SseParser();
    expect(parser.push('id: 1\ndata: {"seq": 1')).toEqual([]);
    const frames = parser.push(', "ts": 1, "kind": "run_started", "payload": {}}\n\n');
    expect(frames).toHaveLength(1);
    expect(frames[0]!.id).toBe(1);
  });

  it("ignores frames without an id or data line", () => {
    const parser = new SseParser();
    expect(parser.push(": comment\n\nid: 3\n\n")).toEqual([]);
  });
});

describe("subscribe", () => {
  it("delivers every event once and stops at the terminal event", async () => {
    const seen: number[] = [];
    const delivered = await subscribe(
      async () => streamResponse([frame(1, "run_started"), frame(2, "step_started"), frame(3, "run_completed")]),
      (event) => seen.push(event.seq),
    );
    expect(seen).toEqual([1, 2, 3]);
    expect(delivered).toBe(3);
  });

  it("reconnects after a drop, resuming without gaps or duplicates", async () => {
    const resumePoints: number[] = [];
    const seen: number[] = [];
    const delivered = await subscribe(
      async (fromSeq) => {
        resumePoints.push(fromSeq);
        if (resumePoints.length === 1) {
          // first connection dies after two events, mid-run
          return streamResponse([frame(1, "run_started"), frame(2, "plan_proposed")]);
        }
        // server replays from `fromSeq`; earlier seqs must be dropped client-side
        return streamResponse([
          frame(1, "run_started"),
          frame(2, "plan_proposed"),
          frame(3, "step_started"),
          frame(4, "run_completed"),
        ]);
      },
      (event) => seen.push(event.seq),
      { retryDelayMs: 5 },
    );
    expect(resumePoints).toEqual([0, 2]);
    expect(seen).toEqual([1, 2, 3, 4]);
    expect(delivered).toBe(4);
  });

  it("treats a sequence gap as a broken connection and re-opens the stream", async () => {
    let attempts = 0;
    const seen: number[] = [];
    await subscribe(
      async () => {
        attempts += 1;
        if (attempts === 1) {
          return streamResponse([frame(1, "run_started"), frame(3, "step_started")]);
        }
        return streamResponse([frame(2, "plan_proposed"), frame(3, "run_completed")]);
      },
      (event) => seen.push(event.seq),
      { retryDelayMs: 5 },
    );
    expect(attempts).toBe(2);
    expect(seen).toEqual([1, 2, 3]);
  });

  it("retries a rejected connection", async () => {
    let attempts = 0;
    const seen: string[] = [];
    await subscribe(
      async () => {
        attempts += 1;
        if (attempts === 1) return new Response("no", { status: 503 });
        return streamResponse([frame(1, "run_completed")]);
      },
      (event) => seen.push(event.kind),
      { retryDelayMs: 5 },
    );
    expect(attempts).toBe(2);
    expect(seen).toEqual(["run_completed"]);
  });

  it("honours fromSeq by skipping already-consumed events", async () => {
    const seen: number[] = [];
    await subscribe(
      async () => streamResponse([frame(1, "a"), frame(2, "b"), frame(3, "run_completed")]),
      (event) => seen.push(event.seq),
      { fromSeq: 2 },
    );
    expect(seen).toEqual([3]);
  });

  it("stops when the abort signal fires", async () => {
    const controller = new AbortController();
    const seen: number[] = [];
    const done = subscribe(
      async () => {
        // endless stream that never terminates the run
        const encoder = new TextEncoder();
        const body = new ReadableStream<Uint8Array>({
          start(streamController) {
            streamController.enqueue(encoder.encode(frame(1, "run_started")));
          },
        });
        return new Response(body, { status: 200 });
      },
      (event) => {
        seen.push(event.seq);
        controller.abort();
      },
      { retryDelayMs: 5, signal: controller.signal },
    );
    const delivered = await Promise.race([
      done,
      new Promise<number>((_, reject) => setTimeout(() => reject(new Error("did not stop")), 2000)),
    ]);
    expect(delivered).toBe(1);
    expect(seen).toEqual([1]);
  });
});
