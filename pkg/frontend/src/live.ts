/** Event-stream subscription: fetch-streaming SSE parser with reconnect.
 *
 * Hand-rolled rather than EventSource so the same code runs in the browser
 * and under node tests, and so reconnects can resync missed state from
 * GET /run (the opening `status` event of each connection carries the full
 * snapshot, including already-fired triggers).
 */

import type { ServerEvent } from "./types.js";

export interface LiveOptions {
  fetchImpl?: typeof fetch;
  /** called with each parsed event */
  onEvent: (e: ServerEvent, receivedAtMs: number) => void;
  onDisconnect?: () => void;
  onReconnect?: (attempt: number) => void;
  /** backoff schedule in ms; last entry repeats */
  backoffMs?: number[];
  now?: () => number;
}

export interface LiveHandle {
  close(): void;
  readonly closed: boolean;
}

/** Parse one SSE block (the lines between blank lines). */
export function parseSseBlock(block: string): ServerEvent | null {
  let kind: string | null = null;
  const dataLines: string[] = [];
  for (const line of block.split("\n")) {
    if (line.startsWith("event: ")) kind = line.slice(7).trim();
    else if (line.startsWith("data: ")) dataLines.push(line.slice(6));
  }
  if (!kind || dataLines.length === 0) return null;
  try {
    return { kind, data: JSON.parse(dataLines.join("\n")) } as ServerEvent;
  } catch {
    return null;
  }
}

export function subscribeEvents(url: string, opts: LiveOptions): LiveHandle {
  const fetchImpl = opts.fetchImpl ?? fetch;
  const backoff = opts.backoffMs ?? [250, 500, 1000, 2000, 5000];
  const now = opts.now ?? (() => Date.now());
  let closed = false;
  let attempt = 0;
  let controller: AbortController | null = null;

  async function loop(): Promise<void> {
    while (!closed) {
      controller = new AbortController();
      try {
        const r = await fetchImpl(url, {
          signal: controller.signal,
          headers: { Accept: "text/event-stream" },
        });
        if (!r.ok || !r.body) throw new Error(`stream status ${r.status}`);
        if (attempt > 0) opts.onReconnect?.(attempt);
        attempt = 0;
        const reader = r.body.getReader();
        const decoder = new TextDecoder();
        let buf = "";
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          buf += decoder.decode(value, { stream: true });
          let idx;
          while ((idx = buf.indexOf("\n\n")) >= 0) {
            const block = buf.slice(0, idx);
            buf = buf.slice(idx + 2);
            const event = parseSseBlock(block);
            if (event) opts.onEvent(event, now());
          }
        }
      } catch {
        /* fall through to reconnect */
      }
      if (closed) return;
      opts.onDisconnect?.();
      const wait = backoff[Math.min(attempt, backoff.length - 1)];
      attempt += 1;
      await new Promise((res) => setTimeout(res, wait));
    }
  }

  void loop();
  return {
    close() {
      closed = true;
      controller?.abort();
    },
    get closed() {
      return closed;
    },
  };
}
