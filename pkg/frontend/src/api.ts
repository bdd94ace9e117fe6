/** Thin client over the server HTTP API; the only network surface. */

import type { AlphaReport, SessionEvent, SessionSummary } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) throw new ApiError(resp.status, await resp.text());
  return resp.json() as Promise<T>;
}

export function listSessions(): Promise<SessionSummary[]> {
  return fetch("/sessions").then((r) => asJson<SessionSummary[]>(r));
}

export function createSession(title: string): Promise<SessionSummary> {
  return fetch("/sessions", {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify({ title }),
  }).then((r) => asJson<SessionSummary>(r));
}

export function postMessage(sessionId: string, text: string,
                            runConfig?: Record<string, unknown>): Promise<void> {
  return fetch(`/sessions/${sessionId}/messages`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify({ text, run_config: runConfig }),
  }).then((r) => asJson(r)).then(() => undefined);
}

export function fetchReport(alphaId: string): Promise<AlphaReport> {
  return fetch(`/alphas/${alphaId}/report`).then((r) => asJson<AlphaReport>(r));
}

export function deployAlpha(alphaId: string): Promise<Record<string, unknown>> {
  return fetch(`/alphas/${alphaId}/deploy`, { method: "POST" })
    .then((r) => asJson<Record<string, unknown>>(r));
}

export interface StreamHandle {
  close(): void;
}

/** Consume the session event stream with from_seq resume.
 *
 * The server ends the stream once the session settles to idle. EventSource
 * cannot tell a clean end from a dropped connection, so on error we ask the
 * caller (who tracks session state through the reducer) whether the run is
 * still in flight; if so we reconnect from the last delivered seq, and any
 * overlap is dropped by the reducer's seq dedup.
 */
export function streamEvents(
  sessionId: string,
  fromSeq: number,
  onEvent: (ev: SessionEvent) => void,
  shouldReconnect: () => boolean,
  onClose: () => void,
  onStatus: (connected: boolean) => void,
  retryMs = 500,
): StreamHandle {
  let lastSeq = fromSeq - 1;
  let closed = false;
  let source: EventSource | null = null;

  const open = () => {
    if (closed) return;
    source = new EventSource(`/sessions/${sessionId}/events?from_seq=${lastSeq + 1}`);
    source.onopen = () => onStatus(true);
    source.onmessage = (msg) => {
      const ev = JSON.parse(msg.data) as SessionEvent;
      lastSeq = Math.max(lastSeq, ev.seq);
      onEvent(ev);
    };
    source.onerror = () => {
      source?.close();
      if (closed) return;
      if (shouldReconnect()) {
        onStatus(false);
        setTimeout(open, retryMs);
      } else {
        closed = true;
        onStatus(true);
        onClose();
      }
    };
  };
  open();

  return {
    close() {
      closed = true;
      source?.close();
    },
  };
}
