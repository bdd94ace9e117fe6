"""Session-based orchestration: the mining pipeline behind an HTTP API.

Sessions are event-sourced: every user message, proposed alpha batch, search
progress tick, report, deployment, and error is an append-only journal line
(JSON, one file per session). In-memory state is always reconstructible by
replaying the journal.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from . import alphabot, gp, metrics, ops
from .expr import canonical, parse
from .panel import PanelData, forward_returns, mock_panel
from .pool import PoolStore, alpha_id

EVENT_KINDS = ("user_message", "system_message", "alphas_proposed",
               "search_started", "generation_progress", "search_finished",
               "report_ready", "alpha_deployed", "error")


class ServerError(Exception):
    pass


class SessionBusy(ServerError):
    pass


class UnknownSession(ServerError):
    pass


class UnknownAlpha(ServerError):
    pass


@dataclass
class SessionEvent:
    seq: int
    ts: float
    kind: str
    payload: dict

    def to_json(self) -> dict:
        return {"seq": self.seq, "ts": self.ts, "kind": self.kind,
                "payload": self.payload}


# state transitions driven purely by event kinds, so replay = state
_STATE_AFTER = {
    "user_message": "mining",
    "alphas_proposed": "searching",
    "search_started": "searching",
    "generation_progress": "searching",
    "search_finished": "reporting",
    "report_ready": "idle",
    "error": "idle",
}


@dataclass
class Session:
    id: str
    title: str
    created_at: float
    events: list[SessionEvent] = field(default_factory=list)
    state: str = "idle"

    def to_json(self) -> dict:
        return {"id": self.id, "title": self.title, "created_at": self.created_at,
                "state": self.state, "n_events": len(self.events)}


class SessionStore:
    """Journal-backed session registry; single writer per session."""

    def __init__(self, data_dir: str):
        self.data_dir = data_dir
        os.makedirs(os.path.join(data_dir, "sessions"), exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self.lock = threading.Lock()
        self._replay_all()

    def _journal_path(self, session_id: str) -> str:
        return os.path.join(self.data_dir, "sessions", f"{session_id}.jsonl")

    def _replay_all(self) -> None:
        sess_dir = os.path.join(self.data_dir, "sessions")
        for fn in sorted(os.listdir(sess_dir)):
            if not fn.endswith(".jsonl"):
                continue
            with open(os.path.join(sess_dir, fn)) as f:
                lines = [json.loads(line) for line in f if line.strip()]
            if not lines:
                continue
            head = lines[0]
            sess = Session(id=head["session"]["id"], title=head["session"]["title"],
                           created_at=head["session"]["created_at"])
            for line in lines[1:]:
                ev = SessionEvent(**line["event"])
                sess.events.append(ev)
                sess.state = _STATE_AFTER.get(ev.kind, sess.state)
            # a crashed run can leave a non-idle replayed state; recover to idle
            if sess.state != "idle":
                sess.state = "idle"
            self.sessions[sess.id] = sess

    def create(self, title: str) -> Session:
        with self.lock:
            sess = Session(id=uuid.uuid4().hex[:12], title=title,
                           created_at=time.time())
            self.sessions[sess.id] = sess
            with open(self._journal_path(sess.id), "w") as f:
                f.write(json.dumps({"session": {
                    "id": sess.id, "title": sess.title,
                    "created_at": sess.created_at}}) + "\n")
            return sess

    def get(self, session_id: str) -> Session:
        sess = self.sessions.get(session_id)
        if sess is None:
            raise UnknownSession(session_id)
        return sess

    def append(self, session_id: str, kind: str, payload: dict) -> SessionEvent:
        assert kind in EVENT_KINDS, kind
        with self.lock:
            sess = self.get(session_id)
            ev = SessionEvent(seq=len(sess.events), ts=time.time(),
                              kind=kind, payload=payload)
            sess.events.append(ev)
            sess.state = _STATE_AFTER.get(kind, sess.state)
            with open(self._journal_path(session_id), "a") as f:
                f.write(json.dumps({"event": ev.to_json()}) + "\n")
            return ev


class Engine:
    """Owns the panel, provider, pool, and session store; drives the
    mine -> search -> report pipeline per posted user message."""

    def __init__(self, panel: PanelData, provider: alphabot.LLMProvider,
                 data_dir: str, horizon: int = 1,
                 library: alphabot.KnowledgeLibrary | None = None):
        self.panel = panel
        self.provider = provider
        self.horizon = horizon
        self.fwd = forward_returns(panel, horizon)
        self.library = library
        self.sessions = SessionStore(data_dir)
        self.mock = mock_panel(120, 10, 1)
        self.pool = PoolStore(panel, os.path.join(data_dir, "pool.jsonl"))
        self.alphas: dict[str, dict] = {}   # alpha_id -> {expr, session_id}
        self._report_cache: dict[str, str] = {}
        self.active_searches = 0
        self._threads: list[threading.Thread] = []

    # -- pipeline ----------------------------------------------------------

    def post_message(self, session_id: str, text: str,
                     run_config: dict | None = None, wait: bool = False) -> None:
        sess = self.sessions.get(session_id)
        if sess.state != "idle":
            raise SessionBusy(session_id)
        sess.state = "mining"
        self.sessions.append(session_id, "user_message", {"text": text})
        if wait:
            self._run_pipeline(session_id, text, run_config or {})
        else:
            t = threading.Thread(target=self._run_pipeline,
                                 args=(session_id, text, run_config or {}),
                                 daemon=True)
            self._threads.append(t)
            t.start()

    def _run_pipeline(self, session_id: str, text: str, run_config: dict) -> None:
        try:
            blocks, _ = alphabot.mine_seed_alphas(
                text, self.provider, self.library, self.mock,
                alphabot.MineConfig(max_rounds=int(run_config.get("max_rounds", 3))))
            self.sessions.append(session_id, "alphas_proposed", {
                "alphas": [{"name": b.name, "expression": canonical(parse(b.expression)),
                            "description": b.description} for b in blocks]})
            seeds = [parse(b.expression) for b in blocks]
            cfg = gp.GPConfig.from_dict(run_config.get("gp", {}))
            self.sessions.append(session_id, "search_started",
                                 {"config": {"population_size": cfg.population_size,
                                             "generations": cfg.generations,
                                             "rng_seed": cfg.rng_seed}})
            self.active_searches += 1
            try:
                sink = lambda ev: self.sessions.append(session_id,
                                                       "generation_progress", ev)
                result = gp.run_search(seeds, self.panel, self.fwd, cfg,
                                       progress_sink=sink, mock=self.mock)
            finally:
                self.active_searches -= 1
            self.sessions.append(session_id, "search_finished",
                                 {"stop_reason": result.stop_reason,
                                  "n_elites": len(result.elites)})
            ids = []
            for ind in result.elites:
                canon = canonical(ind.expr)
                rec = self.pool.make_record(canon, session_id, self.fwd)
                decision = self.pool.admit(rec)
                aid = rec.id
                self.alphas[aid] = {"expr": canon, "session_id": session_id,
                                    "val_ic": ind.val_fitness,
                                    "admitted": decision["decision"] == "admitted"}
                if decision["decision"] == "admitted":
                    ids.append(aid)
            self.sessions.append(session_id, "report_ready", {"alpha_ids": ids})
        except Exception as exc:  # errors become events, never crash the session
            self.sessions.append(session_id, "error",
                                 {"error": type(exc).__name__, "message": str(exc)})

    # -- reports -----------------------------------------------------------

    def get_report(self, aid: str) -> str:
        """Aggregated report JSON (bytes cached for determinism)."""
        if aid in self._report_cache:
            return self._report_cache[aid]
        info = self.alphas.get(aid)
        if info is None:
            rec = self.pool.records.get(aid)
            if rec is None:
                raise UnknownAlpha(aid)
            info = {"expr": rec.expr_text, "session_id": rec.session_id}
        e = parse(info["expr"])
        am = ops.evaluate(e, self.panel)
        ic, ok = metrics.ic_series(am, self.fwd)
        summary = metrics.ic_summary(ic, ok)
        bt = metrics.backtest(am, self.panel, horizon=self.horizon)
        decay = metrics.signal_decay(am, self.fwd, K=min(10, self.panel.n_days // 2 - 1))
        hist = metrics.ic_histogram(ic, ok)
        try:
            explanation = alphabot.explain(e, summary, self.provider)
        except alphabot.ProviderError as exc:
            explanation = f"(explanation unavailable: {exc})"
        report = json.dumps({
            "alpha_id": aid,
            "expr": info["expr"],
            "ic_summary": summary.to_json(),
            "backtest": bt.to_json(),
            "decay": decay.to_json(),
            "ic_histogram": hist,
            "explanation": explanation,
        }, sort_keys=True)
        self._report_cache[aid] = report
        return report

    def deploy_alpha(self, aid: str) -> dict:
        rec = self.pool.records.get(aid)
        if rec is None:
            raise UnknownAlpha(aid)
        dep = self.pool.deploy(aid)
        n_verify = min(30, max(1, self.panel.n_days - dep.warmup_days - 1))
        report = self.pool.verify_deployment(dep, n_days=n_verify)
        session_id = rec.session_id
        if session_id and session_id in self.sessions.sessions:
            self.sessions.append(session_id, "alpha_deployed",
                                 {"alpha_id": aid, "verification": report})
        return {"deploy": dep.to_json(), "verification": report}

    def health(self) -> dict:
        return {"status": "ok",
                "active_searches": self.active_searches,
                "queue_depth": sum(t.is_alive() for t in self._threads),
                "n_sessions": len(self.sessions.sessions),
                "n_alphas": len(self.pool.records)}


# -- HTTP layer ------------------------------------------------------------


def create_app(engine: Engine, static_dir: str | None = None):
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import JSONResponse, Response, StreamingResponse

    app = FastAPI(title="alpha-forge")

    @app.get("/healthz")
    def healthz():
        return engine.health()

    @app.post("/sessions")
    def create_session(body: dict):
        sess = engine.sessions.create(body.get("title", "untitled"))
        return sess.to_json()

    @app.get("/sessions")
    def list_sessions():
        return [s.to_json() for s in
                sorted(engine.sessions.sessions.values(),
                       key=lambda s: s.created_at, reverse=True)]

    @app.post("/sessions/{session_id}/messages")
    def post_message(session_id: str, body: dict):
        try:
            engine.post_message(session_id, body.get("text", ""),
                                body.get("run_config"))
        except SessionBusy:
            raise HTTPException(409, "session busy")
        except UnknownSession:
            raise HTTPException(404, "unknown session")
        return {"accepted": True}

    @app.get("/sessions/{session_id}/events")
    def stream_events(session_id: str, from_seq: int = 0):
        try:
            engine.sessions.get(session_id)
        except UnknownSession:
            raise HTTPException(404, "unknown session")

        def gen():
            next_seq = from_seq
            idle_polls = 0
            while True:
                sess = engine.sessions.get(session_id)
                events = sess.events[next_seq:]
                for ev in events:
                    yield f"id: {ev.seq}\ndata: {json.dumps(ev.to_json())}\n\n"
                    next_seq = ev.seq + 1
                if sess.state == "idle" and next_seq >= len(sess.events):
                    idle_polls += 1
                    if idle_polls >= 3:
                        return
                else:
                    idle_polls = 0
                time.sleep(0.05)

        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.get("/alphas/{aid}/report")
    def get_report(aid: str):
        try:
            return Response(engine.get_report(aid), media_type="application/json")
        except UnknownAlpha:
            raise HTTPException(404, "unknown alpha")

    @app.post("/alphas/{aid}/deploy")
    def deploy(aid: str):
        from .pool import NotAdmitted
        try:
            return engine.deploy_alpha(aid)
        except UnknownAlpha:
            raise HTTPException(404, "unknown alpha")
        except NotAdmitted:
            raise HTTPException(409, "alpha not admitted")

    if static_dir and os.path.isdir(static_dir):
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
