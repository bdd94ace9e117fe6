"""Accepted-alpha pool: decorrelation admission, greedy importance ranking,
deployment records, and stream-vs-batch verification.

The pool is persisted as an append-only JSON-lines journal (one line per
admission / rejection / deployment / verification); state is rebuilt by
replaying the journal against the reference panel.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, ops
from .expr import canonical, features_used, parse, warmup_days
from .ops import AlphaMatrix
from .panel import PanelData, ReturnMatrix


class PoolError(Exception):
    pass


class NotAdmitted(PoolError):
    pass


class InsufficientHistory(PoolError):
    pass


def alpha_id(expr_text: str) -> str:
    """Content hash of the canonical expression text."""
    canon = canonical(parse(expr_text))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def values_fingerprint(am: AlphaMatrix) -> str:
    h = hashlib.sha256()
    h.update(am.values.tobytes())
    h.update(np.packbits(am.valid.ravel()).tobytes())
    return h.hexdigest()[:16]


@dataclass
class AlphaRecord:
    id: str
    expr_text: str              # canonical form
    created_at: float
    session_id: str | None = None
    fingerprint: str | None = None
    ic: metrics.ICSummary | None = None
    status: str = "candidate"   # candidate -> admitted -> deployed

    def to_json(self) -> dict:
        return {"id": self.id, "expr": self.expr_text,
                "created_at": self.created_at, "session_id": self.session_id,
                "fingerprint": self.fingerprint,
                "ic": self.ic.to_json() if self.ic else None,
                "status": self.status}


@dataclass
class DeployRecord:
    alpha_id: str
    dependencies: list[str]
    warmup_days: int
    deployed_at: float
    last_verification: dict | None = None

    def to_json(self) -> dict:
        return {"alpha_id": self.alpha_id, "dependencies": self.dependencies,
                "warmup_days": self.warmup_days, "deployed_at": self.deployed_at,
                "last_verification": self.last_verification}


def _flat_corr(a: AlphaMatrix, b: AlphaMatrix) -> float:
    sel = a.valid & b.valid
    if sel.sum() < 3:
        return 0.0
    x, y = a.values[sel], b.values[sel]
    xm, ym = x - x.mean(), y - y.mean()
    den = math.sqrt(float((xm * xm).sum()) * float((ym * ym).sum()))
    if den == 0.0:
        return 0.0
    return float((xm * ym).sum() / den)


def max_corr(candidate: AlphaMatrix,
             pool: list[tuple[str, AlphaMatrix]]) -> tuple[str | None, float]:
    """Highest |Pearson corr| of the candidate against the pool (flattened
    over jointly unmasked cells). Empty pool -> (None, 0)."""
    best_id, best = None, 0.0
    for pid, am in pool:
        c = abs(_flat_corr(candidate, am))
        if c > best:
            best_id, best = pid, c
    return best_id, best


class PoolStore:
    """Single-writer pool over a reference panel, journaled to JSON lines."""

    def __init__(self, panel: PanelData, journal_path: str | None = None,
                 rho_max: float = 0.85):
        self.panel = panel
        self.rho_max = rho_max
        self.journal_path = journal_path
        self.records: dict[str, AlphaRecord] = {}
        self.matrices: dict[str, AlphaMatrix] = {}
        self.deployments: dict[str, DeployRecord] = {}

    def _journal(self, event: dict) -> None:
        if self.journal_path is None:
            return
        with open(self.journal_path, "a") as f:
            f.write(json.dumps(event) + "\n")

    def evaluate(self, expr_text: str) -> AlphaMatrix:
        return ops.evaluate(parse(expr_text), self.panel)

    def make_record(self, expr_text: str, session_id: str | None = None,
                    fwd: ReturnMatrix | None = None) -> AlphaRecord:
        canon = canonical(parse(expr_text))
        rec = AlphaRecord(id=alpha_id(canon), expr_text=canon,
                          created_at=time.time(), session_id=session_id)
        am = self.evaluate(canon)
        rec.fingerprint = values_fingerprint(am)
        if fwd is not None:
            ic, ok = metrics.ic_series(am, fwd)
            rec.ic = metrics.ic_summary(ic, ok)
        return rec

    def admit(self, rec: AlphaRecord) -> dict:
        """Admit iff not a canonical-text duplicate and max |corr| <= rho_max."""
        if rec.id in self.records:
            return {"decision": "rejected", "reason": "duplicate",
                    "best_id": rec.id, "corr": 1.0}
        am = self.evaluate(rec.expr_text)
        best_id, corr = max_corr(am, list(self.matrices.items()))
        if corr > self.rho_max:
            self._journal({"event": "reject", "id": rec.id, "expr": rec.expr_text,
                           "best_id": best_id, "corr": corr})
            return {"decision": "rejected", "reason": "correlation",
                    "best_id": best_id, "corr": corr}
        rec.status = "admitted"
        self.records[rec.id] = rec
        self.matrices[rec.id] = am
        self._journal({"event": "admit", "record": rec.to_json()})
        return {"decision": "admitted", "best_id": best_id, "corr": corr}

    def deploy(self, alpha_id_: str) -> DeployRecord:
        rec = self.records.get(alpha_id_)
        if rec is None or rec.status not in ("admitted", "deployed"):
            raise NotAdmitted(alpha_id_)
        e = parse(rec.expr_text)
        dep = DeployRecord(alpha_id=alpha_id_,
                           dependencies=sorted(features_used(e)),
                           warmup_days=warmup_days(e),
                           deployed_at=time.time())
        rec.status = "deployed"
        self.deployments[alpha_id_] = dep
        self._journal({"event": "deploy", "deploy": dep.to_json()})
        return dep

    def verify_deployment(self, dep: DeployRecord, n_days: int = 30) -> dict:
        """Replay the last n_days through the stream and compare to batch."""
        rec = self.records[dep.alpha_id]
        e = parse(rec.expr_text)
        panel = self.panel
        start = panel.n_days - n_days - dep.warmup_days
        if start < 0:
            raise InsufficientHistory(
                f"need {n_days + dep.warmup_days} days, have {panel.n_days}")
        batch = ops.evaluate(e, panel)
        state = ops.stream_init(e, list(panel.instruments))
        max_dev = 0.0
        mask_match = True
        for t in range(start, panel.n_days):
            v, ok = ops.stream_push(state, panel.day_row(t), panel.sector)
            if t < panel.n_days - n_days:
                continue
            if not (ok == batch.valid[t]).all():
                mask_match = False
                continue
            if ok.any():
                max_dev = max(max_dev, float(np.abs(v[ok] - batch.values[t][ok]).max()))
        window = slice(panel.n_days - n_days, panel.n_days)
        mask_frac = 1.0 - float(batch.valid[window].mean())
        passed = mask_match and max_dev <= 1e-9 and mask_frac < 0.5
        report = {"alpha_id": dep.alpha_id, "max_deviation": max_dev,
                  "mask_match": mask_match, "mask_fraction": mask_frac,
                  "n_days": n_days, "passed": passed}
        dep.last_verification = report
        self._journal({"event": "verify", "report": report})
        return report

    def export_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "expr", "status", "mean_ic", "icir", "created_at"])
            for rec in sorted(self.records.values(), key=lambda r: r.created_at):
                w.writerow([rec.id, rec.expr_text, rec.status,
                            rec.ic.mean_ic if rec.ic else "",
                            rec.ic.icir if rec.ic and rec.ic.icir is not None else "",
                            rec.created_at])

    def pairwise_max_corr(self) -> float:
        ids = sorted(self.matrices)
        best = 0.0
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                best = max(best, abs(_flat_corr(self.matrices[a], self.matrices[b])))
        return best


def greedy_select(candidates: list[tuple[AlphaRecord, AlphaMatrix]],
                  fwd: ReturnMatrix, k: int,
                  method: str = "spearman") -> list[dict]:
    """Forward selection maximizing the mean IC of the equal-weight average of
    cross-sectionally scaled selected alphas; records marginal IC gains."""
    if k > len(candidates):
        raise PoolError("k exceeds number of candidates")

    def scaled(am: AlphaMatrix) -> AlphaMatrix:
        v = np.zeros_like(am.values)
        ok = np.zeros_like(am.valid)
        for t in range(v.shape[0]):
            v[t], ok[t] = ops.cs_scale_row(am.values[t], am.valid[t])
        return AlphaMatrix(values=v, valid=ok, expr_id=am.expr_id)

    scaled_by_id = {rec.id: scaled(am) for rec, am in candidates}

    def composite_ic(ids: list[str]) -> float:
        mats = [scaled_by_id[i] for i in ids]
        ok = np.logical_and.reduce([m.valid for m in mats])
        v = np.mean([m.values for m in mats], axis=0)
        comp = AlphaMatrix(values=np.where(ok, v, 0.0), valid=ok, expr_id="composite")
        ic, day_ok = metrics.ic_series(comp, fwd, method)
        return float(ic[day_ok].mean()) if day_ok.any() else float("-inf")

    chosen: list[str] = []
    result: list[dict] = []
    remaining = {rec.id: rec for rec, _ in candidates}
    prev = 0.0
    for _ in range(k):
        best = None
        for cid in sorted(remaining, key=lambda c: remaining[c].expr_text):
            score = composite_ic(chosen + [cid])
            if best is None or score > best[1] + 1e-15:
                best = (cid, score)
        cid, score = best
        result.append({"id": cid, "expr": remaining[cid].expr_text,
                       "composite_ic": score, "marginal_gain": score - prev})
        prev = score
        chosen.append(cid)
        del remaining[cid]
    return result
