"""Expression evaluation over panels: batch (vectorized) and streaming.

Both paths share the same per-row cross-sectional kernels; time-series nodes
in the stream recompute from a ring buffer each push, so stream output equals
batch output row-for-row within floating-point reduction-order noise (1e-9).

Mask discipline: an output cell is masked whenever any input cell in the
operator's dependency window is masked. Division by zero masks the cell;
log/sqrt domain violations mask the cell and are additionally counted as
domain errors (they make an alpha semantically invalid).
"""

from __future__ import annotations

import csv
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .expr import (Binary, Const, CsOp, Expr, Feature, GroupOp, TsOp, Unary,
                   canonical)
from .panel import FIELDS, PanelData

ALPHA_MAGIC = b"AFAM1"


class OpsError(Exception):
    pass


class SchemaMismatch(OpsError):
    pass


@dataclass
class AlphaMatrix:
    """Day x instrument evaluation result of one expression."""

    values: np.ndarray
    valid: np.ndarray
    expr_id: str
    n_domain_errors: int = 0

    def export_csv(self, path: str, dates, instruments) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["date", "instrument", "value", "valid"])
            for t, d in enumerate(dates):
                for i, inst in enumerate(instruments):
                    w.writerow([d.isoformat(), inst,
                                repr(float(self.values[t, i])),
                                int(self.valid[t, i])])

    def save(self, path: str) -> None:
        n_d, n_i = self.values.shape
        with open(path, "wb") as f:
            f.write(ALPHA_MAGIC)
            raw = self.expr_id.encode()
            f.write(struct.pack("<III", n_d, n_i, len(raw)))
            f.write(raw)
            f.write(self.values.astype("<f8").tobytes())
            f.write(np.packbits(self.valid.ravel()).tobytes())

    @classmethod
    def load(cls, path: str) -> "AlphaMatrix":
        with open(path, "rb") as f:
            if f.read(5) != ALPHA_MAGIC:
                raise OpsError("not an alpha matrix file")
            n_d, n_i, ln = struct.unpack("<III", f.read(12))
            expr_id = f.read(ln).decode()
            values = np.frombuffer(f.read(8 * n_d * n_i), dtype="<f8").reshape(n_d, n_i).copy()
            bits = np.unpackbits(np.frombuffer(f.read((n_d * n_i + 7) // 8), dtype=np.uint8))
            valid = bits[: n_d * n_i].astype(bool).reshape(n_d, n_i)
        return cls(values=values, valid=valid, expr_id=expr_id)


# -- shared row kernels (used by batch loops and the stream) ----------------


def rank_rows(vals: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average-tie ranks (1-based) per row over the unmasked cells, vectorized.

    Masked cells get rank 0. Returns (ranks, n_valid_per_row). Produces the
    same fp values as rank_1d on each row's compacted valid subset.
    """
    n_d, n_i = vals.shape
    work = np.where(valid, vals, np.inf)  # masked sorts last, never ties
    order = np.argsort(work, axis=1, kind="stable")
    sw = np.take_along_axis(work, order, axis=1)
    cols = np.broadcast_to(np.arange(n_i), (n_d, n_i))
    boundary = np.empty((n_d, n_i), dtype=bool)
    boundary[:, 0] = True
    boundary[:, 1:] = sw[:, 1:] != sw[:, :-1]
    start = np.maximum.accumulate(np.where(boundary, cols, 0), axis=1)
    end_b = np.empty((n_d, n_i), dtype=bool)
    end_b[:, -1] = True
    end_b[:, :-1] = boundary[:, 1:]
    end = np.flip(np.minimum.accumulate(
        np.flip(np.where(end_b, cols, n_i - 1), axis=1), axis=1), axis=1)
    avg_sorted = start + (end - start + 1 + 1) / 2.0  # == start + (count+1)/2
    ranks = np.zeros((n_d, n_i))
    np.put_along_axis(ranks, order, avg_sorted, axis=1)
    ranks[~valid] = 0.0
    return ranks, valid.sum(axis=1)


def rank_1d(x: np.ndarray) -> np.ndarray:
    """Average-tie ranks, 1-based."""
    n = x.shape[0]
    order = np.argsort(x, kind="stable")
    sx = x[order]
    boundary = np.empty(n, dtype=bool)
    boundary[0] = True
    boundary[1:] = sx[1:] != sx[:-1]
    starts = np.flatnonzero(boundary)
    group = np.cumsum(boundary) - 1
    counts = np.diff(np.append(starts, n))
    avg = starts + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(n)
    ranks[order] = avg[group]
    return ranks


def cs_rank_row(vals: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros_like(vals)
    ok = valid.copy()
    n = int(valid.sum())
    if n == 0:
        return out, ok
    if n == 1:
        out[valid] = 0.5
        return out, ok
    r = rank_1d(vals[valid])
    out[valid] = (r - 1.0) / (n - 1.0)
    return out, ok


def cs_scale_row(vals: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros_like(vals)
    ok = valid.copy()
    if not valid.any():
        return out, ok
    v = vals[valid]
    if np.ptp(v) == 0.0:
        return out, np.zeros_like(valid)
    sd = v.std()
    out[valid] = (v - v.mean()) / sd
    return out, ok


def cs_transform(op: str, vals: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if op == "cs_rank":
        return cs_rank_row(vals, valid)
    if op == "cs_scale":
        return cs_scale_row(vals, valid)
    raise OpsError(f"unknown cross-sectional op {op}")


def group_neutralize_row(vals: np.ndarray, valid: np.ndarray,
                         group_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros_like(vals)
    ok = valid.copy()
    for g in np.unique(group_ids):
        sel = (group_ids == g) & valid
        if sel.any():
            out[sel] = vals[sel] - vals[sel].mean()
    return out, ok


def cs_rank_batch(vals: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All-days cs_rank; fp-identical to cs_rank_row applied per day."""
    ranks, n = rank_rows(vals, valid)
    out = np.zeros_like(vals)
    denom = np.maximum(n - 1, 1)[:, None]
    out = np.where(valid, (ranks - 1.0) / denom, 0.0)
    single = n == 1
    if single.any():
        out[single] = np.where(valid[single], 0.5, 0.0)
    return out, valid.copy()


def cs_scale_batch(vals: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = valid.sum(axis=1)
    safe_n = np.maximum(n, 1)[:, None]
    v = np.where(valid, vals, 0.0)
    mean = v.sum(axis=1, keepdims=True) / safe_n
    var = (np.where(valid, (vals - mean) ** 2, 0.0)).sum(axis=1, keepdims=True) / safe_n
    mx = np.where(valid, vals, -np.inf).max(axis=1)
    mn = np.where(valid, vals, np.inf).min(axis=1)
    degenerate = (n == 0) | (mx == mn)
    sd = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (vals - mean) / sd
    ok = valid & ~degenerate[:, None]
    return np.where(ok, out, 0.0), ok


def group_neutralize_batch(vals: np.ndarray, valid: np.ndarray,
                           group_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros_like(vals)
    for g in np.unique(group_ids):
        cols = group_ids == g
        sel = valid[:, cols]
        v = np.where(sel, vals[:, cols], 0.0)
        n = np.maximum(sel.sum(axis=1, keepdims=True), 1)
        out[:, cols] = np.where(sel, vals[:, cols] - v.sum(axis=1, keepdims=True) / n, 0.0)
    return out, valid.copy()


def group_ids_from_sectors(sectors) -> np.ndarray:
    table = {s: i for i, s in enumerate(dict.fromkeys(sectors))}
    return np.array([table[s] for s in sectors], dtype=np.intp)


# -- windowed time-series kernels ------------------------------------------
# All operate on a (w, n) stacked window; used by both the batch strided path
# and the streaming ring buffer so semantics coincide.


def _window_stat(op: str, win: np.ndarray, win2: np.ndarray | None):
    """win has window length on the LAST axis. Returns (vals, extra_invalid)."""
    if op == "ts_delay":
        return win[..., 0], None
    if op == "ts_delta":
        return win[..., -1] - win[..., 0], None
    if op == "ts_mean":
        return win.mean(axis=-1), None
    if op == "ts_std":
        return win.std(axis=-1, ddof=1), None
    if op == "ts_min":
        return win.min(axis=-1), None
    if op == "ts_max":
        return win.max(axis=-1), None
    if op == "ts_rank":
        last = win[..., -1:]
        less = (win < last).sum(axis=-1)
        equal = (win == last).sum(axis=-1)
        rank = less + (equal + 1) / 2.0  # 1-based average-tie rank of today
        return (rank - 1.0) / (win.shape[-1] - 1.0), None
    if op == "ts_corr":
        assert win2 is not None
        degenerate = (np.ptp(win, axis=-1) == 0.0) | (np.ptp(win2, axis=-1) == 0.0)
        xm = win - win.mean(axis=-1, keepdims=True)
        ym = win2 - win2.mean(axis=-1, keepdims=True)
        num = (xm * ym).sum(axis=-1)
        den = np.sqrt((xm * xm).sum(axis=-1) * (ym * ym).sum(axis=-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
        corr = np.clip(corr, -1.0, 1.0)
        return corr, degenerate
    raise OpsError(f"unknown ts op {op}")


def _ts_batch(op: str, w: int, vals: np.ndarray, ok: np.ndarray,
              vals2: np.ndarray | None = None, ok2: np.ndarray | None = None):
    n_d, n_i = vals.shape
    out = np.zeros((n_d, n_i))
    out_ok = np.zeros((n_d, n_i), dtype=bool)
    if n_d < w:
        return out, out_ok
    win = np.lib.stride_tricks.sliding_window_view(vals, w, axis=0)
    win_ok = np.lib.stride_tricks.sliding_window_view(ok, w, axis=0).all(axis=-1)
    win2 = None
    if vals2 is not None:
        win2 = np.lib.stride_tricks.sliding_window_view(vals2, w, axis=0)
        win_ok &= np.lib.stride_tricks.sliding_window_view(ok2, w, axis=0).all(axis=-1)
    stat, extra_invalid = _window_stat(op, win, win2)
    if extra_invalid is not None:
        win_ok &= ~extra_invalid
    out[w - 1:] = np.where(win_ok, stat, 0.0)
    out_ok[w - 1:] = win_ok
    return out, out_ok


def ts_corr_kernel(x: np.ndarray, x_ok: np.ndarray, y: np.ndarray,
                   y_ok: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Rolling Pearson correlation over trailing windows of two masked series."""
    v, ok = _ts_batch("ts_corr", window, x.reshape(-1, 1), x_ok.reshape(-1, 1),
                      y.reshape(-1, 1), y_ok.reshape(-1, 1))
    return v.ravel(), ok.ravel()


# -- batch evaluation ------------------------------------------------------


def _eval_node(e: Expr, panel: PanelData, group_ids: np.ndarray, errs: list):
    if isinstance(e, Const):
        shape = (panel.n_days, panel.n_inst)
        return np.full(shape, e.value), np.ones(shape, dtype=bool)
    if isinstance(e, Feature):
        v, ok = panel.field(e.name)
        return v.copy(), ok.copy()
    if isinstance(e, Unary):
        v, ok = _eval_node(e.child, panel, group_ids, errs)
        return _unary_apply(e.op, v, ok, errs)
    if isinstance(e, Binary):
        lv, lok = _eval_node(e.left, panel, group_ids, errs)
        rv, rok = _eval_node(e.right, panel, group_ids, errs)
        return _binary_apply(e.op, lv, lok, rv, rok)
    if isinstance(e, TsOp):
        v, ok = _eval_node(e.child, panel, group_ids, errs)
        if e.child2 is not None:
            v2, ok2 = _eval_node(e.child2, panel, group_ids, errs)
            return _ts_batch(e.op, e.window, v, ok, v2, ok2)
        return _ts_batch(e.op, e.window, v, ok)
    if isinstance(e, CsOp):
        v, ok = _eval_node(e.child, panel, group_ids, errs)
        if e.op == "cs_rank":
            return cs_rank_batch(v, ok)
        return cs_scale_batch(v, ok)
    if isinstance(e, GroupOp):
        v, ok = _eval_node(e.child, panel, group_ids, errs)
        return group_neutralize_batch(v, ok, group_ids)
    raise OpsError(f"not an Expr node: {e!r}")


def _unary_apply(op: str, v: np.ndarray, ok: np.ndarray, errs: list):
    if op == "neg":
        return -v, ok
    if op == "abs":
        return np.abs(v), ok
    if op == "log":
        bad = ok & (v <= 0.0)
        if bad.any():
            errs.append(("log", int(bad.sum())))
        ok = ok & ~bad
        out = np.zeros_like(v)
        out[ok] = np.log(v[ok])
        return out, ok
    if op == "sqrt":
        bad = ok & (v < 0.0)
        if bad.any():
            errs.append(("sqrt", int(bad.sum())))
        ok = ok & ~bad
        out = np.zeros_like(v)
        out[ok] = np.sqrt(v[ok])
        return out, ok
    raise OpsError(f"unknown unary op {op}")


def _binary_apply(op: str, lv, lok, rv, rok):
    ok = lok & rok
    if op == "add":
        out = lv + rv
    elif op == "sub":
        out = lv - rv
    elif op == "mul":
        out = lv * rv
    elif op == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = lv / rv
        ok = ok & np.isfinite(out)  # division by zero masks, never errors
    else:
        raise OpsError(f"unknown binary op {op}")
    out = np.where(ok, out, 0.0)
    ok = ok & np.isfinite(out)
    return out, ok


def evaluate(expr: Expr, panel: PanelData) -> AlphaMatrix:
    """Bottom-up vectorized evaluation of an expression over a panel."""
    group_ids = group_ids_from_sectors(panel.sector)
    errs: list = []
    v, ok = _eval_node(expr, panel, group_ids, errs)
    v = np.where(ok, v, 0.0)
    return AlphaMatrix(values=v, valid=ok, expr_id=canonical(expr),
                       n_domain_errors=sum(n for _, n in errs))


# -- streaming evaluation --------------------------------------------------


class _SNode:
    def push(self, row, group_ids, errs):
        raise NotImplementedError


class _SConst(_SNode):
    def __init__(self, value, n):
        self.value, self.n = value, n

    def push(self, row, group_ids, errs):
        return np.full(self.n, self.value), np.ones(self.n, dtype=bool)


class _SFeature(_SNode):
    def __init__(self, name):
        self.name = name

    def push(self, row, group_ids, errs):
        v, ok = row[self.name]
        return v.copy(), ok.copy()


class _SUnary(_SNode):
    def __init__(self, op, child):
        self.op, self.child = op, child

    def push(self, row, group_ids, errs):
        v, ok = self.child.push(row, group_ids, errs)
        return _unary_apply(self.op, v, ok, errs)


class _SBinary(_SNode):
    def __init__(self, op, left, right):
        self.op, self.left, self.right = op, left, right

    def push(self, row, group_ids, errs):
        lv, lok = self.left.push(row, group_ids, errs)
        rv, rok = self.right.push(row, group_ids, errs)
        return _binary_apply(self.op, lv, lok, rv, rok)


class _SCs(_SNode):
    def __init__(self, op, child):
        self.op, self.child = op, child

    def push(self, row, group_ids, errs):
        v, ok = self.child.push(row, group_ids, errs)
        return cs_transform(self.op, v, ok)


class _SGroup(_SNode):
    def __init__(self, child):
        self.child = child

    def push(self, row, group_ids, errs):
        v, ok = self.child.push(row, group_ids, errs)
        return group_neutralize_row(v, ok, group_ids)


class _STs(_SNode):
    """Ring-buffered window op: recomputed from buffer contents every push.

    O(window) per push; windows are capped at 250 so this stays cheap and the
    result cannot drift from the batch computation over long streams.
    """

    def __init__(self, op, window, child, child2=None):
        self.op, self.window = op, window
        self.child, self.child2 = child, child2
        self.buf: deque = deque(maxlen=window)
        self.buf2: deque = deque(maxlen=window)

    def push(self, row, group_ids, errs):
        v, ok = self.child.push(row, group_ids, errs)
        self.buf.append((v, ok))
        win2 = None
        if self.child2 is not None:
            v2, ok2 = self.child2.push(row, group_ids, errs)
            self.buf2.append((v2, ok2))
        n = v.shape[0]
        if len(self.buf) < self.window:
            return np.zeros(n), np.zeros(n, dtype=bool)
        win = np.stack([b[0] for b in self.buf], axis=-1)
        ok_all = np.logical_and.reduce([b[1] for b in self.buf])
        if self.child2 is not None:
            win2 = np.stack([b[0] for b in self.buf2], axis=-1)
            ok_all &= np.logical_and.reduce([b[1] for b in self.buf2])
        stat, extra_invalid = _window_stat(self.op, win, win2)
        if extra_invalid is not None:
            ok_all &= ~extra_invalid
        return np.where(ok_all, stat, 0.0), ok_all


@dataclass
class StreamState:
    """Single-owner mutable stream for one expression."""

    root: _SNode
    instruments: list
    expr_id: str
    n_pushed: int = 0
    n_domain_errors: int = 0


def _build_stream(e: Expr, n: int) -> _SNode:
    if isinstance(e, Const):
        return _SConst(e.value, n)
    if isinstance(e, Feature):
        return _SFeature(e.name)
    if isinstance(e, Unary):
        return _SUnary(e.op, _build_stream(e.child, n))
    if isinstance(e, Binary):
        return _SBinary(e.op, _build_stream(e.left, n), _build_stream(e.right, n))
    if isinstance(e, TsOp):
        c2 = _build_stream(e.child2, n) if e.child2 is not None else None
        return _STs(e.op, e.window, _build_stream(e.child, n), c2)
    if isinstance(e, CsOp):
        return _SCs(e.op, _build_stream(e.child, n))
    if isinstance(e, GroupOp):
        return _SGroup(_build_stream(e.child, n))
    raise OpsError(f"not an Expr node: {e!r}")


def stream_init(expr: Expr, instruments: list) -> StreamState:
    return StreamState(root=_build_stream(expr, len(instruments)),
                       instruments=list(instruments), expr_id=canonical(expr))


def stream_push(state: StreamState, day_row: dict, sectors) -> tuple[np.ndarray, np.ndarray]:
    """Push one day of market data; returns the alpha row for that day.

    After pushing days 0..t the returned row equals row t of batch evaluate
    on the panel truncated at day t.
    """
    n = len(state.instruments)
    for name in FIELDS:
        if name not in day_row:
            raise SchemaMismatch(f"missing field {name}")
        v, ok = day_row[name]
        if v.shape != (n,) or ok.shape != (n,):
            raise SchemaMismatch(f"field {name} has shape {v.shape}, want ({n},)")
    if len(sectors) != n:
        raise SchemaMismatch("sectors length mismatch")
    group_ids = group_ids_from_sectors(sectors)
    errs: list = []
    v, ok = state.root.push(day_row, group_ids, errs)
    state.n_pushed += 1
    state.n_domain_errors += sum(cnt for _, cnt in errs)
    return v, ok
