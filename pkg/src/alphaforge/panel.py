"""Market panel data: load, generate, align, and derive forward returns.

A panel is a day x instrument matrix per field with an explicit validity
mask (True = usable value). Missing data is never encoded as NaN sentinels;
every consumer is expected to propagate the mask.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

FIELDS = ("open", "high", "low", "close", "volume", "vwap")

CACHE_MAGIC = b"AFPN1"


class PanelError(Exception):
    pass


class MissingColumn(PanelError):
    pass


class DuplicateKey(PanelError):
    pass


class HorizonTooLarge(PanelError):
    pass


class InvalidSpec(PanelError):
    pass


class TooManyRejects(PanelError):
    pass


@dataclass(frozen=True)
class PanelData:
    """Immutable timestamp-aligned universe of market fields."""

    dates: tuple[date, ...]
    instruments: tuple[str, ...]
    values: dict[str, np.ndarray]  # field -> (n_days, n_inst) float64
    valid: dict[str, np.ndarray]   # field -> (n_days, n_inst) bool
    sector: tuple[str, ...]        # per instrument

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_inst(self) -> int:
        return len(self.instruments)

    def field(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.values[name], self.valid[name]

    def truncate(self, n_days: int) -> "PanelData":
        """Panel restricted to the first n_days rows."""
        return PanelData(
            dates=self.dates[:n_days],
            instruments=self.instruments,
            values={k: v[:n_days] for k, v in self.values.items()},
            valid={k: v[:n_days] for k, v in self.valid.items()},
            sector=self.sector,
        )

    def day_row(self, t: int) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Per-field (values, valid) slices for day t, for streaming pushes."""
        return {k: (self.values[k][t], self.valid[k][t]) for k in FIELDS}

    def check_invariants(self) -> None:
        n_d, n_i = self.n_days, self.n_inst
        if len(self.sector) != n_i:
            raise PanelError("sector must cover every instrument")
        for name in FIELDS:
            if self.values[name].shape != (n_d, n_i) or self.valid[name].shape != (n_d, n_i):
                raise PanelError(f"field {name} shape mismatch")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise PanelError("dates must be strictly increasing")
        ok = np.ones((n_d, n_i), dtype=bool)
        for name in FIELDS:
            ok &= self.valid[name]
        o, h, lo, c, v = (self.values[k] for k in ("open", "high", "low", "close", "volume"))
        if ok.any():
            if not (h[ok] >= np.maximum(o, c)[ok]).all():
                raise PanelError("high < max(open, close)")
            if not (lo[ok] <= np.minimum(o, c)[ok]).all():
                raise PanelError("low > min(open, close)")
            if not (lo[ok] > 0).all():
                raise PanelError("nonpositive low")
            if not (v[ok] >= 0).all():
                raise PanelError("negative volume")

    # -- binary cache ------------------------------------------------------

    def save(self, path: str) -> None:
        """Little-endian cache: magic, dims, date/instrument/sector tables,
        then per field row-major float64 values followed by a packed mask bitmap."""
        with open(path, "wb") as f:
            f.write(CACHE_MAGIC)
            f.write(struct.pack("<II", self.n_days, self.n_inst))
            for table in (
                "\n".join(d.isoformat() for d in self.dates),
                "\n".join(self.instruments),
                "\n".join(self.sector),
            ):
                raw = table.encode()
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
            for name in FIELDS:
                f.write(self.values[name].astype("<f8").tobytes())
                f.write(np.packbits(self.valid[name].ravel()).tobytes())

    @classmethod
    def load(cls, path: str) -> "PanelData":
        with open(path, "rb") as f:
            if f.read(5) != CACHE_MAGIC:
                raise PanelError("not a panel cache file")
            n_d, n_i = struct.unpack("<II", f.read(8))
            tables = []
            for _ in range(3):
                (ln,) = struct.unpack("<I", f.read(4))
                tables.append(f.read(ln).decode())
            dates = tuple(date.fromisoformat(s) for s in tables[0].split("\n")) if tables[0] else ()
            instruments = tuple(tables[1].split("\n")) if tables[1] else ()
            sector = tuple(tables[2].split("\n")) if tables[2] else ()
            values, valid = {}, {}
            n_cells = n_d * n_i
            n_maskbytes = (n_cells + 7) // 8
            for name in FIELDS:
                values[name] = np.frombuffer(f.read(8 * n_cells), dtype="<f8").reshape(n_d, n_i).copy()
                bits = np.unpackbits(np.frombuffer(f.read(n_maskbytes), dtype=np.uint8))[:n_cells]
                valid[name] = bits.astype(bool).reshape(n_d, n_i)
        return cls(dates=dates, instruments=instruments, values=values, valid=valid, sector=sector)


@dataclass(frozen=True)
class ReturnMatrix:
    """Forward close-to-close simple returns; the only future-looking object.

    Expressions can never reference this: it exists solely as the fitness and
    backtest target.
    """

    horizon: int
    values: np.ndarray
    valid: np.ndarray


def forward_returns(panel: PanelData, horizon: int) -> ReturnMatrix:
    """Entry (t, i) = close(t+horizon, i) / close(t, i) - 1."""
    if horizon <= 0 or horizon >= panel.n_days:
        raise HorizonTooLarge(f"horizon {horizon} vs {panel.n_days} days")
    c, cv = panel.field("close")
    n_d, n_i = c.shape
    out = np.zeros((n_d, n_i))
    ok = np.zeros((n_d, n_i), dtype=bool)
    ok[: n_d - horizon] = cv[: n_d - horizon] & cv[horizon:]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = c[horizon:] / c[: n_d - horizon] - 1.0
    out[: n_d - horizon][ok[: n_d - horizon]] = r[ok[: n_d - horizon]]
    ok &= np.isfinite(out)
    out[~ok] = 0.0
    return ReturnMatrix(horizon=horizon, values=out, valid=ok)


# -- CSV ingestion ---------------------------------------------------------

_CSV_COLUMNS = ("date", "instrument") + FIELDS + ("sector",)


def ingest_csv(path: str, schema: dict[str, str] | None = None,
               rejects_path: str | None = None) -> PanelData:
    """Build a panel from long-format CSV rows keyed by (date, instrument).

    `schema` remaps canonical column names to the file's header names.
    Union alignment: the panel covers every date and instrument seen anywhere;
    absent pairs are masked. Rows violating OHLC ordering (or otherwise
    malformed) go to the rejects report; more than 50% rejects is fatal.
    """
    schema = schema or {}
    colmap = {canon: schema.get(canon, canon) for canon in _CSV_COLUMNS}
    rows: dict[tuple[date, str], dict[str, float]] = {}
    sectors: dict[str, str] = {}
    rejects: list[tuple[int, str, str]] = []
    total = 0
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for canon, col in colmap.items():
            if col not in header:
                raise MissingColumn(col)
        for lineno, raw in enumerate(reader, start=2):
            total += 1
            try:
                d = date.fromisoformat(raw[colmap["date"]].strip())
                inst = raw[colmap["instrument"]].strip()
                vals = {name: float(raw[colmap[name]]) for name in FIELDS}
            except (ValueError, KeyError, TypeError) as exc:
                rejects.append((lineno, _raw_line(raw), f"malformed: {exc}"))
                continue
            if not inst:
                rejects.append((lineno, _raw_line(raw), "empty instrument"))
                continue
            o, h, lo, c = vals["open"], vals["high"], vals["low"], vals["close"]
            if not (h >= max(o, c) and lo <= min(o, c) and lo > 0 and vals["volume"] >= 0):
                rejects.append((lineno, _raw_line(raw), "OHLC ordering violated"))
                continue
            key = (d, inst)
            if key in rows:
                raise DuplicateKey(f"{d} {inst}")
            rows[key] = vals
            sectors.setdefault(inst, raw[colmap["sector"]].strip() or "UNKNOWN")
    if rejects_path is not None:
        with open(rejects_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["line", "row", "reason"])
            w.writerows(rejects)
    if total and len(rejects) > total / 2:
        raise TooManyRejects(f"{len(rejects)}/{total} rows rejected")
    if not rows:
        raise PanelError("no usable rows")

    dates = tuple(sorted({k[0] for k in rows}))
    instruments = tuple(sorted({k[1] for k in rows}))
    d_idx = {d: i for i, d in enumerate(dates)}
    i_idx = {s: i for i, s in enumerate(instruments)}
    shape = (len(dates), len(instruments))
    values = {name: np.zeros(shape) for name in FIELDS}
    valid = {name: np.zeros(shape, dtype=bool) for name in FIELDS}
    for (d, inst), vals in rows.items():
        t, i = d_idx[d], i_idx[inst]
        for name in FIELDS:
            values[name][t, i] = vals[name]
            valid[name][t, i] = True
    panel = PanelData(
        dates=dates, instruments=instruments, values=values, valid=valid,
        sector=tuple(sectors[i] for i in instruments),
    )
    panel.check_invariants()
    return panel


def _raw_line(raw: dict) -> str:
    buf = io.StringIO()
    csv.writer(buf).writerow([v if v is not None else "" for v in raw.values()])
    return buf.getvalue().strip()


# -- synthetic panels ------------------------------------------------------

_BASE_DATE = date(2015, 1, 2)


def _trading_dates(n: int) -> tuple[date, ...]:
    out, d = [], _BASE_DATE
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return tuple(out)


def _day_bars(rng: np.random.Generator, close_prev: np.ndarray,
              close_now: np.ndarray) -> dict[str, np.ndarray]:
    n = close_now.shape[0]
    opn = close_prev * (1.0 + 0.002 * rng.standard_normal(n))
    hi = np.maximum(opn, close_now) * (1.0 + np.abs(0.003 * rng.standard_normal(n)))
    lo = np.minimum(opn, close_now) * (1.0 - np.abs(0.003 * rng.standard_normal(n)))
    lo = np.maximum(lo, 1e-6)
    vwap = lo + (hi - lo) * rng.uniform(0.2, 0.8, n)
    volume = np.exp(rng.normal(12.0, 0.5, n))
    return {"open": opn, "high": hi, "low": lo, "close": close_now,
            "volume": volume, "vwap": vwap}


def synth_panel(n_days: int, n_inst: int, signal_spec: str = "ts_delta(close,5)",
                noise: float = 0.5, seed: int = 0) -> tuple[PanelData, str]:
    """Geometric-random-walk panel whose next-day cross-sectional returns are
    rank-correlated with a planted signal expression at 1 - noise strength.

    The planted signal is computed day by day with the streaming evaluator, so
    the IC of the planted expression against 1-day forward returns is exactly
    1.0 at noise=0 (returns are a strictly increasing function of signal rank).
    """
    if n_days < 50 or n_inst < 10:
        raise InvalidSpec("need n_days >= 50 and n_inst >= 10")
    if not 0.0 <= noise <= 1.0:
        raise InvalidSpec("noise must be in [0, 1]")
    from . import expr as expr_mod
    from . import ops as ops_mod

    try:
        signal = expr_mod.parse(signal_spec)
        expr_mod.check_units(signal)
    except expr_mod.ExprError as exc:
        raise InvalidSpec(f"bad signal_spec: {exc}") from exc

    rng = np.random.default_rng(seed)
    instruments = tuple(f"S{i:04d}" for i in range(n_inst))
    sector = tuple(f"G{i % 5}" for i in range(n_inst))
    state = ops_mod.stream_init(signal, list(instruments))

    values = {name: np.zeros((n_days, n_inst)) for name in FIELDS}
    close = 50.0 + 100.0 * rng.random(n_inst)
    close_prev = close.copy()
    ret_scale = 0.02
    for t in range(n_days):
        bars = _day_bars(rng, close_prev, close)
        for name in FIELDS:
            values[name][t] = bars[name]
        row = {k: (values[k][t], np.ones(n_inst, dtype=bool)) for k in FIELDS}
        sig, sig_ok = ops_mod.stream_push(state, row, sector)
        # noise std matched to the rank-score std so `noise` interpolates evenly
        eps = np.clip(rng.standard_normal(n_inst), -3.0, 3.0) * 0.5772
        if sig_ok.all() and np.unique(sig).size == n_inst:
            rank = np.argsort(np.argsort(sig))
            z = 2.0 * rank / (n_inst - 1) - 1.0
            r = ret_scale * ((1.0 - noise) * z + noise * eps)
        else:
            # signal not yet defined: bootstrap price dispersion with pure noise
            r = ret_scale * eps
        close_prev = close
        close = close * (1.0 + r)

    valid = {name: np.ones((n_days, n_inst), dtype=bool) for name in FIELDS}
    panel = PanelData(dates=_trading_dates(n_days), instruments=instruments,
                      values=values, valid=valid, sector=sector)
    panel.check_invariants()
    desc = (f"synthetic GBM panel {n_days}x{n_inst}, planted signal {signal_spec} "
            f"at noise={noise}, seed={seed}")
    return panel, desc


def mock_panel(n_days: int = 30, n_inst: int = 5, seed: int = 1) -> PanelData:
    """Small deterministic panel for semantic validation of expressions.

    Deliberately exercises edge ranges: one pair of equal consecutive closes
    (so log(ts_delta(close,2)) traps) and at least one masked cell.
    """
    if n_days < 30:
        raise InvalidSpec("mock panel needs n_days >= 30")
    rng = np.random.default_rng(seed)
    instruments = tuple(f"M{i:02d}" for i in range(n_inst))
    sector = tuple(f"G{i % 2}" for i in range(n_inst))
    values = {name: np.zeros((n_days, n_inst)) for name in FIELDS}
    close = 90.0 + 20.0 * rng.random(n_inst)
    close_prev = close.copy()
    for t in range(n_days):
        bars = _day_bars(rng, close_prev, close)
        for name in FIELDS:
            values[name][t] = bars[name]
        close_prev = close
        close = close * (1.0 + 0.01 * rng.standard_normal(n_inst))
    # plant the flat-close edge case and a masked cell
    values["close"][10, 0] = values["close"][9, 0]
    values["high"][10, 0] = max(values["high"][10, 0], values["close"][10, 0],
                                values["open"][10, 0])
    values["low"][10, 0] = min(values["low"][10, 0], values["close"][10, 0],
                               values["open"][10, 0])
    valid = {name: np.ones((n_days, n_inst), dtype=bool) for name in FIELDS}
    for name in FIELDS:
        valid[name][5, n_inst - 1] = False
    panel = PanelData(dates=_trading_dates(n_days), instruments=instruments,
                      values=values, valid=valid, sector=sector)
    panel.check_invariants()
    return panel
