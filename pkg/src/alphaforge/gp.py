"""Genetic-programming search over alpha expression trees.

Unit soundness is preserved by construction: random trees are generated
against a target unit, crossover only swaps subtrees of equal unit, and point
mutation swaps operators within unit-signature-compatible groups. Every
candidate is still re-validated (syntax/units/semantics on a mock panel)
before it can enter a population.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import expr as ex
from . import metrics, ops
from .expr import (Binary, Const, CsOp, Expr, Feature, GroupOp, TsOp, Unary,
                   Unit, DIMENSIONLESS, PRICE, VOLUME, canonical, check_units,
                   children, complexity, depth)
from .panel import PanelData, ReturnMatrix, mock_panel

NEG_INF = float("-inf")

WINDOW_MENU = (2, 3, 5, 10, 15, 20)
PRICE_FEATURES = ("open", "high", "low", "close", "vwap")


class GPError(Exception):
    pass


class SeedInvalid(GPError):
    pass


class EmptyViablePopulation(GPError):
    pass


@dataclass
class GPConfig:
    population_size: int = 200
    generations: int = 30
    max_depth: int = 8
    tournament_k: int = 4
    p_crossover: float = 0.6
    p_subtree_mutation: float = 0.2
    p_point_mutation: float = 0.15
    p_constant_jitter: float = 0.05
    parsimony_coeff: float = 0.002       # per node
    diversity_corr_threshold: float = 0.85
    early_stop_patience: int = 5
    train_split: float = 0.7
    ic_method: str = "spearman"          # spearman | pearson
    elite_k: int = 10
    rng_seed: int = 0

    def check(self) -> None:
        probs = (self.p_crossover + self.p_subtree_mutation
                 + self.p_point_mutation + self.p_constant_jitter)
        if abs(probs - 1.0) > 1e-9:
            raise GPError("operator probabilities must sum to 1")
        if not 0.0 < self.train_split < 1.0:
            raise GPError("train_split must be in (0, 1)")
        if self.population_size < 10:
            raise GPError("population_size must be >= 10")

    @classmethod
    def from_dict(cls, d: dict) -> "GPConfig":
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        cfg.check()
        return cfg


@dataclass
class Individual:
    expr: Expr
    fitness: float        # mean train IC
    val_fitness: float    # mean validation IC
    complexity: int

    def adjusted(self, lam: float) -> float:
        """Parsimony-adjusted fitness: train IC minus lam per node."""
        if self.fitness == NEG_INF:
            return NEG_INF
        return self.fitness - lam * self.complexity


@dataclass
class SearchResult:
    elites: list[Individual]
    history: list[dict]   # per generation: best, mean, val_best
    stop_reason: str


# -- random tree generation -------------------------------------------------


def _random_const(rng: np.random.Generator) -> Const:
    return Const(round(float(np.exp(rng.normal(0.0, 1.0))), 4))


def _leaf(rng: np.random.Generator, unit: Unit) -> Expr:
    if unit == PRICE:
        return Feature(PRICE_FEATURES[rng.integers(len(PRICE_FEATURES))])
    if unit == VOLUME:
        return Feature("volume")
    return _random_const(rng)


def _pick_window(rng: np.random.Generator) -> int:
    return int(WINDOW_MENU[rng.integers(len(WINDOW_MENU))])


_ANY_UNITS = (PRICE, VOLUME, DIMENSIONLESS)


def random_tree(rng: np.random.Generator, depth_budget: int,
                method: str = "grow", unit: Unit | None = None) -> Expr:
    """Random expression with the requested unit, unit-correct by construction."""
    if unit is None:
        unit = _ANY_UNITS[rng.integers(len(_ANY_UNITS))]
    if depth_budget <= 1 or (method == "grow" and rng.random() < 0.3):
        return _leaf(rng, unit)

    choices = ["addsub", "neg", "abs", "ts_keep", "muldiv"]
    if unit == DIMENSIONLESS:
        choices += ["log", "sqrt", "ts_rank", "ts_corr", "cs", "group"]
    kind = choices[rng.integers(len(choices))]
    d = depth_budget - 1
    if kind == "addsub":
        op = "add" if rng.random() < 0.5 else "sub"
        return Binary(op, random_tree(rng, d, method, unit),
                      random_tree(rng, d, method, unit))
    if kind == "neg":
        return Unary("neg", random_tree(rng, d, method, unit))
    if kind == "abs":
        return Unary("abs", random_tree(rng, d, method, unit))
    if kind == "ts_keep":
        op = ("ts_delay", "ts_delta", "ts_mean", "ts_std", "ts_min",
              "ts_max")[rng.integers(6)]
        return TsOp(op, random_tree(rng, d, method, unit), _pick_window(rng))
    if kind == "muldiv":
        # split the target unit into two child units from the closed 3-unit set
        if rng.random() < 0.5 and unit != DIMENSIONLESS:
            op, lu, ru = "mul", unit, DIMENSIONLESS
        elif unit == DIMENSIONLESS:
            base = _ANY_UNITS[rng.integers(len(_ANY_UNITS))]
            op, lu, ru = "div", base, base
        else:
            op, lu, ru = "div", unit, DIMENSIONLESS
        if rng.random() < 0.5 and op == "mul":
            lu, ru = ru, lu
        return Binary(op, random_tree(rng, d, method, lu),
                      random_tree(rng, d, method, ru))
    if kind in ("log", "sqrt"):
        return Unary(kind, random_tree(rng, d, method, None))
    if kind == "ts_rank":
        return TsOp("ts_rank", random_tree(rng, d, method, None), _pick_window(rng))
    if kind == "ts_corr":
        return TsOp("ts_corr", random_tree(rng, d, method, None), _pick_window(rng),
                    random_tree(rng, d, method, None))
    if kind == "cs":
        op = "cs_rank" if rng.random() < 0.5 else "cs_scale"
        return CsOp(op, random_tree(rng, d, method, None))
    return GroupOp("group_neutralize", random_tree(rng, d, method, None))


# -- subtree surgery --------------------------------------------------------


def subtree_paths(e: Expr) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = [()]
    for i, k in enumerate(children(e)):
        out.extend((i,) + p for p in subtree_paths(k))
    return out


def get_subtree(e: Expr, path: tuple[int, ...]) -> Expr:
    for i in path:
        e = children(e)[i]
    return e


def replace_subtree(e: Expr, path: tuple[int, ...], new: Expr) -> Expr:
    if not path:
        return new
    i, rest = path[0], path[1:]
    if isinstance(e, Unary):
        return Unary(e.op, replace_subtree(e.child, rest, new))
    if isinstance(e, Binary):
        if i == 0:
            return Binary(e.op, replace_subtree(e.left, rest, new), e.right)
        return Binary(e.op, e.left, replace_subtree(e.right, rest, new))
    if isinstance(e, TsOp):
        if i == 0:
            return TsOp(e.op, replace_subtree(e.child, rest, new), e.window, e.child2)
        return TsOp(e.op, e.child, e.window, replace_subtree(e.child2, rest, new))
    if isinstance(e, CsOp):
        return CsOp(e.op, replace_subtree(e.child, rest, new))
    if isinstance(e, GroupOp):
        return GroupOp(e.op, replace_subtree(e.child, rest, new))
    raise GPError(f"no child {i} at {e!r}")


def _units_by_path(e: Expr) -> dict[tuple[int, ...], Unit]:
    out = {}
    for p in subtree_paths(e):
        try:
            out[p] = check_units(get_subtree(e, p))
        except ex.ExprError:
            pass
    return out


def _is_valid(e: Expr, cfg: GPConfig, mock: PanelData) -> bool:
    if depth(e) > cfg.max_depth:
        return False
    try:
        check_units(e)
    except ex.ExprError:
        return False
    return ex.validate(canonical(e), mock).ok


# -- variation operators ----------------------------------------------------


def crossover(a: Expr, b: Expr, rng: np.random.Generator, cfg: GPConfig,
              mock: PanelData) -> tuple[Expr, Expr]:
    """Swap a uniformly chosen unit-compatible subtree pair; fall back to the
    parents when no pair exists or a child fails validation."""
    ua, ub = _units_by_path(a), _units_by_path(b)
    pairs = [(pa, pb) for pa, va in ua.items() for pb, vb in ub.items() if va == vb]
    if not pairs:
        return a, b
    pa, pb = pairs[rng.integers(len(pairs))]
    sa, sb = get_subtree(a, pa), get_subtree(b, pb)
    ca = replace_subtree(a, pa, sb)
    cb = replace_subtree(b, pb, sa)
    if not _is_valid(ca, cfg, mock) or not _is_valid(cb, cfg, mock):
        return a, b
    return ca, cb


_POINT_GROUPS = [
    ("add", "sub"),
    ("neg", "abs"),
    ("log", "sqrt"),
    ("ts_delay", "ts_delta", "ts_mean", "ts_std", "ts_min", "ts_max"),
    ("cs_rank", "cs_scale"),
]


def _point_mutate(e: Expr, rng: np.random.Generator) -> Expr:
    paths = subtree_paths(e)
    path = paths[rng.integers(len(paths))]
    node = get_subtree(e, path)
    if isinstance(node, TsOp) and rng.random() < 0.5:
        jitter = int(rng.integers(1, 6)) * (1 if rng.random() < 0.5 else -1)
        w = min(max(node.window + jitter, 2), ex.MAX_WINDOW)
        return replace_subtree(e, path, TsOp(node.op, node.child, w, node.child2))
    for group in _POINT_GROUPS:
        opname = getattr(node, "op", None)
        if opname in group:
            alts = [o for o in group if o != opname]
            new_op = alts[rng.integers(len(alts))]
            if isinstance(node, Binary):
                new = Binary(new_op, node.left, node.right)
            elif isinstance(node, Unary):
                new = Unary(new_op, node.child)
            elif isinstance(node, TsOp):
                new = TsOp(new_op, node.child, node.window, node.child2)
            else:
                new = CsOp(new_op, node.child)
            return replace_subtree(e, path, new)
    if isinstance(node, Feature) and node.name in PRICE_FEATURES:
        alts = [f for f in PRICE_FEATURES if f != node.name]
        return replace_subtree(e, path, Feature(alts[rng.integers(len(alts))]))
    return e


def _constant_jitter(e: Expr, rng: np.random.Generator) -> Expr:
    paths = [p for p in subtree_paths(e) if isinstance(get_subtree(e, p), Const)]
    if not paths:
        return e
    path = paths[rng.integers(len(paths))]
    node = get_subtree(e, path)
    v = node.value * float(np.exp(rng.normal(0.0, 0.25)))
    v = min(max(v, -ex.CONST_LIMIT), ex.CONST_LIMIT)
    return replace_subtree(e, path, Const(round(v, 6)))


def _subtree_replace_mutate(e: Expr, rng: np.random.Generator,
                            cfg: GPConfig) -> Expr:
    units = _units_by_path(e)
    paths = list(units)
    path = paths[rng.integers(len(paths))]
    budget = max(2, cfg.max_depth - len(path))
    new = random_tree(rng, min(budget, 4), "grow", units[path])
    return replace_subtree(e, path, new)


def mutate(e: Expr, rng: np.random.Generator, cfg: GPConfig,
           mock: PanelData, kind: str | None = None) -> Expr:
    """Apply one mutation; retried up to 20 times, then the input is returned."""
    for _ in range(20):
        k = kind
        if k is None:
            k = ("subtree", "point", "constant")[rng.integers(3)]
        if k == "subtree":
            cand = _subtree_replace_mutate(e, rng, cfg)
        elif k == "point":
            cand = _point_mutate(e, rng)
        else:
            cand = _constant_jitter(e, rng)
        if _is_valid(cand, cfg, mock):
            return cand
    return e


# -- fitness ----------------------------------------------------------------


def fitness(e: Expr, panel: PanelData, fwd: ReturnMatrix, split: float,
            method: str = "spearman") -> tuple[float, float]:
    """(mean train IC, mean validation IC); -inf sentinel for degenerate alphas."""
    am = ops.evaluate(e, panel)
    if am.valid.mean() < 0.1:
        return NEG_INF, NEG_INF
    ic, ok = metrics.ic_series(am, fwd, method)
    cut = int(panel.n_days * split)
    tr_ok, va_ok = ok[:cut], ok[cut:]
    tr = float(ic[:cut][tr_ok].mean()) if tr_ok.any() else NEG_INF
    va = float(ic[cut:][va_ok].mean()) if va_ok.any() else NEG_INF
    return tr, va


# -- population machinery ---------------------------------------------------


def init_population(seeds: list[Expr], cfg: GPConfig, rng: np.random.Generator,
                    mock: PanelData) -> list[Expr]:
    for s in seeds:
        if not _is_valid(s, cfg, mock):
            raise SeedInvalid(canonical(s))
    pop = list(seeds[: cfg.population_size])
    seen = {canonical(e) for e in pop}
    depth_cycle = list(range(2, cfg.max_depth + 1))
    i = 0
    while len(pop) < cfg.population_size:
        method = "grow" if i % 2 == 0 else "full"
        d = depth_cycle[i % len(depth_cycle)]
        tree = None
        for _ in range(50):
            cand = random_tree(rng, d, method)
            if _is_valid(cand, cfg, mock):
                tree = cand
                break
        i += 1
        if tree is None:
            continue
        pop.append(tree)
        seen.add(canonical(tree))
    return pop


def _flat_corr(a: ops.AlphaMatrix, b: ops.AlphaMatrix) -> float:
    sel = a.valid & b.valid
    if sel.sum() < 3:
        return 0.0
    x, y = a.values[sel], b.values[sel]
    xm, ym = x - x.mean(), y - y.mean()
    den = math.sqrt((xm * xm).sum() * (ym * ym).sum())
    if den == 0.0:
        return 0.0
    return float((xm * ym).sum() / den)


def run_search(seeds: list[Expr], panel: PanelData, fwd: ReturnMatrix,
               cfg: GPConfig, progress_sink=None,
               mock: PanelData | None = None) -> SearchResult:
    """Generational GP loop with tournament selection, elitism, diversity-gated
    elite archive, and out-of-sample early stopping."""
    cfg.check()
    if mock is None:
        mock = mock_panel(120, 10, 1)
    rng = np.random.default_rng(cfg.rng_seed)
    pop = init_population(seeds, cfg, rng, mock)
    lam = cfg.parsimony_coeff
    cache: dict[str, tuple[float, float]] = {}

    def eval_ind(e: Expr) -> Individual:
        key = canonical(e)
        if key not in cache:
            cache[key] = fitness(e, panel, fwd, cfg.train_split, cfg.ic_method)
        tr, va = cache[key]
        return Individual(expr=e, fitness=tr, val_fitness=va,
                          complexity=complexity(e))

    def sort_key(ind: Individual):
        return (-ind.adjusted(lam) if ind.fitness != NEG_INF else float("inf"),
                canonical(ind.expr))

    history: list[dict] = []
    candidates: dict[str, Individual] = {}
    best_val = NEG_INF
    stale = 0
    stop_reason = "generations_exhausted"

    for gen in range(cfg.generations):
        inds = sorted((eval_ind(e) for e in pop), key=sort_key)
        finite = [i for i in inds if i.fitness != NEG_INF]
        if not finite:
            raise EmptyViablePopulation(f"generation {gen}")

        for ind in finite:
            if ind.val_fitness != NEG_INF:
                candidates.setdefault(canonical(ind.expr), ind)

        gen_best = max(i.adjusted(lam) for i in finite)
        gen_mean = float(np.mean([i.adjusted(lam) for i in finite]))
        gen_val = max(i.val_fitness for i in finite)
        history.append({"generation": gen, "best": gen_best,
                        "mean": gen_mean, "val_best": gen_val})
        if progress_sink is not None:
            progress_sink({"kind": "generation_progress", "gen": gen,
                           "best_fitness": gen_best, "mean_fitness": gen_mean,
                           "val_best": gen_val})

        if gen_val > best_val + 1e-12:
            best_val = gen_val
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                stop_reason = "early_stop"
                break
        if gen == cfg.generations - 1:
            break

        # next generation: elitism + operator-driven offspring
        n_elite = max(1, cfg.population_size // 20)
        nxt: list[Expr] = [i.expr for i in inds[:n_elite]]

        def tournament() -> Expr:
            picks = [inds[rng.integers(len(inds))] for _ in range(cfg.tournament_k)]
            return min(picks, key=sort_key).expr

        while len(nxt) < cfg.population_size:
            roll = rng.random()
            if roll < cfg.p_crossover:
                c1, c2 = crossover(tournament(), tournament(), rng, cfg, mock)
                nxt.append(c1)
                if len(nxt) < cfg.population_size:
                    nxt.append(c2)
            elif roll < cfg.p_crossover + cfg.p_subtree_mutation:
                nxt.append(mutate(tournament(), rng, cfg, mock, "subtree"))
            elif roll < cfg.p_crossover + cfg.p_subtree_mutation + cfg.p_point_mutation:
                nxt.append(mutate(tournament(), rng, cfg, mock, "point"))
            else:
                nxt.append(mutate(tournament(), rng, cfg, mock, "constant"))
        pop = nxt

    # final elite pick: best validation IC first, admitting a candidate only
    # when it decorrelates (|corr| <= threshold) from everything already in
    ranked = sorted(candidates.values(),
                    key=lambda i: (-i.val_fitness, canonical(i.expr)))
    elites: list[Individual] = []
    kept: list[ops.AlphaMatrix] = []
    for ind in ranked[:20 * cfg.elite_k]:
        if len(elites) >= cfg.elite_k:
            break
        am = ops.evaluate(ind.expr, panel)
        if all(abs(_flat_corr(am, other)) <= cfg.diversity_corr_threshold
               for other in kept):
            elites.append(ind)
            kept.append(am)

    return SearchResult(elites=elites, history=history, stop_reason=stop_reason)
