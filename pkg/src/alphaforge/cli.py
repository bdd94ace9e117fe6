"""Command-line entry points for every pipeline stage."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import alphabot, gp, metrics, ops
from .expr import canonical, parse
from .panel import PanelData, forward_returns, ingest_csv, synth_panel
from .pool import PoolStore
from .server import Engine, create_app


def _env(name: str, default: str) -> str:
    return os.environ.get(name, default)


def _load_panel(path: str) -> PanelData:
    return PanelData.load(path)


def _provider_from_args(args) -> alphabot.LLMProvider:
    kind = args.provider or _env("ALPHAFORGE_PROVIDER", "mock-template")
    if kind == "http":
        return alphabot.HttpProvider(
            endpoint=_env("ALPHAFORGE_ENDPOINT", ""),
            api_key=_env("ALPHAFORGE_API_KEY", ""))
    if kind == "mock-fixture":
        return alphabot.FixtureProvider.from_dir(args.fixture_dir)
    return alphabot.TemplateProvider()


def cmd_ingest(args) -> int:
    panel = ingest_csv(args.csv, rejects_path=args.rejects)
    panel.save(args.out)
    print(f"panel {panel.n_days}x{panel.n_inst} -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    panel, desc = synth_panel(args.days, args.instruments, args.signal,
                              args.noise, args.seed)
    panel.save(args.out)
    print(f"{desc} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    panel = _load_panel(args.panel)
    am = ops.evaluate(parse(args.expr), panel)
    if args.out:
        am.export_csv(args.out, panel.dates, panel.instruments)
        print(f"alpha matrix -> {args.out}")
    else:
        frac = am.valid.mean()
        print(f"{am.expr_id}: {frac:.1%} valid, {am.n_domain_errors} domain errors")
    return 0


def cmd_search(args) -> int:
    panel = _load_panel(args.panel)
    fwd = forward_returns(panel, args.horizon)
    with open(args.seeds) as f:
        seeds = [parse(line.strip()) for line in f if line.strip()]
    cfg_dict = {}
    if args.config:
        with open(args.config) as f:
            cfg_dict = json.load(f)
    cfg = gp.GPConfig.from_dict(cfg_dict)
    sink = lambda ev: print(f"gen {ev['gen']:3d}  best {ev['best_fitness']:+.4f}  "
                            f"val {ev['val_best']:+.4f}")
    result = gp.run_search(seeds, panel, fwd, cfg, progress_sink=sink)
    print(f"stopped: {result.stop_reason}")
    for ind in result.elites:
        print(f"  val_ic {ind.val_fitness:+.4f}  nodes {ind.complexity:3d}  "
              f"{canonical(ind.expr)}")
    return 0


def cmd_backtest(args) -> int:
    panel = _load_panel(args.panel)
    am = ops.evaluate(parse(args.expr), panel)
    report = metrics.backtest(am, panel, horizon=args.horizon, q=args.quantile,
                              cost_bps=args.cost_bps)
    sharpe = f"{report.sharpe:.2f}" if report.sharpe is not None else "n/a"
    print(f"annual {report.annual_return:+.2%}  sharpe {sharpe}  "
          f"maxdd {report.max_drawdown:.2%}  turnover {report.mean_turnover:.2f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report.to_json(), f, indent=2)
        print(f"report -> {args.out}")
    return 0


def cmd_chat(args) -> int:
    panel = _load_panel(args.panel)
    data_dir = args.data or _env("ALPHAFORGE_DATA", "./alphaforge-data")
    os.makedirs(data_dir, exist_ok=True)
    engine = Engine(panel, _provider_from_args(args), data_dir,
                    horizon=args.horizon)
    sess = engine.sessions.create(args.title)
    run_config = {"gp": json.load(open(args.config))} if args.config else {}
    if args.gp_seed is not None:
        run_config.setdefault("gp", {})["rng_seed"] = args.gp_seed
    idea = args.idea or sys.stdin.readline().strip()
    engine.post_message(sess.id, idea, run_config, wait=True)
    for ev in engine.sessions.get(sess.id).events:
        print(f"[{ev.seq:3d}] {ev.kind}: {json.dumps(ev.payload)[:160]}")
    print(f"session {sess.id} journal under {data_dir}/sessions/")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    panel = _load_panel(args.panel)
    data_dir = args.data or _env("ALPHAFORGE_DATA", "./alphaforge-data")
    os.makedirs(data_dir, exist_ok=True)
    engine = Engine(panel, _provider_from_args(args), data_dir)
    app = create_app(engine, static_dir=args.static)
    host, _, port = args.addr.partition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000))
    return 0


def cmd_pool_export(args) -> int:
    panel = _load_panel(args.panel)
    store = PoolStore(panel, args.journal)
    # rebuild from journal
    with open(args.journal) as f:
        for line in f:
            if not line.strip():
                continue
            ev = json.loads(line)
            if ev.get("event") == "admit":
                rec_json = ev["record"]
                rec = store.make_record(rec_json["expr"])
                rec.status = "admitted"
                store.records[rec.id] = rec
                store.matrices[rec.id] = store.evaluate(rec.expr_text)
    store.journal_path = None
    store.export_csv(args.out)
    print(f"{len(store.records)} pool records -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alpha-forge",
                                description="formulaic alpha mining engine")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="CSV -> binary panel cache")
    sp.add_argument("csv")
    sp.add_argument("--out", required=True)
    sp.add_argument("--rejects", default=None)
    sp.set_defaults(fn=cmd_ingest)

    sp = sub.add_parser("synth", help="generate a synthetic panel cache")
    sp.add_argument("--days", type=int, default=250)
    sp.add_argument("--instruments", type=int, default=50)
    sp.add_argument("--signal", default="ts_delta(close,5)")
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("eval", help="evaluate an expression over a panel")
    sp.add_argument("expr")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("search", help="run GP search from seed expressions")
    sp.add_argument("--seeds", required=True, help="file with one expression per line")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--config", default=None, help="JSON GP config")
    sp.add_argument("--horizon", type=int, default=1)
    sp.set_defaults(fn=cmd_search)

    sp = sub.add_parser("backtest", help="long-short quantile backtest")
    sp.add_argument("expr")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--horizon", type=int, default=1)
    sp.add_argument("--quantile", type=float, default=0.1)
    sp.add_argument("--cost-bps", type=float, default=10.0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_backtest)

    sp = sub.add_parser("chat", help="one-shot mining dialog")
    sp.add_argument("--idea", default=None)
    sp.add_argument("--provider", default=None)
    sp.add_argument("--fixture-dir", default=None)
    sp.add_argument("--panel", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--title", default="chat")
    sp.add_argument("--config", default=None)
    sp.add_argument("--gp-seed", type=int, default=None)
    sp.add_argument("--horizon", type=int, default=1)
    sp.set_defaults(fn=cmd_chat)

    sp = sub.add_parser("serve", help="HTTP API + event stream")
    sp.add_argument("--addr", default="127.0.0.1:8000")
    sp.add_argument("--data", default=None)
    sp.add_argument("--panel", required=True)
    sp.add_argument("--provider", default=None)
    sp.add_argument("--fixture-dir", default=None)
    sp.add_argument("--static", default=None, help="directory of built UI assets")
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("pool", help="pool utilities")
    pool_sub = sp.add_subparsers(dest="pool_command", required=True)
    spe = pool_sub.add_parser("export", help="emit the current pool as CSV")
    spe.add_argument("--journal", required=True)
    spe.add_argument("--panel", required=True)
    spe.add_argument("--out", required=True)
    spe.set_defaults(fn=cmd_pool_export)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
