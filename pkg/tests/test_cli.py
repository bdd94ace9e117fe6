"""Command-line entry points, exercised in-process through main()."""

import csv
import json
import os

import pytest

from alphaforge.cli import main
from alphaforge.panel import PanelData, synth_panel

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures", "decompiler")


@pytest.fixture(scope="module")
def panel_path(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("panels") / "synth.panel")
    panel, _ = synth_panel(120, 20, "ts_delta(close,5)", 0.4, 23)
    panel.save(path)
    return path


class TestSynthAndIngest:
    def test_synth(self, tmp_path, capsys):
        out = str(tmp_path / "p.bin")
        assert main(["synth", "--days", "60", "--instruments", "12",
                     "--seed", "4", "--out", out]) == 0
        panel = PanelData.load(out)
        assert panel.n_days == 60 and panel.n_inst == 12
        assert "synthetic" in capsys.readouterr().out

    def test_ingest(self, tmp_path, capsys):
        src = tmp_path / "rows.csv"
        with open(src, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["date", "instrument", "open", "high", "low", "close",
                        "volume", "vwap", "sector"])
            for d in ("2020-01-02", "2020-01-03"):
                for inst in ("AAA", "BBB"):
                    w.writerow([d, inst, 10, 10.2, 9.8, 10.1, 1000, 10, "T"])
        out = str(tmp_path / "p.bin")
        assert main(["ingest", str(src), "--out", out]) == 0
        assert PanelData.load(out).n_inst == 2


class TestEvalAndBacktest:
    def test_eval_summary(self, panel_path, capsys):
        assert main(["eval", "cs_rank(ts_delta(close,5))",
                     "--panel", panel_path]) == 0
        out = capsys.readouterr().out
        assert "% valid" in out

    def test_eval_csv_export(self, panel_path, tmp_path):
        out = str(tmp_path / "alpha.csv")
        assert main(["eval", "close", "--panel", panel_path, "--out", out]) == 0
        assert sum(1 for _ in open(out)) == 1 + 120 * 20

    def test_backtest(self, panel_path, tmp_path, capsys):
        rep = str(tmp_path / "bt.json")
        assert main(["backtest", "cs_rank(ts_delta(close,5))",
                     "--panel", panel_path, "--out", rep]) == 0
        assert "sharpe" in capsys.readouterr().out
        body = json.loads(open(rep).read())
        assert len(body["daily_returns"]) == 119


class TestSearch:
    def test_search_prints_elites(self, panel_path, tmp_path, capsys):
        seeds = tmp_path / "seeds.txt"
        seeds.write_text("close\ncs_rank(ts_delta(close,3))\n")
        cfg = tmp_path / "gp.json"
        cfg.write_text(json.dumps({"population_size": 30, "generations": 2,
                                   "rng_seed": 0}))
        assert main(["search", "--seeds", str(seeds), "--panel", panel_path,
                     "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "stopped:" in out and "val_ic" in out


class TestChat:
    def test_chat_with_template_provider(self, panel_path, tmp_path, capsys):
        data = str(tmp_path / "data")
        cfg = tmp_path / "gp.json"
        cfg.write_text(json.dumps({"population_size": 30, "generations": 2}))
        assert main(["chat", "--idea", "momentum", "--panel", panel_path,
                     "--data", data, "--config", str(cfg), "--gp-seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "user_message" in out and "report_ready" in out
        journals = os.listdir(os.path.join(data, "sessions"))
        assert len(journals) == 1

    def test_chat_with_fixture_provider(self, panel_path, tmp_path, capsys):
        data = str(tmp_path / "data")
        cfg = tmp_path / "gp.json"
        cfg.write_text(json.dumps({"population_size": 30, "generations": 2}))
        assert main(["chat", "--idea", "momentum with quality",
                     "--provider", "mock-fixture", "--fixture-dir", FIXTURE_DIR,
                     "--panel", panel_path, "--data", data,
                     "--config", str(cfg)]) == 0
        assert "alphas_proposed" in capsys.readouterr().out


class TestPoolExport:
    def test_export_after_chat(self, panel_path, tmp_path):
        data = str(tmp_path / "data")
        cfg = tmp_path / "gp.json"
        cfg.write_text(json.dumps({"population_size": 30, "generations": 2}))
        main(["chat", "--idea", "momentum", "--panel", panel_path,
              "--data", data, "--config", str(cfg)])
        out = str(tmp_path / "pool.csv")
        assert main(["pool", "export", "--journal", os.path.join(data, "pool.jsonl"),
                     "--panel", panel_path, "--out", out]) == 0
        rows = list(csv.reader(open(out)))
        assert rows[0][0] == "id" and len(rows) > 1
