import json

import numpy as np
import pytest

from oddstest import pipeline as pl
from oddstest.cli import main


def test_config_defaults_and_overrides():
    cfg = pl.load_config({"noise": {"samples": 64}})
    assert cfg["noise"]["samples"] == 64 and cfg["train"]["epochs"] == 200
    pl.set_override(cfg, "odds.target_fpr", "0.05")
    assert cfg["odds"]["target_fpr"] == 0.05
    with pytest.raises(pl.ConfigError):
        pl.load_config({"noise": {"sample": 64}})
    with pytest.raises(pl.ConfigError):
        pl.load_config({"odds": {"target_fpr": 2.0}})


def test_config_hash_ignores_output_dir():
    a = pl.load_config({"output_dir": "a"})
    b = pl.load_config({"output_dir": "b"})
    assert pl.config_hash(a) == pl.config_hash(b)
    assert pl.config_hash(a) != pl.config_hash(pl.load_config({"seed": 3}))


def test_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 7}))
    assert pl.load_config(str(p))["seed"] == 7
    p.write_text("{")
    with pytest.raises(pl.ConfigError):
        pl.load_config(str(p))


def test_summary_sections(bench):
    for key in ("accuracy", "detection", "correction", "effective_strength",
                "unseen_attacks", "defense_aware", "geometry", "feature_alignment"):
        assert key in bench.summary


def test_bernoulli_endpoints(bench):
    rows = bench.summary["effective_strength"]
    t1 = bench.summary["accuracy"]
    assert rows[0]["q"] == 0.0 and rows[0]["attack_success"] <= 1 - t1["clean"] + 0.01
    plain = bench.summary["defense_aware"]["pgd"]
    assert rows[-1]["q"] == 1.0 and rows[-1]["attack_success"] == plain["success_rate"]
    mid = [r["detection_rate"] for r in rows if 0 < r["q"] < 1]
    assert all(rows[0]["detection_rate"] < d < rows[-1]["detection_rate"] for d in mid)


def run_cli(bench, *args):
    return main(list(args) + ["--out", bench.dir])


def test_iterations_sweep(bench, capsys):
    assert run_cli(bench, "sweep", "iterations") == 0
    rows = json.loads(capsys.readouterr().out)["rows"]
    assert [r["iterations"] for r in rows] == [10, 100, 1000]
    rates = [r["detection_rate"] for r in rows]
    assert max(rates) - min(rates) < 0.05


def test_epsilon_sweep(bench, capsys):
    assert run_cli(bench, "sweep", "epsilon") == 0
    rows = json.loads(capsys.readouterr().out)["rows"]
    acc = [r["adversarial_accuracy"] for r in rows]
    assert all(b <= a for a, b in zip(acc, acc[1:]))
    corrected = [r["corrected_accuracy"] for r in rows]
    assert min(corrected) >= 0.75 and max(corrected) - min(corrected) <= 0.2


def test_report_written(bench):
    with open(f"{bench.dir}/report.md", encoding="utf-8") as fh:
        text = fh.read()
    assert "1.0% / 96.1%" in text and "2.8% / 75.5%" in text
