import time
import warnings

import numpy as np
import pytest

from oddstest import artifacts as art
from oddstest.attacks import AttackSpec, DegenerateGradientWarning, pgd_attack, tune_epsilon
from oddstest.data import gen_blobs
from oddstest.models import TrainConfig, mlp, train
from oddstest.pipeline import load_config, output_dir, run_pipeline


class Blob:
    """Blob benchmark data with a trained MLP and a tuned PGD budget."""


@pytest.fixture(scope="session")
def blob():
    b = Blob()
    b.ds = gen_blobs(4, 20, 4000, 3.0, seed=0)
    b.xtr, b.ytr, b.itr = b.ds.split("train")
    b.xca, b.yca, b.ica = b.ds.split("calibration")
    b.xte, b.yte, b.ite = b.ds.split("test")
    b.model = train(mlp(20, [128, 128], 4, seed=0), b.xtr, b.ytr, TrainConfig(epochs=200, seed=0))
    b.eps = tune_epsilon(b.model, b.xca[:300], seed=1)
    b.spec = AttackSpec("pgd", "linf", b.eps, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateGradientWarning)
        b.xte_adv = pgd_attack(b.model, b.xte, b.spec, ids=b.ite)
    return b


class Bench:
    """Outputs of one default end-to-end run."""


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    cfg = load_config({"output_dir": str(out)})
    t0 = time.perf_counter()
    b = Bench()
    b.summary = run_pipeline(cfg)
    b.elapsed = time.perf_counter() - t0
    b.cfg = cfg
    b.dir = output_dir(cfg)
    b.manifest = art.read_json(f"{b.dir}/manifest.json")
    b.timings = b.manifest["timings_seconds"]
    b.model = art.load_model(f"{b.dir}/model")
    b.stats, b.meta = art.load_stats(f"{b.dir}/stats.json", b.model)
    b.ds = art.load_dataset(f"{b.dir}/dataset")
    return b
