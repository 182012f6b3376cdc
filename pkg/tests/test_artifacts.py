import os

import numpy as np
import pytest

from oddstest import artifacts as art
from oddstest.attacks import AttackSpec
from oddstest.meta import LogisticModel
from oddstest.models import mlp
from oddstest.noise import default_grid
from oddstest.odds import OddsStatistics, StatsMismatchError


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_model_roundtrip_bytes(tmp_path):
    m = mlp(5, [7], 3, seed=4)
    art.save_model(tmp_path / "a", m)
    m2 = art.load_model(tmp_path / "a")
    art.save_model(tmp_path / "b", m2)
    for f in ("manifest.json", "data.bin"):
        assert read(tmp_path / "a" / f) == read(tmp_path / "b" / f)
    assert m2.checksum() == m.checksum()


def test_corrupted_blob(tmp_path):
    art.save_model(tmp_path / "a", mlp(5, [7], 3))
    raw = bytearray(read(tmp_path / "a" / "data.bin"))
    raw[10] ^= 0xFF
    (tmp_path / "a" / "data.bin").write_bytes(bytes(raw))
    with pytest.raises(art.ArtifactError):
        art.load_model(tmp_path / "a")


def test_schema_version_refused(tmp_path):
    art.save_bundle(tmp_path / "a", {"v": np.arange(3)})
    man = art.read_json(tmp_path / "a" / "manifest.json")
    man["schema_version"] = 99
    art.write_json(tmp_path / "a" / "manifest.json", man)
    with pytest.raises(art.ArtifactError):
        art.load_bundle(tmp_path / "a")


def test_bundle_dtypes(tmp_path):
    t = {"f": np.linspace(0, 1, 6).reshape(2, 3), "f4": np.ones(2, dtype=np.float32),
         "i": np.arange(4), "b": np.array([True, False])}
    art.save_bundle(tmp_path / "a", t, {"x": 1})
    out, meta = art.load_bundle(tmp_path / "a")
    for k in t:
        assert out[k].dtype == t[k].dtype and np.array_equal(out[k], t[k])
    assert meta == {"x": 1}


def stats_for(model):
    k = 3
    rng = np.random.default_rng(0)
    grid = default_grid(5, 0.1, samples=8, levels=2)
    tau = rng.normal(size=(k, k))
    tau[0, 1] = -np.inf
    return OddsStatistics(rng.normal(size=(6, k, k)), rng.random((6, k, k)) + 0.1, np.arange(3) + 10, grid,
                          model.checksum(), thresholds=tau, source_thresholds=np.stack([tau] * 3), level=0.01,
                          fallback_pairs=[(1, 2)], calibration={"clean_fpr": 0.01})


def test_stats_roundtrip_and_mismatch(tmp_path):
    m = mlp(5, [7], 3, seed=4)
    stats = stats_for(m)
    meta = LogisticModel([np.ones((3, 2)), None, np.zeros((3, 2))], fallback=[1])
    art.save_stats(tmp_path / "s.json", stats, meta)
    s2, meta2 = art.load_stats(tmp_path / "s.json", m)
    art.save_stats(tmp_path / "t.json", s2, meta2)
    assert read(tmp_path / "s.json") == read(tmp_path / "t.json")
    assert np.isneginf(s2.thresholds[0, 1]) and meta2.weights[1] is None
    with pytest.raises(StatsMismatchError):
        art.load_stats(tmp_path / "s.json", mlp(5, [7], 3, seed=5))


def test_attack_and_dataset_roundtrip(tmp_path, blob):
    art.save_dataset(tmp_path / "d", blob.ds)
    ds = art.load_dataset(tmp_path / "d")
    assert np.array_equal(ds.x, blob.ds.x) and ds.splits.keys() == blob.ds.splits.keys()
    spec = AttackSpec("pgd", "linf", 0.1)
    art.save_attack(tmp_path / "a", blob.xte_adv, np.ones(len(blob.xte_adv), bool), blob.ite, spec.to_dict())
    xa, ok, ids, sd = art.load_attack(tmp_path / "a")
    assert np.array_equal(xa, blob.xte_adv) and sd["epsilon"] == 0.1


def test_matrix_csv_sidecar(tmp_path):
    art.write_matrix_csv(tmp_path / "m.csv", np.eye(2), "t", [0.0, 1.0], [0.5, 1.5], {"note": "x"})
    assert os.path.exists(tmp_path / "m.json")
    assert read(tmp_path / "m.csv").decode().splitlines()[0].startswith("t")
