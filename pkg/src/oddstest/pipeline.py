"""Experiment configuration and end-to-end orchestration."""
import copy
import hashlib
import json
import os
import time
import warnings
from dataclasses import replace

import numpy as np

from . import __version__
from . import artifacts as art
from .attacks import (AttackSpec, CWSpec, DegenerateGradientWarning, bernoulli_thin, cw_attack,
                      deepfool_distance, eot_pgd_attack, pgd_attack, tune_epsilon)
from .data import gen_blobs
from .geometry import (cone_grid, feature_ray_profile, logit_crossover, nn_distance_ratios, preimage_search,
                       roc_auc, roc_sweep)
from .meta import meta_correct, train_meta
from .models import TrainConfig, mlp, tiny_cnn, train
from .noise import default_grid
from .odds import (ZScores, calibrate_thresholds, correct, detect, fit_statistics, standardized_draws,
                   z_scores)

OUTPUT_ENV = "ODDSTEST_OUTPUT"
UNSEEN_REFERENCE = "1.0% / 96.1%"
DEFENSE_AWARE_REFERENCE = "2.8% / 75.5%"

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/blobs",
    "dataset": {"generator": "blobs", "classes": 4, "dim": 20, "count": 4000, "separation": 3.0, "seed": 0,
                "signal_std": 0.15, "signal_base": 0.1, "background_std": 0.1, "background_center": -0.1,
                "fractions": [0.4, 0.3, 0.1, 0.2], "bundle": None},
    "model": {"kind": "mlp", "hidden": [128, 128], "seed": 0, "input_shape": None, "channels": [8, 16]},
    "train": {"epochs": 200, "batch_size": 64, "lr": 1e-3, "optimizer": "rmsprop", "seed": 0},
    "attack": {"norm": "linf", "epsilon": None, "alpha": None, "iterations": 20, "seed": 1,
               "tune_target": 0.95, "tune_samples": 300},
    "attack_l2": {"epsilon": None, "iterations": 20, "seed": 2},
    "cw": {"kappa": 0.0, "c_min": 1e-3, "c_max": 1e2, "search_steps": 10, "steps": 100, "lr": 0.01,
           "samples": 300},
    "eot": {"samples": 100, "eval_samples": 300, "seed": 3},
    "noise": {"samples": 256, "levels": 5, "base": None, "seed": 0,
              "sources": ["uniform", "gaussian", "bernoulli-sign"]},
    "odds": {"aggregation": "average", "vote": "majority", "target_fpr": 0.01, "min_count": 10},
    "meta": {"l2": 1e-3, "min_count": 5},
    "geometry": {"samples": 200, "cone_samples": 20, "cone_draws": 32, "preimage_trials": 200, "seed": 4,
                 "s_grid": [-1.0, -0.5, 0.0, 0.5, 1.0], "t_grid": [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0],
                 "ray_t_grid": [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
                 "roc_fprs": [0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0]},
    "sweeps": {"bernoulli_q": [0.0, 0.1, 0.25, 0.5, 0.75, 1.0], "epsilon_factors": [0.25, 0.5, 1.0, 1.5, 2.0],
               "iterations": [10, 100, 1000], "samples": 300},
    "adversarial_training": {"enabled": True, "epochs": 100, "iterations": 7},
}


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key '{path}{k}'")
        if isinstance(base[k], dict) and v is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"'{path}{k}' must be an object")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(cfg=None):
    """Defaults overlaid with a dict or JSON file path, then validated."""
    if cfg is None:
        cfg = {}
    elif isinstance(cfg, (str, os.PathLike)):
        try:
            with open(cfg, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, cfg)
    _validate(cfg)
    return cfg


def _validate(cfg):
    d, t, o = cfg["dataset"], cfg["train"], cfg["odds"]
    checks = [
        (isinstance(cfg["seed"], int), "seed must be an integer"),
        (d["bundle"] is not None or (d["classes"] >= 2 and d["dim"] >= d["classes"] and d["count"] > 0),
         "dataset needs classes >= 2, dim >= classes and count > 0"),
        (d["separation"] > 0, "dataset.separation must be positive"),
        (t["epochs"] >= 0 and t["batch_size"] >= 1 and t["lr"] > 0, "invalid training settings"),
        (t["optimizer"] in ("sgd", "rmsprop"), "train.optimizer must be sgd or rmsprop"),
        (0.0 < o["target_fpr"] < 1.0, "odds.target_fpr must lie in (0, 1)"),
        (o["aggregation"] in ("average", "best"), "odds.aggregation must be average or best"),
        (o["vote"] in ("majority", "none"), "odds.vote must be majority or none"),
        (cfg["attack"]["norm"] in ("linf", "l2"), "attack.norm must be linf or l2"),
        (cfg["attack"]["iterations"] >= 1, "attack.iterations must be >= 1"),
        (cfg["noise"]["samples"] >= 1 and cfg["noise"]["levels"] >= 1, "noise.samples and levels must be >= 1"),
        (cfg["model"]["kind"] in ("mlp", "conv"), "model.kind must be mlp or conv"),
        (all(0.0 <= q <= 1.0 for q in cfg["sweeps"]["bernoulli_q"]), "sweeps.bernoulli_q must lie in [0, 1]"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def set_override(cfg, dotted, value):
    """Apply a ``a.b=value`` override; value parsed as JSON when possible."""
    try:
        value = json.loads(value)
    except (TypeError, json.JSONDecodeError):
        pass
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value
    return cfg


def output_dir(cfg):
    root = os.environ.get(OUTPUT_ENV)
    path = cfg["output_dir"]
    return os.path.join(root, path) if root and not os.path.isabs(path) else path


def config_hash(cfg):
    """Hash of everything that affects results (the output location does not)."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(art.dumps(body).encode()).hexdigest()


# stage helpers

def make_dataset(cfg):
    d = cfg["dataset"]
    if d["bundle"]:
        return art.load_dataset(d["bundle"])
    return gen_blobs(d["classes"], d["dim"], d["count"], d["separation"], d["seed"], d["signal_std"],
                     d["signal_base"], d["background_std"], d["background_center"], tuple(d["fractions"]))


def build_model(cfg, ds):
    m = cfg["model"]
    if m["kind"] == "conv":
        return tiny_cnn(m["input_shape"], ds.num_classes, m["channels"], m["hidden"], seed=m["seed"])
    return mlp(ds.x.shape[1], m["hidden"], ds.num_classes, seed=m["seed"])


def train_config(cfg, adversarial=None):
    t = cfg["train"]
    return TrainConfig(t["epochs"], t["batch_size"], t["lr"], t["optimizer"], t["seed"], adversarial)


def attack_spec(cfg, eps, norm=None, iterations=None, section="attack"):
    a = cfg[section]
    return AttackSpec("pgd", norm or cfg["attack"]["norm"], float(eps), cfg["attack"]["alpha"] if section == "attack"
                      else None, iterations or a["iterations"], seed=a["seed"])


def cw_spec(cfg):
    c = cfg["cw"]
    return CWSpec(c["kappa"], (c["c_min"], c["c_max"]), c["search_steps"], c["steps"], c["lr"])


def noise_grid(cfg, eps, dim):
    n = cfg["noise"]
    base = n["base"] if n["base"] is not None else eps
    return default_grid(dim, base, n["samples"], n["seed"], tuple(n["sources"]), n["levels"])


def quiet_pgd(model, x, spec, ids=None, label=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateGradientWarning)
        return pgd_attack(model, x, spec, label=label, ids=ids)


def evaluate_attack(model, stats, meta, x_nat, x_adv, labels, ids=None):
    """Detection and accuracy figures for one attacked batch."""
    z = z_scores(model, x_adv, stats, ids)
    pred_nat = model.predict(x_nat)
    success = z.pred != pred_nat
    flag = detect(z, stats)
    return z, {
        "count": int(len(labels)),
        "success_rate": float(success.mean()),
        "adversarial_accuracy": float(np.mean(z.pred == labels)),
        "detection_rate": float(flag[success].mean()) if success.any() else 0.0,
        "flag_rate": float(flag.mean()),
        "argmax_corrected_accuracy": float(np.mean(correct(z, stats) == labels)),
        "corrected_accuracy": float(np.mean(meta_correct(z, meta, stats) == labels)) if meta is not None
        else float(np.mean(correct(z, stats) == labels)),
        "mean_l2": float(np.mean(np.linalg.norm(x_adv - x_nat, axis=1))),
    }


def clean_figures(stats, meta, z, labels):
    flag = detect(z, stats)
    return {"count": int(len(labels)), "accuracy": float(np.mean(z.pred == labels)),
            "false_positive_rate": float(flag.mean()),
            "argmax_corrected_accuracy": float(np.mean(correct(z, stats) == labels)),
            "corrected_accuracy": float(np.mean(meta_correct(z, meta, stats) == labels)) if meta is not None
            else float(np.mean(correct(z, stats) == labels))}


def standardization_check(model, stats, x, labels):
    """Per-cell moments of per-draw Z-scores on correctly classified points."""
    ok = model.predict(x) == labels
    x, y = x[ok], labels[ok]
    k = stats.num_classes
    means, stds = [], []
    for c in range(len(stats.grid)):
        z = standardized_draws(model, x, y, stats, c)
        for yy in range(k):
            sel = z[y == yy]
            for zz in range(k):
                if zz != yy and len(sel):
                    v = sel[:, :, zz]
                    means.append(v.mean())
                    stds.append(v.std())
    means, stds = np.array(means), np.array(stds)
    return {"points": int(ok.sum()), "entries": int(len(means)), "max_abs_mean": float(np.abs(means).max()),
            "min_std": float(stds.min()), "max_std": float(stds.max())}


def alignment_gain(model, x_nat, x_adv):
    """<phi(x_adv) - phi(x*), w_y - w_{y*}> on successful untargeted attacks."""
    ys, ya = model.predict(x_nat), model.predict(x_adv)
    ok = ys != ya
    w = model.logit_weights
    dphi = model.features(x_adv[ok]) - model.features(x_nat[ok])
    val = np.sum(dphi * (w[ya[ok]] - w[ys[ok]]), axis=1)
    return val


def effective_strength_sweep(model, stats, meta, x, x_adv, labels, q_grid, seed=0):
    rows = []
    for q in q_grid:
        xt = x + bernoulli_thin(x_adv - x, float(q), seed)
        z = z_scores(model, xt, stats)
        flag = detect(z, stats)
        rows.append({"q": float(q), "attack_success": float(np.mean(z.pred != labels)),
                     "detection_rate": float(flag.mean()),
                     "corrected_accuracy": float(np.mean(meta_correct(z, meta, stats) == labels)),
                     "argmax_corrected_accuracy": float(np.mean(correct(z, stats) == labels))})
    return rows


def epsilon_sweep(model, stats, meta, x, labels, base_spec, factors, ids=None):
    rows = []
    for f in factors:
        spec = replace(base_spec, epsilon=base_spec.epsilon * float(f), alpha=None)
        xa = quiet_pgd(model, x, spec, ids)
        _, r = evaluate_attack(model, stats, meta, x, xa, labels, ids)
        rows.append({"epsilon": spec.epsilon, **r})
    return rows


def iterations_sweep(model, stats, meta, x, labels, base_spec, iterations, ids=None):
    rows = []
    for n in iterations:
        spec = replace(base_spec, iterations=int(n), alpha=None)
        xa = quiet_pgd(model, x, spec, ids)
        _, r = evaluate_attack(model, stats, meta, x, xa, labels, ids)
        rows.append({"iterations": int(n), **r})
    return rows


def _round(obj, nd=6):
    if isinstance(obj, dict):
        return {k: _round(v, nd) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, nd) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return round(float(obj), nd) if np.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class _Stages:
    def __init__(self, log):
        self.log = log
        self.timings = {}

    def __call__(self, name):
        stages = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()
                stages.log(f"[{name}] start")

            def __exit__(self, et, ev, tb):
                stages.timings[name] = round(time.perf_counter() - self.t0, 3)
                if ev is not None and not isinstance(ev, PipelineError):
                    raise PipelineError(name, ev) from ev
                stages.log(f"[{name}] done in {stages.timings[name]:.1f}s")
        return _Ctx()


def run_pipeline(cfg=None, log=None):
    """Train, attack, calibrate, evaluate and diagnose; returns the summary dict.

    Artifacts and ``summary.json`` land in the configured output directory.
    """
    cfg = load_config(cfg)
    log = log or (lambda msg: None)
    out = output_dir(cfg)
    os.makedirs(out, exist_ok=True)
    st = _Stages(log)
    summary = {"library_version": __version__, "config_sha256": config_hash(cfg), "seed": cfg["seed"]}
    g = cfg["geometry"]

    with st("data"):
        ds = make_dataset(cfg)
        art.save_dataset(os.path.join(out, "dataset"), ds)
        xtr, ytr, itr = ds.split("train")
        xca, yca, ica = ds.split("calibration")
        xho, yho, iho = ds.split("holdout")
        xte, yte, ite = ds.split("test")
        summary["dataset"] = {"provenance": ds.provenance,
                              "splits": {k: int(len(v)) for k, v in ds.splits.items()}}

    with st("train"):
        model = train(build_model(cfg, ds), xtr, ytr, train_config(cfg))
        art.save_model(os.path.join(out, "model"), model)

    with st("attack"):
        a = cfg["attack"]
        n_tune = a["tune_samples"]
        eps = a["epsilon"] or tune_epsilon(model, xca[:n_tune], a["norm"], target=a["tune_target"],
                                           iterations=a["iterations"], seed=a["seed"])
        spec = attack_spec(cfg, eps)
        adv = {}
        for name, x, ids in (("train", xtr, itr), ("calibration", xca, ica), ("holdout", xho, iho),
                             ("test", xte, ite)):
            adv[name] = quiet_pgd(model, x, spec, ids)
            art.save_attack(os.path.join(out, f"attack_pgd_{name}"), adv[name],
                            model.predict(adv[name]) != model.predict(x), ids, spec.to_dict())
        summary["attack"] = spec.to_dict()

    with st("fit-stats"):
        grid = noise_grid(cfg, eps, ds.x.shape[1])
        stats = fit_statistics(model, xtr, ytr, grid, cfg["odds"]["min_count"])
        stats = replace(stats, aggregation=cfg["odds"]["aggregation"], vote=cfg["odds"]["vote"])

    with st("calibrate"):
        zc = z_scores(model, xca, stats, ica)
        za = z_scores(model, adv["calibration"], stats, ica)
        ok = za.pred != zc.pred
        stats = calibrate_thresholds(stats, zc, za[np.flatnonzero(ok)], cfg["odds"]["target_fpr"])

    with st("meta-train"):
        ztr = z_scores(model, adv["train"], stats, itr)
        meta = train_meta(ztr, ytr, stats, cfg["meta"]["l2"], cfg["meta"]["min_count"], attack="pgd-linf")
        art.save_stats(os.path.join(out, "stats.json"), stats, meta)

    with st("evaluate"):
        zt = z_scores(model, xte, stats, ite)
        zta, pgd_fig = evaluate_attack(model, stats, meta, xte, adv["test"], yte, ite)
        clean = clean_figures(stats, meta, zt, yte)
        art.write_csv(os.path.join(out, "detections_test_clean.csv"), art.detection_rows(zt, stats, meta))
        art.write_csv(os.path.join(out, "detections_test_pgd.csv"), art.detection_rows(zta, stats, meta))
        zh = z_scores(model, xho, stats, iho)
        _, ho_fig = evaluate_attack(model, stats, meta, xho, adv["holdout"], yho, iho)
        summary["accuracy"] = {"clean": clean["accuracy"], "adversarial": pgd_fig["adversarial_accuracy"],
                                      "attack_success": pgd_fig["success_rate"]}
        summary["detection"] = {"clean_fpr": clean["false_positive_rate"],
                                       "adversarial_tpr": pgd_fig["detection_rate"],
                                       "adversarial_flag_rate": pgd_fig["flag_rate"],
                                       "calibration": stats.calibration}
        summary["correction"] = {
            "clean": clean["corrected_accuracy"], "adversarial": pgd_fig["corrected_accuracy"],
            "clean_argmax": clean["argmax_corrected_accuracy"],
            "adversarial_argmax": pgd_fig["argmax_corrected_accuracy"],
            "validation": {"clean_accuracy": float(np.mean(zh.pred == yho)),
                           "meta_corrected": ho_fig["corrected_accuracy"],
                           "argmax_corrected": ho_fig["argmax_corrected_accuracy"]}}
        summary["meta"] = {"attack": meta.attack, "fallback_classes": meta.fallback, "info": meta.info}
        art.write_csv(os.path.join(out, "table_main.csv"), [
            {"setting": "clean", "accuracy": clean["accuracy"], "flag_rate": clean["false_positive_rate"],
             "corrected_accuracy": clean["corrected_accuracy"]},
            {"setting": "pgd-linf", "accuracy": pgd_fig["adversarial_accuracy"],
             "flag_rate": pgd_fig["detection_rate"], "corrected_accuracy": pgd_fig["corrected_accuracy"]}])

    with st("unseen-attacks"):
        eps2 = cfg["attack_l2"]["epsilon"] or tune_epsilon(model, xca[:n_tune], "l2", target=a["tune_target"],
                                                           iterations=cfg["attack_l2"]["iterations"],
                                                           seed=cfg["attack_l2"]["seed"])
        spec2 = attack_spec(cfg, eps2, "l2", section="attack_l2")
        x2 = quiet_pgd(model, xte, spec2, ite)
        art.save_attack(os.path.join(out, "attack_pgd_l2_test"), x2, model.predict(x2) != model.predict(xte),
                        ite, spec2.to_dict())
        _, l2_fig = evaluate_attack(model, stats, meta, xte, x2, yte, ite)
        ncw = cfg["cw"]["samples"]
        cw = cw_attack(model, xte[:ncw], cw_spec(cfg))
        art.save_attack(os.path.join(out, "attack_cw_test"), cw.x_adv, cw.success, ite[:ncw], cw_spec(cfg).to_dict())
        _, cw_fig = evaluate_attack(model, stats, meta, xte[:ncw], cw.x_adv, yte[:ncw], ite[:ncw])
        ok2 = model.predict(x2) != model.predict(xte)
        l2_fig["mean_l2_successful"] = float(np.mean(np.linalg.norm((x2 - xte)[ok2], axis=1)))
        cw_fig["mean_l2_successful"] = float(np.mean(np.linalg.norm((cw.x_adv - xte[:ncw])[cw.success], axis=1)))
        rows = [{"attack": "pgd-linf (calibration)", **pgd_fig}, {"attack": "pgd-l2", "epsilon": eps2, **l2_fig},
                {"attack": "cw-l2", **cw_fig}]
        summary["unseen_attacks"] = {"reference_full_scale": UNSEEN_REFERENCE, "clean_fpr": clean[
            "false_positive_rate"], "rows": rows}
        art.write_csv(os.path.join(out, "table_unseen.csv"),
                      [{k: r.get(k) for k in ("attack", "success_rate", "detection_rate", "corrected_accuracy",
                                               "mean_l2")} for r in rows])

    with st("defense-aware"):
        e = cfg["eot"]
        ne = e["eval_samples"]
        espec = replace(spec, variant="eot-pgd", eot_samples=e["samples"], seed=e["seed"], noise=grid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateGradientWarning)
            xe = eot_pgd_attack(model, xte[:ne], espec, ids=ite[:ne])
        art.save_attack(os.path.join(out, "attack_eot_test"), xe, model.predict(xe) != model.predict(xte[:ne]),
                        ite[:ne], espec.to_dict())
        _, eot_fig = evaluate_attack(model, stats, meta, xte[:ne], xe, yte[:ne], ite[:ne])
        _, base_fig = evaluate_attack(model, stats, meta, xte[:ne], adv["test"][:ne], yte[:ne], ite[:ne])
        summary["defense_aware"] = {"reference_full_scale": DEFENSE_AWARE_REFERENCE,
                                           "clean_fpr": clean["false_positive_rate"], "noise_draws": e["samples"],
                                           "pgd": base_fig, "eot_pgd": eot_fig}
        art.write_csv(os.path.join(out, "table_defense_aware.csv"), [
            {"attack": n, **{k: r[k] for k in ("success_rate", "detection_rate", "corrected_accuracy")}}
            for n, r in (("pgd", base_fig), ("eot-pgd", eot_fig))])

    with st("effective-strength"):
        ns = cfg["sweeps"]["samples"]
        rows = effective_strength_sweep(model, stats, meta, xte[:ns], adv["test"][:ns], yte[:ns],
                                        cfg["sweeps"]["bernoulli_q"], seed=cfg["seed"])
        summary["effective_strength"] = rows
        art.write_csv(os.path.join(out, "effective_strength.csv"), rows)

    with st("geometry"):
        summary["geometry"] = geometry_report(model, stats, ds, adv, cfg, out)
        val = alignment_gain(model, xte, adv["test"])
        summary["feature_alignment"] = {"successful_attacks": int(len(val)), "nonnegative_fraction":
                                   float(np.mean(val >= 0)) if len(val) else 1.0, "min_alignment":
                                   float(val.min()) if len(val) else 0.0}

    with st("roc"):
        okc = np.flatnonzero(za.pred != zc.pred)
        fprs = g["roc_fprs"]
        rows = roc_sweep(stats, zc, za[okc], yca, yca[okc], fprs)
        roc = {"auc": roc_auc(rows), "rows": [{"target_fpr": float(f), "fpr": r[0], "tpr": r[1],
                                               "clean_accuracy": r[2], "adversarial_accuracy": r[3]}
                                              for f, r in zip(fprs, rows)]}
        ordered = sorted(rows)
        roc["tpr_monotone"] = bool(np.all(np.diff([r[1] for r in ordered]) >= 0))
        summary["roc"] = roc
        art.write_csv(os.path.join(out, "roc.csv"), roc["rows"])

    with st("standardization"):
        summary["standardization"] = standardization_check(model, stats, xca, yca)

    if cfg["adversarial_training"]["enabled"]:
        with st("adversarial-training"):
            at = cfg["adversarial_training"]
            inner = replace(spec, iterations=at["iterations"], alpha=None)
            tcfg = replace(train_config(cfg, inner), epochs=at["epochs"])
            robust = train(build_model(cfg, ds), xtr, ytr, tcfg)
            art.save_model(os.path.join(out, "model_adversarial"), robust)
            xr = quiet_pgd(robust, xte, spec, ite)
            summary["adversarial_training_baseline"] = {
                "standard": {"clean": clean["accuracy"], "pgd": pgd_fig["adversarial_accuracy"]},
                "adversarial": {"clean": float(np.mean(robust.predict(xte) == yte)),
                                "pgd": float(np.mean(robust.predict(xr) == yte))}}

    summary = _round(summary)
    art.write_json(os.path.join(out, "summary.json"), summary)
    with open(os.path.join(out, "report.md"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_report(summary))
    art.write_json(os.path.join(out, "manifest.json"), {
        "library_version": __version__, "config": cfg, "config_sha256": summary["config_sha256"],
        "seeds": {"global": cfg["seed"], "dataset": cfg["dataset"]["seed"], "model": cfg["model"]["seed"],
                  "train": cfg["train"]["seed"], "attack": cfg["attack"]["seed"],
                  "attack_l2": cfg["attack_l2"]["seed"], "eot": cfg["eot"]["seed"], "noise": cfg["noise"]["seed"],
                  "geometry": cfg["geometry"]["seed"]},
        "timings_seconds": st.timings})
    return summary


def geometry_report(model, stats, ds, adv, cfg, out):
    g = cfg["geometry"]
    rng = np.random.default_rng([g["seed"], 11])
    xte, yte, ite = ds.split("test")
    xa = adv["test"]
    n = min(g["samples"], len(xte))
    x0, x1 = xte[:n], xa[:n]
    ys, ya = model.predict(x0), model.predict(x1)
    ok = np.flatnonzero(ys != ya)
    rep = {}

    ts = np.array([logit_crossover(model, x0[i], x1[i]) for i in ok])
    rep["crossover"] = {"mean": float(ts.mean()), "std": float(ts.std()), "count": int(len(ts)),
                        "reference_full_scale": 0.43}
    art.write_csv(os.path.join(out, "crossover.csv"), [{"id": int(ite[i]), "t": float(t)} for i, t in zip(ok, ts)])

    corpus = np.concatenate([ds.split(s)[0] for s in ("train", "calibration", "holdout")])
    ratios = nn_distance_ratios(x1[ok], x0[ok], corpus)
    rep["nn_ratio"] = {"mean": float(ratios.mean()), "std": float(ratios.std()), "reference_full_scale": "0.075 +- 0.018"}
    art.write_csv(os.path.join(out, "nnratio.csv"), [{"id": int(ite[i]), "ratio": float(r)} for i, r in zip(ok, ratios)])

    dn = np.array([deepfool_distance(model, x0[i])[0] for i in ok])
    da = np.array([deepfool_distance(model, x1[i])[0] for i in ok])
    rep["boundary_distance"] = {"natural_mean": float(dn.mean()), "adversarial_mean": float(da.mean()),
                                "reference_full_scale": {"adversarial": 0.37, "natural": 0.27}}

    w = model.logit_weights
    t_ray = np.array(g["ray_t_grid"])
    align_adv, align_rnd, norms = [], [], []
    for i in ok:
        d = x1[i] - x0[i]
        r = rng.standard_normal(len(d))
        r *= np.linalg.norm(d) / np.linalg.norm(r)
        pa = feature_ray_profile(model, x0[i], d, t_ray, source=ys[i], target=ya[i])
        pr = feature_ray_profile(model, x0[i], r, t_ray)
        align_adv.append(pa.alignment)
        align_rnd.append(pr.alignment)
        norms.append((pa.norm, pr.norm))
    align_adv, align_rnd = np.array(align_adv), np.array(align_rnd)
    j1 = int(np.argmin(np.abs(t_ray - 1.0)))
    rep["ray_alignment"] = {"fraction_adversarial_exceeds_random": float(np.mean(align_adv[:, j1] > align_rnd[:, j1])),
                            "t": 1.0}
    norms = np.array(norms)
    art.write_matrix_csv(os.path.join(out, "ray_profile.csv"),
                         np.stack([norms[:, 0].mean(0), norms[:, 1].mean(0), align_adv.mean(0), align_rnd.mean(0)], 1),
                         "t", t_ray, [0, 1, 2, 3],
                         {"columns": ["adv_norm", "random_norm", "adv_alignment", "random_alignment"],
                          "samples": int(len(ok)), "random_norm_matching": "per sample, ||r|| = ||dx||"})

    s_grid, t_grid = np.array(g["s_grid"]), np.array(g["t_grid"])
    cones = [cone_grid(model, x0[i], x1[i] - x0[i], s_grid, t_grid, g["cone_draws"], seed=g["seed"] + int(i)).values
             for i in ok[:g["cone_samples"]]]
    cone = np.mean(cones, axis=0)
    art.write_matrix_csv(os.path.join(out, "cone.csv"), cone, "t", t_grid, s_grid,
                         {"rows": "t (adversarial axis)", "cols": "s (orthogonal axis)", "draws": g["cone_draws"],
                          "samples": len(cones), "value": "mean natural-class softmax", "clip": True})
    ti = int(np.argmin(np.abs(t_grid - 1.0)))
    si = int(np.argmin(np.abs(s_grid)))
    rep["cone"] = {"adversarial_row_center": float(cone[ti, si]),
                   "adversarial_row_edges": float((cone[ti, 0] + cone[ti, -1]) / 2)}

    imps = []
    for k in range(g["preimage_trials"]):
        i = ok[k % len(ok)]
        dphi = model.features(x1[i]) - model.features(x0[i])
        rnd = rng.standard_normal(len(dphi))
        rnd[-1] = 0.0
        rnd *= np.linalg.norm(dphi) / np.linalg.norm(rnd)
        imps.append(preimage_search(model, x0[i], rnd)[1])
    imps = np.array(imps)
    rep["preimage"] = {"trials": int(len(imps)), "improved_fraction": float(np.mean(imps > 0)),
                       "mean_improvement": float(imps.mean())}

    return rep


def _pct(v):
    return f"{100 * v:.1f}%"


def render_report(s):
    """Markdown rendering of the summary tables."""
    t1, t2, t3 = s["accuracy"], s["detection"], s["correction"]
    lines = ["# Noise-perturbed log-odds benchmark", "",
             f"PGD {s['attack']['norm']} epsilon {s['attack']['epsilon']:.4f}, alpha {s['attack']['alpha']:.4f}, "
             f"{s['attack']['iterations']} iterations.", "",
             "## Accuracy without defense (clean / attack)", "",
             f"{_pct(t1['clean'])} / {_pct(t1['adversarial'])}", "",
             "## Detection rate (clean / attack)", "",
             f"{_pct(t2['clean_fpr'])} / {_pct(t2['adversarial_tpr'])}", "",
             "## Accuracy after correction (clean / attack)", "",
             f"logistic corrector: {_pct(t3['clean'])} / {_pct(t3['adversarial'])}",
             f"argmax corrector: {_pct(t3['clean_argmax'])} / {_pct(t3['adversarial_argmax'])}", ""]
    t5 = s["unseen_attacks"]
    lines += [f"## Unseen attacks (full-scale reference for L2-PGD: {t5['reference_full_scale']})", "",
              "| attack | success | detection | corrected accuracy |", "|---|---|---|---|"]
    for r in t5["rows"]:
        lines.append(f"| {r['attack']} | {_pct(r['success_rate'])} | {_pct(r['detection_rate'])} | "
                     f"{_pct(r['corrected_accuracy'])} |")
    t7 = s["defense_aware"]
    lines += ["", f"## Defense-aware attack, K={t7['noise_draws']} (full-scale reference: {t7['reference_full_scale']})",
              "", "| attack | success | detection | corrected accuracy |", "|---|---|---|---|"]
    for name in ("pgd", "eot_pgd"):
        r = t7[name]
        lines.append(f"| {name} | {_pct(r['success_rate'])} | {_pct(r['detection_rate'])} | "
                     f"{_pct(r['corrected_accuracy'])} |")
    lines += ["", f"clean false positive rate: {_pct(t7['clean_fpr'])}", "",
              "## Effective Bernoulli strength", "", "| q | attack success | detection | corrected accuracy |",
              "|---|---|---|---|"]
    for r in s["effective_strength"]:
        lines.append(f"| {r['q']:.2f} | {_pct(r['attack_success'])} | {_pct(r['detection_rate'])} | "
                     f"{_pct(r['corrected_accuracy'])} |")
    geo = s["geometry"]
    lines += ["", "## Geometry", "",
              f"logit crossover t: {geo['crossover']['mean']:.3f} +- {geo['crossover']['std']:.3f}",
              f"nearest-neighbour ratio: {geo['nn_ratio']['mean']:.3f} +- {geo['nn_ratio']['std']:.3f}",
              f"boundary distance natural / adversarial: {geo['boundary_distance']['natural_mean']:.3f} / "
              f"{geo['boundary_distance']['adversarial_mean']:.3f}",
              f"ROC AUC: {s['roc']['auc']:.4f}", ""]
    return "\n".join(lines)
