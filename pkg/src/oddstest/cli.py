"""Command line interface. Every subcommand reads and writes artifacts in the output directory."""
import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import artifacts as art
from . import pipeline as pl
from .attacks import AttackSpec, DegenerateGradientWarning, cw_attack, eot_pgd_attack, tune_epsilon
from .geometry import (cone_grid, feature_ray_profile, logit_crossover, nn_distance_ratios, preimage_search,
                       roc_auc, roc_sweep)
from .meta import meta_correct, train_meta
from .odds import calibrate_thresholds, correct, detect, fit_statistics, z_scores

EXIT_CONFIG = 2
EXIT_STAGE = 3


class Workspace:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = pl.output_dir(cfg)
        os.makedirs(self.out, exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def dataset(self):
        return art.load_dataset(self.path("dataset"))

    def model(self):
        return art.load_model(self.path("model"))

    def stats(self, model):
        return art.load_stats(self.path("stats.json"), model)

    def attack(self, name):
        return art.load_attack(self.path(f"attack_{name}"))

    def epsilon(self, model, ds, norm="linf"):
        key = "attack" if norm == "linf" else "attack_l2"
        eps = self.cfg[key]["epsilon"]
        if eps:
            return float(eps)
        cache = self.path(f"epsilon_{norm}.json")
        if os.path.exists(cache):
            return art.read_json(cache)["epsilon"]
        a = self.cfg["attack"]
        x = ds.split("calibration")[0][:a["tune_samples"]]
        eps = tune_epsilon(model, x, norm, target=a["tune_target"], iterations=self.cfg[key]["iterations"],
                           seed=self.cfg[key]["seed"])
        art.write_json(cache, {"epsilon": eps, "norm": norm})
        return eps


def _attack_name(variant, norm, split):
    tag = {"pgd": f"pgd_{norm}" if norm == "l2" else "pgd", "cw": "cw", "eot-pgd": "eot"}[variant]
    return f"{tag}_{split}"


def cmd_gen_data(ws, args):
    ds = pl.make_dataset(ws.cfg)
    art.save_dataset(ws.path("dataset"), ds)
    return {"count": len(ds), "splits": {k: len(v) for k, v in ds.splits.items()}}


def cmd_train(ws, args):
    ds = ws.dataset()
    x, y, _ = ds.split("train")
    model = pl.train(pl.build_model(ws.cfg, ds), x, y, pl.train_config(ws.cfg))
    art.save_model(ws.path("model"), model)
    xt, yt, _ = ds.split("test")
    return {"test_accuracy": float(np.mean(model.predict(xt) == yt)), "checksum": model.checksum()}


def cmd_attack(ws, args):
    ds, model = ws.dataset(), ws.model()
    x, y, ids = ds.split(args.split)
    if args.limit:
        x, y, ids = x[:args.limit], y[:args.limit], ids[:args.limit]
    if args.variant == "cw":
        spec = pl.cw_spec(ws.cfg)
        res = cw_attack(model, x, spec)
        xa, ok, sd = res.x_adv, res.success, spec.to_dict()
    else:
        eps = ws.epsilon(model, ds, args.norm)
        spec = pl.attack_spec(ws.cfg, eps, args.norm, section="attack" if args.norm == "linf" else "attack_l2")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateGradientWarning)
            if args.variant == "eot-pgd":
                stats, _ = ws.stats(model)
                spec = AttackSpec("eot-pgd", spec.norm, spec.epsilon, spec.alpha, spec.iterations,
                                  seed=ws.cfg["eot"]["seed"], eot_samples=ws.cfg["eot"]["samples"], noise=stats.grid)
                xa = eot_pgd_attack(model, x, spec, ids=ids)
            else:
                xa = pl.quiet_pgd(model, x, spec, ids)
        ok, sd = model.predict(xa) != model.predict(x), spec.to_dict()
    name = _attack_name(args.variant, args.norm, args.split)
    art.save_attack(ws.path(f"attack_{name}"), xa, ok, ids, sd)
    return {"attack": name, "success_rate": float(np.mean(ok)), "adversarial_accuracy": float(np.mean(
        model.predict(xa) == y))}


def cmd_fit_stats(ws, args):
    ds, model = ws.dataset(), ws.model()
    x, y, _ = ds.split("train")
    grid = pl.noise_grid(ws.cfg, ws.epsilon(model, ds), x.shape[1])
    stats = fit_statistics(model, x, y, grid, ws.cfg["odds"]["min_count"])
    stats = pl.replace(stats, aggregation=ws.cfg["odds"]["aggregation"], vote=ws.cfg["odds"]["vote"])
    art.save_stats(ws.path("stats.json"), stats)
    return {"cells": len(grid), "counts": stats.counts.tolist()}


def cmd_calibrate(ws, args):
    ds, model = ws.dataset(), ws.model()
    stats, meta = ws.stats(model)
    x, _, ids = ds.split("calibration")
    xa, _, aids, _ = ws.attack(args.attack)
    zc = z_scores(model, x, stats, ids)
    za = z_scores(model, xa, stats, aids)
    ok = za.pred != model.predict(x[np.searchsorted(ids, aids)])
    stats = calibrate_thresholds(stats, zc, za[np.flatnonzero(ok)], args.target_fpr or ws.cfg["odds"]["target_fpr"])
    art.save_stats(ws.path("stats.json"), stats, meta)
    return stats.calibration


def _scores(ws, model, stats, split, attack):
    ds = ws.dataset()
    x, y, ids = ds.split(split)
    if attack:
        xa, _, aids, _ = ws.attack(attack)
        y = ds.y[aids]
        return z_scores(model, xa, stats, aids), y
    return z_scores(model, x, stats, ids), y


def cmd_detect(ws, args):
    model = ws.model()
    stats, meta = ws.stats(model)
    z, y = _scores(ws, model, stats, args.split, args.attack)
    rows = art.detection_rows(z, stats, meta)
    name = f"detections_{args.attack or args.split}.csv"
    art.write_csv(ws.path(name), rows)
    return {"report": name, "flag_rate": float(detect(z, stats).mean())}


def cmd_correct(ws, args):
    model = ws.model()
    stats, meta = ws.stats(model)
    z, y = _scores(ws, model, stats, args.split, args.attack)
    res = {"accuracy": float(np.mean(z.pred == y)), "argmax_corrected_accuracy": float(np.mean(correct(z, stats) == y))}
    if meta is not None:
        res["meta_corrected_accuracy"] = float(np.mean(meta_correct(z, meta, stats) == y))
    return res


def cmd_meta_train(ws, args):
    model = ws.model()
    stats, _ = ws.stats(model)
    ds = ws.dataset()
    xa, _, ids, spec = ws.attack(args.attack)
    z = z_scores(model, xa, stats, ids)
    meta = train_meta(z, ds.y[ids], stats, ws.cfg["meta"]["l2"], ws.cfg["meta"]["min_count"],
                      attack=f"{spec.get('variant')}-{spec.get('norm')}")
    art.save_stats(ws.path("stats.json"), stats, meta)
    return {"fallback_classes": meta.fallback, "info": meta.info}


def cmd_analyze(ws, args):
    ds, model = ws.dataset(), ws.model()
    g = ws.cfg["geometry"]
    x, y, ids = ds.split("test")
    xa_all, _, aids, _ = ws.attack(args.attack)
    pos = np.searchsorted(ids, aids)
    x0 = x[pos]
    ok = np.flatnonzero(model.predict(x0) != model.predict(xa_all))[:g["samples"]]
    x0, x1 = x0[ok], xa_all[ok]
    kind = args.kind
    if kind == "crossover":
        rows = [{"id": int(aids[i]), "t": logit_crossover(model, a, b)} for i, a, b in zip(ok, x0, x1)]
        art.write_csv(ws.path("crossover.csv"), rows)
        ts = np.array([r["t"] for r in rows])
        return {"mean": float(ts.mean()), "std": float(ts.std())}
    if kind == "nnratio":
        corpus = np.concatenate([ds.split(s)[0] for s in ("train", "calibration", "holdout")])
        r = nn_distance_ratios(x1, x0, corpus)
        art.write_csv(ws.path("nnratio.csv"), [{"id": int(aids[i]), "ratio": float(v)} for i, v in zip(ok, r)])
        return {"mean": float(r.mean()), "std": float(r.std())}
    if kind == "ray":
        t = np.array(g["ray_t_grid"])
        p = [feature_ray_profile(model, a, b - a, t, int(model.predict(a)), int(model.predict(b))) for a, b in zip(x0, x1)]
        m = np.stack([np.mean([q.norm for q in p], 0), np.mean([q.alignment for q in p], 0)], 1)
        art.write_matrix_csv(ws.path("ray_profile.csv"), m, "t", t, [0, 1],
                             {"columns": ["norm", "alignment"], "samples": len(p)})
        return {"samples": len(p)}
    if kind == "cone":
        s, t = np.array(g["s_grid"]), np.array(g["t_grid"])
        c = np.mean([cone_grid(model, a, b - a, s, t, g["cone_draws"], g["seed"] + k).values
                     for k, (a, b) in enumerate(zip(x0[:g["cone_samples"]], x1[:g["cone_samples"]]))], 0)
        art.write_matrix_csv(ws.path("cone.csv"), c, "t", t, s, {"draws": g["cone_draws"], "clip": True})
        return {"shape": list(c.shape)}
    if kind == "preimage":
        rng = np.random.default_rng([g["seed"], 11])
        imps = []
        for a, b in zip(x0, x1):
            d = model.features(b) - model.features(a)
            r = rng.standard_normal(len(d))
            r[-1] = 0.0
            imps.append(preimage_search(model, a, r * np.linalg.norm(d) / np.linalg.norm(r))[1])
        return {"improved_fraction": float(np.mean(np.array(imps) > 0))}
    if kind == "roc":
        stats, _ = ws.stats(model)
        xc, yc, ic = ds.split("calibration")
        xca, _, cids, _ = ws.attack(args.roc_attack)
        zc = z_scores(model, xc, stats, ic)
        za = z_scores(model, xca, stats, cids)
        keep = np.flatnonzero(za.pred != zc.pred[np.searchsorted(ic, cids)])
        rows = roc_sweep(stats, zc, za[keep], yc, ds.y[cids][keep], g["roc_fprs"])
        art.write_csv(ws.path("roc.csv"), [{"target_fpr": f, "fpr": r[0], "tpr": r[1], "clean_accuracy": r[2],
                                            "adversarial_accuracy": r[3]} for f, r in zip(g["roc_fprs"], rows)])
        return {"auc": roc_auc(rows)}
    raise ValueError(kind)


def cmd_sweep(ws, args):
    ds, model = ws.dataset(), ws.model()
    stats, meta = ws.stats(model)
    n = ws.cfg["sweeps"]["samples"]
    x, y, ids = ds.split("test")
    x, y, ids = x[:n], y[:n], ids[:n]
    spec = pl.attack_spec(ws.cfg, ws.epsilon(model, ds))
    if args.kind == "bernoulli":
        xa = pl.quiet_pgd(model, x, spec, ids)
        rows = pl.effective_strength_sweep(model, stats, meta, x, xa, y, ws.cfg["sweeps"]["bernoulli_q"],
                                           ws.cfg["seed"])
    elif args.kind == "epsilon":
        rows = pl.epsilon_sweep(model, stats, meta, x, y, spec, ws.cfg["sweeps"]["epsilon_factors"], ids)
    else:
        rows = pl.iterations_sweep(model, stats, meta, x, y, spec, ws.cfg["sweeps"]["iterations"], ids)
    art.write_csv(ws.path(f"sweep_{args.kind}.csv"), rows)
    return {"rows": rows}


def cmd_run_all(ws, args):
    s = pl.run_pipeline(ws.cfg, log=lambda m: print(m, file=sys.stderr, flush=True))
    return {k: s[k] for k in ("accuracy", "detection", "correction")}


def build_parser():
    p = argparse.ArgumentParser(prog="oddstest", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (authoritative; flags override)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set noise.samples=64")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, parents=[common], **kw)
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, help="generate the blob dataset")
    add("train", cmd_train, help="train the classifier")
    sp = add("attack", cmd_attack, help="attack one split")
    sp.add_argument("--split", default="test", choices=["train", "calibration", "holdout", "test"])
    sp.add_argument("--variant", default="pgd", choices=["pgd", "cw", "eot-pgd"])
    sp.add_argument("--norm", default="linf", choices=["linf", "l2"])
    sp.add_argument("--limit", type=int, default=0)
    add("fit-stats", cmd_fit_stats, help="fit perturbed log-odds statistics")
    sp = add("calibrate", cmd_calibrate, help="calibrate thresholds")
    sp.add_argument("--attack", default="pgd_calibration")
    sp.add_argument("--target-fpr", type=float)
    for name, fn in (("detect", cmd_detect), ("correct", cmd_correct)):
        sp = add(name, fn, help=f"{name} samples of a split or attack")
        sp.add_argument("--split", default="test")
        sp.add_argument("--attack", help="attack artifact name, e.g. pgd_test")
    sp = add("meta-train", cmd_meta_train, help="train the logistic correctors")
    sp.add_argument("--attack", default="pgd_train")
    sp = add("analyze", cmd_analyze, help="geometry diagnostics")
    sp.add_argument("kind", choices=["ray", "cone", "crossover", "nnratio", "roc", "preimage"])
    sp.add_argument("--attack", default="pgd_test")
    sp.add_argument("--roc-attack", default="pgd_calibration")
    sp = add("sweep", cmd_sweep, help="parameter sweeps")
    sp.add_argument("kind", choices=["epsilon", "bernoulli", "iterations"])
    add("run-all", cmd_run_all, help="full pipeline")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = pl.load_config(args.config)
        for item in args.set:
            if "=" not in item:
                raise pl.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            pl.set_override(cfg, *item.split("=", 1))
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out:
            cfg["output_dir"] = args.out
        pl._validate(cfg)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res = args.fn(Workspace(cfg), args)
    except pl.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # stage failure, reported with its stage tag
        print(f"error: stage '{args.command}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(art.dumps(res), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
