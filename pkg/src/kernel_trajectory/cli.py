"""Command-line driver: ``kernel-trajectory <command> --config toy --out runs/toy``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from collections import Counter

import numpy as np

from .cks import cks_search
from .config import RunConfig, load_config
from .data import gen_synthetic, load_csv_cohort, read_cohort, write_cohort
from .gp import log_predictive_density, posterior_predict
from .grammar import ROOT, BaseTerm, KINDS, render
from .hyper import FitFailure, fit_seed, map_fit
from .trajectory import (
    TrajectoryModel,
    export_dot,
    predict_next,
    select_structure,
    structure_complexity,
    train,
)

log = logging.getLogger("kernel_trajectory")

METRIC_COLUMNS = ["user", "t", "method", "n_train", "n_test", "selected", "rmse",
                  "test_log_likelihood", "select_seconds", "fit_seconds", "train_seconds",
                  "status"]
TIME_COLUMNS = ("select_seconds", "fit_seconds", "train_seconds")


class CommandError(RuntimeError):
    pass


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return repr(x) if isinstance(x, float) else str(x)


def _write_csv(path, columns, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def _write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# cohorts


def _load_cohorts(cfg: RunConfig, data_dir):
    """``(train, test)`` cohorts from generated files or the configured CSV."""
    if cfg.data.get("kind", "synthetic") == "synthetic":
        out = []
        for split in ("train", "test"):
            manifest = os.path.join(data_dir, f"{split}_manifest.json")
            if not os.path.exists(manifest):
                raise CommandError(f"missing {manifest}; run gen-data first")
            out.append(read_cohort(manifest))
        return tuple(out)
    d = cfg.data
    path = d["path"]
    if not os.path.exists(path):
        raise CommandError(f"missing data file {path}")
    kwargs = dict(target_column=d["target_column"], chunk_size=int(d.get("chunk_size", 40)),
                  scale=bool(d.get("scale", True)), user_column=d.get("user_column", "user_id"),
                  covariate_columns=d.get("covariate_columns"))
    everyone = load_csv_cohort(path, scale=False, **{k: v for k, v in kwargs.items()
                                                       if k != "scale"})
    ids = [u.user_id for u in everyone.users]
    n_test = int(d.get("test_users", 0))
    if not 0 < n_test < len(ids):
        raise CommandError("test_users must leave at least one training user")
    train_c = load_csv_cohort(path, users=ids[:-n_test], **kwargs)
    test_c = load_csv_cohort(path, users=ids[-n_test:], scaler=train_c.scaler, **kwargs)
    return train_c, test_c


def _customers(cohort):
    return {(m, t): u.cumulative(t) for m, u in enumerate(cohort.users)
            for t in range(1, u.n_batches + 1)}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out, args):
    for split in ("train", "test"):
        spec = cfg.cohort_spec(split)
        cohort = gen_synthetic(spec)
        write_cohort(cohort, os.path.join(out, f"{split}.csv"),
                     os.path.join(out, f"{split}_manifest.json"), spec)
        log.info("wrote %d %s users", len(cohort), split)


def _new_model(cfg: RunConfig, cohort):
    return TrajectoryModel(cfg.pool(cohort.users[0].batches[0].dim), cfg.prior(), cfg.sampler(),
                           cfg.seed, [u.user_id for u in cohort.users])


def cmd_train(cfg: RunConfig, out, args):
    train_c, _ = _load_cohorts(cfg, args.data or out)
    model = _new_model(cfg, train_c)
    every = cfg.checkpoint_every
    snapshots = []
    rows = []

    def checkpoint(i, mdl):
        n_nodes, n_terms = structure_complexity(mdl)
        rows.append({"sweep": i + 1, "joint_log_likelihood": mdl.trace[-1],
                     "n_restaurants": len(mdl.restaurants),
                     "n_tables": sum(len(r.tables) for r in mdl.restaurants.values()),
                     "n_compositions": n_nodes, "n_terms": n_terms})
        if (i + 1) % every == 0:
            text = mdl.to_json()
            snapshots.append(text)
            _write_text(os.path.join(out, "checkpoints", f"sweep_{i + 1:04d}.json"), text)
            _write_text(os.path.join(out, "dot", f"sweep_{i + 1:04d}.dot"), export_dot(mdl))

    train(model, _customers(train_c), cfg.sweeps, cfg.seed, callback=checkpoint)
    chosen = model
    if snapshots and cfg.select_top > 0:
        chosen = select_structure([TrajectoryModel.from_json(s) for s in snapshots],
                                  cfg.select_top)
    chosen_sweep = len(chosen.trace)
    for row in rows:
        row["selected"] = int(row["sweep"] == chosen_sweep)
    _write_text(os.path.join(out, "model.json"), chosen.to_json())
    _write_text(os.path.join(out, "model.dot"), export_dot(chosen))
    _write_csv(os.path.join(out, "trace.csv"),
               ["sweep", "joint_log_likelihood", "n_restaurants", "n_tables",
                "n_compositions", "n_terms", "selected"], rows)
    log.info("selected sweep %d of %d", chosen_sweep, cfg.sweeps)


def _load_model(path):
    if not os.path.exists(path):
        raise CommandError(f"missing model file {path}")
    with open(path) as fh:
        return TrajectoryModel.from_json(fh.read())


def _score(cfg, user, t, comp, root):
    """MAP fit on batches ``1..t`` and predictive scores on batch ``t+1``.

    The last batch has nothing to score, so its row carries no metrics.
    """
    if t == user.n_batches:
        return {"fit_seconds": 0.0}
    train_d = user.cumulative(t)
    start = time.perf_counter()
    theta, _ = map_fit(train_d, comp, cfg.prior(), cfg.eval_restarts,
                       np.random.default_rng(fit_seed(root, train_d, comp)))
    fit_s = time.perf_counter() - start
    nxt = user.batches[t]
    pred = posterior_predict(train_d, nxt.X, comp, theta)
    return {"n_test": nxt.n, "rmse": float(np.sqrt(np.mean((pred.mean - nxt.y) ** 2))),
            "test_log_likelihood": float(np.mean(log_predictive_density(pred, nxt.y))),
            "fit_seconds": fit_s}


def _bases(dim):
    return [BaseTerm(k, d) for k in KINDS for d in range(dim)]


def _evaluate_user(cfg, method, user, model):
    kind, fixed = cfg.method_kind(method)
    rows, prev = [], ROOT
    cks = cfg.cks
    for t in range(1, user.n_batches + 1):
        data = user.cumulative(t)
        row = {"user": user.user_id, "t": t, "method": method, "n_train": data.n,
               "train_seconds": 0.0, "status": "ok"}
        start = time.perf_counter()
        try:
            if kind == "trajectory":
                prev = comp = predict_next(model, prev, data, cfg.seed)
            elif kind == "cks":
                comp, _, _ = cks_search(data, _bases(data.dim), cks["max_depth"], cfg.prior(),
                                        cks["restarts"], fit_seed(cfg.seed, data, ROOT),
                                        cks["maxfev"])
            else:
                comp = fixed
            row["select_seconds"] = time.perf_counter() - start
            row["selected"] = render(comp)
            row.update(_score(cfg, user, t, comp, cfg.seed))
        except (FitFailure, np.linalg.LinAlgError, ValueError) as exc:
            row["select_seconds"] = time.perf_counter() - start
            row["status"] = f"failed: {type(exc).__name__}"
        rows.append(row)
    return rows


def cmd_evaluate(cfg: RunConfig, out, args):
    _, test_c = _load_cohorts(cfg, args.data or out)
    methods = args.methods or cfg.methods
    model = None
    if "trajectory" in methods:
        model = _load_model(args.model or os.path.join(out, "model.json"))
    rows = []
    for method in methods:
        cfg.method_kind(method)
        for user in test_c.users:
            rows.extend(_evaluate_user(cfg, method, user, model))
    _write_csv(os.path.join(out, "metrics.csv"), METRIC_COLUMNS, rows)
    labels = {u.user_id: u.label for u in test_c.users}
    if all(lbl is not None for lbl in labels.values()):
        final = {u.user_id: u.n_batches for u in test_c.users}
        counts = Counter((r["method"], render(labels[r["user"]]), r.get("selected", ""))
                         for r in rows if r["t"] == final[r["user"]])
        conf = [{"method": m, "true": tr, "predicted": p, "count": n}
                for (m, tr, p), n in sorted(counts.items())]
        _write_csv(os.path.join(out, "confusion.csv"),
                   ["method", "true", "predicted", "count"], conf)


def cmd_run_cks(cfg: RunConfig, out, args):
    train_c, test_c = _load_cohorts(cfg, args.data or out)
    cohort = train_c if args.split == "train" else test_c
    cks = cfg.cks
    rows = []
    for user in cohort.users:
        for t in range(1, user.n_batches + 1):
            data = user.cumulative(t)
            start = time.perf_counter()
            comp, theta, trace = cks_search(data, _bases(data.dim), cks["max_depth"],
                                            cfg.prior(), cks["restarts"],
                                            fit_seed(cfg.seed, data, ROOT), cks["maxfev"])
            rows.append({"user": user.user_id, "t": t, "n_train": data.n,
                         "selected": render(comp), "bic": trace.scores[-1],
                         "depth": trace.records[-1].depth,
                         "theta": " ".join(repr(float(v)) for v in theta.values),
                         "select_seconds": time.perf_counter() - start})
    _write_csv(os.path.join(out, "cks.csv"),
               ["user", "t", "n_train", "selected", "bic", "depth", "theta", "select_seconds"],
               rows)


def cmd_export_dot(cfg, out, args):
    model = _load_model(args.model or os.path.join(out, "model.json"))
    target = args.dot or os.path.join(out, "model.dot")
    _write_text(target, export_dot(model))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "run-cks": cmd_run_cks, "export-dot": cmd_export_dot}


def build_parser():
    parser = argparse.ArgumentParser(prog="kernel-trajectory",
                                     description="Kernel trajectory experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default="toy", help="preset name or YAML path")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "evaluate", "run-cks"):
            p.add_argument("--data", default=None, help="cohort directory (default: --out)")
        if name in ("evaluate", "export-dot"):
            p.add_argument("--model", default=None, help="model JSON (default: OUT/model.json)")
        if name == "evaluate":
            p.add_argument("--methods", nargs="+", default=None,
                           help="trajectory, cks or fixed:<composition>")
        if name == "run-cks":
            p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "export-dot":
            p.add_argument("--dot", default=None, help="output DOT path")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](cfg, args.out, args)
    except Exception as exc:  # report every failure as one JSON line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
