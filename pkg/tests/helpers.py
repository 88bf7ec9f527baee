"""Shared fixtures for command-line runs."""

import csv
import io
import os

import yaml

from kernel_trajectory.cli import TIME_COLUMNS, main

TINY = {
    "extends": "toy",
    "data": {
        "batch_schedule": [3, 4, 6],
        "train_groups": [
            {"composition": "LIN0 + PER0", "theta": [0.0, 0.3, 1.0, 2.0, 1.0, 0.5], "users": 2},
            {"composition": "SE0", "theta": [1.0, 1.0, 0.5], "users": 2},
        ],
        "test_groups": [
            {"composition": "LIN0 + PER0", "theta": [0.0, 0.3, 1.0, 2.0, 1.0, 0.5], "users": 2},
            {"composition": "SE0", "theta": [1.0, 1.0, 0.5], "users": 2},
        ],
    },
    "sampler": {"sweeps": 2, "mh_iters": 3, "evidence_samples": 8, "new_table_draws": 2,
                "restarts": 1, "maxfev": 60, "select_top": 2},
    "cks": {"max_depth": 1, "restarts": 1, "maxfev": 60},
    "evaluate": {"methods": ["trajectory", "cks", "fixed:SE0"], "restarts": 1},
}


def write_config(directory, raw=None):
    path = os.path.join(directory, "tiny.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(raw or TINY, fh)
    return path


def run_all(config, out, seed=0):
    """Run every command in pipeline order; returns the exit codes."""
    common = ["--config", config, "--seed", str(seed), "--out", out]
    return [main([cmd] + common) for cmd in ("gen-data", "train", "evaluate", "run-cks",
                                             "export-dot")]


def comparable(path):
    """File bytes, with wall-time columns blanked in CSV files."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not path.endswith(".csv"):
        return raw
    rows = list(csv.reader(io.StringIO(raw.decode())))
    drop = [i for i, c in enumerate(rows[0]) if c in TIME_COLUMNS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow(["" if i in drop else v for i, v in enumerate(row)])
    return buf.getvalue().encode()


def tree(root):
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            out[os.path.relpath(path, root)] = comparable(path)
    return out
