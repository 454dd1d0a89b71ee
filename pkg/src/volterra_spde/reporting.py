"""Deterministic result files: CSV tables, JSON summaries, run manifests,
and gnuplot-style plot data.

Byte-for-byte reproducibility contract: given the same config and master
seed, every emitted file except the manifest (which carries wall-clock
timestamps) is identical across re-runs, machines, and worker counts.
Floats are written with 17 significant digits so values round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

CSV_COLUMNS = ("experiment", "epsilon", "t", "observable", "mean", "half_width",
               "M", "seed")

FLOAT_FMT = "%.17g"


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT % float(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, rows):
    """Write statistic rows (tuples matching CSV_COLUMNS) to ``path``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            if len(row) != len(CSV_COLUMNS):
                raise ValueError(f"row has {len(row)} fields, want {len(CSV_COLUMNS)}")
            writer.writerow([_fmt(v) for v in row])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (bool, int, float, str)) or obj is None:
        return obj
    return str(obj)


def write_summary(path, summary):
    """Write a JSON summary with sorted keys and stable float text."""
    with open(path, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


@dataclass
class RunManifest:
    """Provenance sidecar for one CLI invocation."""

    experiment: str
    config_hash: str
    master_seed: int
    package_version: str
    started_at: str
    finished_at: str = ""
    files: list = field(default_factory=list)

    @staticmethod
    def hash_config(config_text: str, overrides: dict | None = None) -> str:
        blob = config_text + "\n" + json.dumps(_jsonable(overrides or {}), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self, path):
        payload = {
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "package_version": self.package_version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "files": sorted(self.files),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def emit_plotdata(out_dir, experiment, summary):
    """Write one whitespace-delimited .dat file per fit and per curve.

    Column layout is x, y, half_width with a '#' header naming the source.
    File names are deterministic functions of the experiment id and the
    curve/fit key.  An empty summary produces no files.
    """
    written = []
    curves = dict(summary.get("curves", {}))
    for key, fit in summary.get("fits", {}).items():
        pts = fit.get("points", fit)
        curves[f"fit_{key}"] = {
            "x": pts["x"], "y": pts["y"],
            "half_width": pts.get("half_width", [0.0] * len(pts["x"])),
        }
    for key in sorted(curves):
        curve = curves[key]
        x = np.asarray(curve["x"], dtype=float)
        y = np.asarray(curve["y"], dtype=float)
        hw = np.asarray(curve.get("half_width", np.zeros_like(x)), dtype=float)
        name = f"{experiment}_{key}.dat".replace(" ", "_").replace("/", "-")
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(f"# {experiment} {key}\n# x y half_width\n")
            for xi, yi, hi in zip(x, y, hw):
                fh.write(f"{FLOAT_FMT % xi} {FLOAT_FMT % yi} {FLOAT_FMT % hi}\n")
        written.append(path)
    return written
