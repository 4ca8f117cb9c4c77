"""Run records and their on-disk layout.

A run directory holds::

    meta.json          config snapshot, sampler name, seed, shapes
    trajectory.csv     step, t, noise_level, scale, grad_norm_mean, grad_norm_max,
                       applied_norm_mean, confidence_mean
    samples.csv        x0, ..., x{d-1}, class         (one row per chain)
    states_xt.npy      (S, n, d) reverse-process states
    states_x0.npy      (S, n, d) predicted clean samples
    *.npy              the remaining RunRecord arrays (t, scale, per-chain norms, ...)

Directories are written into a temporary sibling and renamed into place, so a
failed write never leaves a partial run behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRAJECTORY_COLUMNS = [
    "step", "t", "noise_level", "scale", "grad_norm_mean", "grad_norm_max",
    "applied_norm_mean", "confidence_mean",
]


@dataclass
class RunRecord:
    sampler: str
    t: np.ndarray            # (S,) step index per entry, in sampling order
    noise_level: np.ndarray  # (S,) alpha_bar_t for DDPM/CFG, noise std for EDM
    scale: np.ndarray        # (S,) guidance scale applied at the step
    xs: np.ndarray | None    # (S, n, d) state entering the step
    x0s: np.ndarray | None   # (S, n, d) predicted clean sample at the step
    grad_norm: np.ndarray    # (S, n) raw classifier gradient norm
    applied_norm: np.ndarray  # (S, n) norm of the vector actually added
    confidence: np.ndarray   # (S, n) classifier softmax_y at its input (nan if unguided)
    samples: np.ndarray      # (n, d)
    labels: np.ndarray       # (n,) conditioning class per chain
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def num_steps(self) -> int:
        return int(self.t.size)

    @property
    def n(self) -> int:
        return int(self.samples.shape[0])


def fmt(v) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_file_atomic(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


class StagedDir:
    """Build a directory in a temp location and move it into place on commit."""

    def __init__(self, target):
        self.target = Path(target)
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=self.target.parent, prefix=f".{self.target.name}."))

    def write(self, name: str, data: str | bytes) -> None:
        p = self.tmp / name
        p.write_bytes(data.encode() if isinstance(data, str) else data)

    def write_npy(self, name: str, a: np.ndarray) -> None:
        self.write(name, _npy_bytes(a))

    def commit(self) -> Path:
        if self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self.tmp, self.target)
        return self.target

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)

    def __enter__(self) -> "StagedDir":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            self.abort()


def trajectory_rows(run: RunRecord):
    for k in range(run.num_steps):
        gn = run.grad_norm[k]
        conf = run.confidence[k]
        yield [
            k, int(run.t[k]), float(run.noise_level[k]), float(run.scale[k]),
            float(gn.mean()), float(gn.max()), float(run.applied_norm[k].mean()),
            float(conf.mean()),
        ]


def stage_run(run: RunRecord, staged: StagedDir) -> None:
    d = run.samples.shape[1]
    meta = {
        "sampler": run.sampler,
        "seed": int(run.seed),
        "n": run.n,
        "dim": d,
        "steps": run.num_steps,
        "config": run.config,
    }
    staged.write("meta.json", dumps_json(meta))
    staged.write("trajectory.csv", csv_text(TRAJECTORY_COLUMNS, trajectory_rows(run)))
    header = [f"x{i}" for i in range(d)] + ["class"]
    rows = ([*map(float, x), int(c)] for x, c in zip(run.samples, run.labels))
    staged.write("samples.csv", csv_text(header, rows))
    staged.write_npy("t.npy", run.t)
    staged.write_npy("noise_level.npy", run.noise_level)
    staged.write_npy("scale.npy", run.scale)
    staged.write_npy("grad_norm.npy", run.grad_norm)
    staged.write_npy("applied_norm.npy", run.applied_norm)
    staged.write_npy("confidence.npy", run.confidence)
    staged.write_npy("samples.npy", run.samples)
    staged.write_npy("labels.npy", run.labels)
    if run.xs is not None:
        staged.write_npy("states_xt.npy", run.xs)
    if run.x0s is not None:
        staged.write_npy("states_x0.npy", run.x0s)


def save_run(run: RunRecord, directory) -> Path:
    with StagedDir(directory) as staged:
        stage_run(run, staged)
        return staged.commit()


def load_run(directory) -> RunRecord:
    d = Path(directory)
    if not (d / "meta.json").is_file():
        raise FileNotFoundError(f"{d}: no meta.json, not a run directory")
    meta = json.loads((d / "meta.json").read_text())

    def arr(name):
        p = d / name
        return np.load(p, allow_pickle=False) if p.is_file() else None

    missing = [n for n in ("t.npy", "samples.npy", "labels.npy") if not (d / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    return RunRecord(
        sampler=meta["sampler"],
        t=arr("t.npy"),
        noise_level=arr("noise_level.npy"),
        scale=arr("scale.npy"),
        xs=arr("states_xt.npy"),
        x0s=arr("states_x0.npy"),
        grad_norm=arr("grad_norm.npy"),
        applied_norm=arr("applied_norm.npy"),
        confidence=arr("confidence.npy"),
        samples=arr("samples.npy"),
        labels=arr("labels.npy"),
        seed=int(meta["seed"]),
        config=meta.get("config", {}),
    )
