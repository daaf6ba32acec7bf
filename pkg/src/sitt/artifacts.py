"""File formats: CSV tables, parameter checkpoints, task dumps, manifests.

All CSVs are UTF-8 with LF line endings and RFC-4180-style quoting (plain
numeric cells never need quotes).  Floats are written with shortest
round-trip repr, so identical values always produce identical bytes.
Manifests are JSON written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .hermite import LinkFunction
from .model import MlpParams
from .taskgen import Task

__all__ = [
    "ARTIFACT_VERSION",
    "RunManifest",
    "format_cell",
    "write_csv",
    "save_gamma_checkpoint",
    "load_gamma_checkpoint",
    "save_model_checkpoint",
    "save_task",
    "load_task",
]

ARTIFACT_VERSION = "0.1.0"


def format_cell(value) -> str:
    """One CSV cell: shortest round-trip text for floats, quoted strings."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    text = str(value)
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def write_csv(path: str, header: list[str], rows) -> str:
    """Write rows (iterables of cells) under a header; returns the path."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_cell(c) for c in row) + "\n")
    return path


def _write_json_atomic(path: str, payload: dict) -> str:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


@dataclass
class RunManifest:
    """Record of one CLI run: config snapshot, seed, outputs, timestamps."""

    command: str
    master_seed: int
    config_text: str
    started_at: float = field(default_factory=time.time)
    outputs: list[str] = field(default_factory=list)

    def add(self, path: str) -> str:
        self.outputs.append(os.path.abspath(path))
        return path

    def write(self, path: str) -> str:
        payload = {
            "artifact_version": ARTIFACT_VERSION,
            "command": self.command,
            "master_seed": self.master_seed,
            "config": self.config_text,
            "started_at": self.started_at,
            "finished_at": time.time(),
            "outputs": sorted(self.outputs),
        }
        return _write_json_atomic(path, payload)


def _vector_rows(vec: np.ndarray):
    return ((i, float(x)) for i, x in enumerate(np.asarray(vec, dtype=float)))


def save_gamma_checkpoint(out_dir: str, gamma: np.ndarray, rho: float, stage: str) -> list[str]:
    """Attention-matrix checkpoint: gamma.csv (i,j,value) + checkpoint.json."""
    os.makedirs(out_dir, exist_ok=True)
    gamma = np.asarray(gamma, dtype=float)
    d = gamma.shape[0]
    paths = []
    rows = ((i, j, float(gamma[i, j])) for i in range(d) for j in range(d))
    paths.append(write_csv(os.path.join(out_dir, "gamma.csv"), ["i", "j", "value"], rows))
    paths.append(
        _write_json_atomic(
            os.path.join(out_dir, "checkpoint.json"),
            {"d": d, "m": None, "rho": rho, "stage": stage, "artifact_version": ARTIFACT_VERSION},
        )
    )
    return paths


def load_gamma_checkpoint(ckpt_dir: str) -> tuple[np.ndarray, dict]:
    meta_path = os.path.join(ckpt_dir, "checkpoint.json")
    gamma_path = os.path.join(ckpt_dir, "gamma.csv")
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint manifest {meta_path}: {exc}") from exc
    d = int(meta["d"])
    gamma = np.zeros((d, d))
    try:
        data = np.loadtxt(gamma_path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint matrix {gamma_path}: {exc}") from exc
    for i, j, v in data:
        gamma[int(i), int(j)] = v
    return gamma, meta


def save_model_checkpoint(
    out_dir: str,
    gamma: np.ndarray,
    u: np.ndarray,
    mlp: MlpParams,
    rho: float,
    stage: str,
) -> list[str]:
    """Full parameter checkpoint: gamma plus u, a, v, b as index,value CSVs."""
    paths = save_gamma_checkpoint(out_dir, gamma, rho, stage)
    for name, vec in (("u", u), ("a", mlp.a), ("v", mlp.v), ("b", mlp.b)):
        paths.append(
            write_csv(os.path.join(out_dir, f"{name}.csv"), ["index", "value"], _vector_rows(vec))
        )
    meta = {
        "d": int(np.asarray(gamma).shape[0]),
        "m": int(mlp.m),
        "rho": rho,
        "stage": stage,
        "artifact_version": ARTIFACT_VERSION,
    }
    paths.append(_write_json_atomic(os.path.join(out_dir, "checkpoint.json"), meta))
    return paths


def save_task(out_dir: str, task: Task, seed: int) -> list[str]:
    """Task dump: vectors as kind,index,dim,value rows plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    d = task.d
    rows = [("beta", i, d, float(task.beta[i])) for i in range(d)]
    paths = [
        write_csv(
            os.path.join(out_dir, "task_vectors.csv"),
            ["kind", "index", "dim", "value"],
            rows,
        )
    ]
    if task.subspace is not None:
        basis = task.subspace.basis
        mat_rows = (
            (i, j, float(basis[i, j]))
            for i in range(basis.shape[0])
            for j in range(basis.shape[1])
        )
        paths.append(
            write_csv(os.path.join(out_dir, "task_basis.csv"), ["i", "j", "value"], mat_rows)
        )
    manifest = {
        "d": d,
        "r": task.subspace.r if task.subspace is not None else None,
        "tau": task.tau,
        "seed": seed,
        "link_coeffs": {str(k): v for k, v in sorted(task.link.coeffs.items())},
        "artifact_version": ARTIFACT_VERSION,
    }
    paths.append(_write_json_atomic(os.path.join(out_dir, "task.json"), manifest))
    return paths


def load_task(task_dir: str) -> Task:
    from .taskgen import Subspace

    meta_path = os.path.join(task_dir, "task.json")
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read task manifest {meta_path}: {exc}") from exc
    d = int(meta["d"])
    vec_path = os.path.join(task_dir, "task_vectors.csv")
    beta = np.zeros(d)
    with open(vec_path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            kind, idx, _, value = line.rstrip("\n").split(",")
            if kind == "beta":
                beta[int(idx)] = float(value)
    subspace = None
    basis_path = os.path.join(task_dir, "task_basis.csv")
    if meta.get("r") is not None and os.path.exists(basis_path):
        r = int(meta["r"])
        basis = np.zeros((d, r))
        data = np.loadtxt(basis_path, delimiter=",", skiprows=1, ndmin=2)
        for i, j, v in data:
            basis[int(i), int(j)] = v
        subspace = Subspace(basis=basis, d=d, r=r)
    link = LinkFunction({int(k): float(v) for k, v in meta["link_coeffs"].items()})
    return Task(beta=beta, link=link, tau=float(meta["tau"]), subspace=subspace)
