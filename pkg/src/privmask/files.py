"""Dataset CSV + metadata sidecar, and estimate JSON files.

A dataset is ``<name>.csv`` with header ``y,x1..xp[,z1..zq]`` plus
``<name>.meta.json`` holding ``sigma, n, p, q, masked, created_by``.
Floats are written with 17 significant digits so they round-trip exactly.
"""
from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from . import __version__
from .estimators import CoefficientEstimate
from .model import MaskedDataset, RawDataset

__all__ = [
    "DatasetError",
    "meta_path",
    "write_dataset",
    "read_dataset",
    "read_raw",
    "read_masked",
    "estimate_to_dict",
    "failure_dict",
]

PathLike = Union[str, Path]


class DatasetError(ValueError):
    """A dataset file violates the format contract."""


def meta_path(csv_path: PathLike) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def _header(p: int, q: int):
    return ["y"] + [f"x{j}" for j in range(1, p + 1)] + [f"z{j}" for j in range(1, q + 1)]


def write_dataset(path: PathLike, y, W, p: int, q: int, sigma: float, masked: bool) -> Tuple[Path, Path]:
    path = Path(path)
    y = np.asarray(y, dtype=float).reshape(-1)
    W = np.asarray(W, dtype=float).reshape(y.size, p + q)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(p, q))
        for yi, row in zip(y, W):
            w.writerow(["%.17g" % yi] + ["%.17g" % v for v in row])
    meta = {"sigma": float(sigma), "n": int(y.size), "p": int(p), "q": int(q),
            "masked": bool(masked), "created_by": f"privmask {__version__}"}
    mp = meta_path(path)
    mp.write_text(json.dumps(meta, indent=2) + "\n")
    return path, mp


def read_dataset(path: PathLike):
    """Return ``(y, W, meta)`` after checking header and metadata."""
    path = Path(path)
    mp = meta_path(path)
    if not path.exists():
        raise DatasetError(f"no such dataset: {path}")
    if not mp.exists():
        raise DatasetError(f"missing metadata file {mp}")
    try:
        meta = json.loads(mp.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"bad metadata JSON: {exc}") from exc
    for k in ("n", "p", "q", "masked"):
        if k not in meta:
            raise DatasetError(f"metadata lacks {k!r}")
    if meta["masked"] and meta.get("sigma") is None:
        raise DatasetError("masked dataset metadata must carry sigma")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError("empty dataset file")
    header = rows[0]
    p, q = int(meta["p"]), int(meta["q"])
    if header != _header(p, q):
        if not (header and header[0] == "y" and all(re.fullmatch(r"[xz]\d+", h) for h in header[1:])):
            raise DatasetError("header must be y, x1..xp, z1..zq")
        raise DatasetError(f"header does not match metadata p={p}, q={q}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, 1 + p + q)
    except ValueError as exc:
        raise DatasetError(f"malformed row: {exc}") from exc
    if data.shape[0] != int(meta["n"]):
        raise DatasetError(f"row count {data.shape[0]} != metadata n {meta['n']}")
    return data[:, 0], data[:, 1:], meta


def read_raw(path: PathLike) -> RawDataset:
    y, W, meta = read_dataset(path)
    if meta["masked"]:
        raise DatasetError("dataset is already masked")
    p = int(meta["p"])
    try:
        return RawDataset(y, W[:, :p], W[:, p:] if meta["q"] else None)
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc


def read_masked(path: PathLike, sigma: Optional[float] = None) -> MaskedDataset:
    """Read any dataset for analysis; raw files are treated as sigma = 0."""
    y, W, meta = read_dataset(path)
    s = meta.get("sigma", 0.0 if not meta["masked"] else None) if sigma is None else sigma
    if s is None:
        raise DatasetError("sigma missing from metadata")
    try:
        return MaskedDataset(y, W, float(s), int(meta["p"]), int(meta["q"]))
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc


def estimate_to_dict(est: CoefficientEstimate) -> dict:
    se = est.se
    coefs = []
    for j, b in enumerate(est.beta1_hat):
        lo, hi = est.ci[j] if est.ci else (None, None)
        coefs.append({"name": f"x{j + 1}", "estimate": float(b),
                      "se": None if se is None else float(se[j]),
                      "ci_lower": lo, "ci_upper": hi})
    diag = {"converged": True, "condition_warnings": 0, "failure": None}
    diag.update(est.diagnostics)
    return {
        "method": est.method.value,
        "theta_hat": [float(v) for v in est.theta_hat],
        "phi_hat": None if est.phi_hat is None else float(est.phi_hat),
        "beta1_hat": [float(v) for v in est.beta1_hat],
        "coefficients": coefs,
        "alpha": est.alpha,
        "diagnostics": diag,
    }


def failure_dict(method: str, alpha: float, reason: str) -> dict:
    return {"method": method, "theta_hat": None, "phi_hat": None, "beta1_hat": None,
            "coefficients": [], "alpha": alpha,
            "diagnostics": {"converged": False, "condition_warnings": 0, "failure": reason}}
