"""Linear basis for compressing normalized cumulative curves.

Top-k principal directions of the mean-centered training curves, with a
deterministic sign convention so serialized bases are reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_COMPONENTS = 10


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray                # (T,)
    components: np.ndarray          # (k, T), orthonormal rows
    explained_variance: np.ndarray  # (k,), nonincreasing

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def horizon(self) -> int:
        return self.components.shape[1]


def fit(curves: np.ndarray, k: int = DEFAULT_COMPONENTS) -> PcaBasis:
    """Fit the top-k basis via SVD of the centered curve matrix.

    Signs are fixed so each component's largest-magnitude entry is positive.
    Rank-deficient data still yields k components (trailing variances ~0).
    """
    curves = np.asarray(curves, dtype=np.float64)
    if curves.ndim != 2:
        raise ValueError("curves must be an n x T matrix")
    n, horizon = curves.shape
    if n <= k:
        raise ValueError(f"need more curves ({n}) than components ({k})")
    mean = curves.mean(axis=0)
    centered = curves - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=True)
    components = vt[:k].copy()
    svals = np.concatenate([svals, np.zeros(max(0, horizon - len(svals)))])
    variance = svals[:k] ** 2 / (n - 1)
    for j in range(k):
        pivot = np.argmax(np.abs(components[j]))
        if components[j, pivot] < 0:
            components[j] = -components[j]
    return PcaBasis(mean=mean, components=components, explained_variance=variance)


def project(basis: PcaBasis, curves: np.ndarray) -> np.ndarray:
    """Code(s) z = Pi (c - mean); accepts a single curve or an n x T batch."""
    curves = np.asarray(curves, dtype=np.float64)
    if curves.shape[-1] != basis.horizon:
        raise ValueError(f"curve length {curves.shape[-1]} != basis horizon {basis.horizon}")
    return (curves - basis.mean) @ basis.components.T


def reconstruct(basis: PcaBasis, codes: np.ndarray) -> np.ndarray:
    """Curve(s) c = Pi^T z + mean; accepts a single code or an n x k batch."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[-1] != basis.k:
        raise ValueError(f"code length {codes.shape[-1]} != basis k {basis.k}")
    return codes @ basis.components + basis.mean


def reconstruction_rmse(basis: PcaBasis, curves: np.ndarray) -> float:
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    recon = reconstruct(basis, project(basis, curves))
    return float(np.sqrt(np.mean((recon - curves) ** 2)))


def _checksum(*arrays: np.ndarray) -> str:
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return digest.hexdigest()


def save(basis: PcaBasis, path) -> None:
    payload = {
        "k": basis.k,
        "horizon": basis.horizon,
        "checksum": _checksum(basis.mean, basis.components, basis.explained_variance),
        "mean": [repr(float(v)) for v in basis.mean],
        "components": [[repr(float(v)) for v in row] for row in basis.components],
        "explained_variance": [repr(float(v)) for v in basis.explained_variance],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load(path) -> PcaBasis:
    payload = json.loads(Path(path).read_text())
    mean = np.array([float(v) for v in payload["mean"]], dtype=np.float64)
    components = np.array([[float(v) for v in row] for row in payload["components"]],
                          dtype=np.float64)
    variance = np.array([float(v) for v in payload["explained_variance"]], dtype=np.float64)
    found = _checksum(mean, components, variance)
    if found != payload["checksum"]:
        raise ValueError(f"{path}: checksum mismatch (corrupt basis file)")
    basis = PcaBasis(mean=mean, components=components, explained_variance=variance)
    if basis.k != payload["k"] or basis.horizon != payload["horizon"]:
        raise ValueError(f"{path}: header dims disagree with array shapes")
    return basis
