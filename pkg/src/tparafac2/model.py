"""PARAFAC2 factor container, reconstruction, loss and constraint checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import MaskStack, SliceStack, _read_matrix, _write_matrix, read_manifest

__all__ = [
    "Parafac2Factors",
    "ConstraintReport",
    "reconstruct",
    "loss",
    "fidelity",
    "penalty_terms",
    "check_constraint",
    "crossproduct_deviation",
    "save_factors",
    "load_factors",
]


@dataclass
class Parafac2Factors:
    """``X_k ~ A diag(C[k]) B_k^T``.

    ``C`` holds the diagonals of the ``D_k`` as rows; the diagonal
    matrices themselves are never formed.
    """

    A: np.ndarray
    B: list
    C: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = [np.asarray(b, dtype=np.float64) for b in self.B]
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.A.ndim != 2 or self.C.ndim != 2 or any(b.ndim != 2 for b in self.B):
            raise ValueError("All factors must be matrices")
        R = self.A.shape[1]
        if self.C.shape[1] != R or any(b.shape[1] != R for b in self.B):
            raise ValueError(
                f"Column counts disagree: A has {R}, C has {self.C.shape[1]}, "
                f"B_k have {sorted({b.shape[1] for b in self.B})}"
            )
        if self.C.shape[0] != len(self.B):
            raise ValueError(f"C has {self.C.shape[0]} rows but there are {len(self.B)} B_k")

    @property
    def R(self) -> int:
        return self.A.shape[1]

    @property
    def I(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.C.shape[0]

    @property
    def J(self) -> tuple:
        return tuple(b.shape[0] for b in self.B)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.A))
            and np.all(np.isfinite(self.C))
            and all(np.all(np.isfinite(b)) for b in self.B)
        )

    def copy(self) -> "Parafac2Factors":
        return Parafac2Factors(self.A.copy(), [b.copy() for b in self.B], self.C.copy())

    def permuted(self, perm: Sequence[int]) -> "Parafac2Factors":
        perm = list(perm)
        return Parafac2Factors(self.A[:, perm], [b[:, perm] for b in self.B], self.C[:, perm])

    def slice(self, k: int) -> np.ndarray:
        return (self.A * self.C[k]) @ self.B[k].T


@dataclass
class ConstraintReport:
    max_crossprod_deviation: float
    feasibility_gaps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "max_crossprod_deviation": self.max_crossprod_deviation,
            "feasibility_gaps": dict(self.feasibility_gaps),
        }


def reconstruct(f: Parafac2Factors) -> SliceStack:
    """Return the model slices ``A diag(C[k]) B_k^T``."""
    return SliceStack([f.slice(k) for k in range(f.K)], copy=False)


def fidelity(f: Parafac2Factors, x: SliceStack, mask: Optional[MaskStack] = None) -> float:
    """Sum of squared (observed) residuals."""
    if f.K != x.K or f.I != x.I or f.J != x.J:
        raise ValueError(f"Factor shapes (I={f.I}, J={f.J}, K={f.K}) do not match data {x!r}")
    if mask is not None:
        mask.check_congruent(x)
    total = 0.0
    for k, xk in enumerate(x):
        res = xk - f.slice(k)
        if mask is not None:
            res = mask[k] * res
        total += float(np.sum(res * res))
    return total


def penalty_terms(f: Parafac2Factors, lambda_A=0.0, lambda_D=0.0, lambda_B=0.0, ridge_B=0.0) -> float:
    """Ridge penalties on ``A``, ``D_k`` and ``B_k`` plus the temporal smoothness term on ``B_k``."""
    if min(lambda_A, lambda_D, lambda_B, ridge_B) < 0:
        raise ValueError("Regularization strengths must be non-negative")
    total = lambda_A * float(np.sum(f.A**2)) + lambda_D * float(np.sum(f.C**2))
    if ridge_B > 0:
        total += ridge_B * sum(float(np.sum(b**2)) for b in f.B)
    if lambda_B > 0:
        if len(set(f.J)) != 1:
            raise ValueError("Temporal smoothness needs every B_k to have the same number of rows")
        total += lambda_B * sum(float(np.sum((f.B[k] - f.B[k - 1]) ** 2)) for k in range(1, f.K))
    return total


def loss(f: Parafac2Factors, x: SliceStack, cfg=None, mask: Optional[MaskStack] = None) -> float:
    """Regularized (t)PARAFAC2 objective.

    ``cfg`` is anything with ``lambda_A``, ``lambda_D``, ``lambda_B`` and
    ``ridge_B`` attributes (usually a :class:`~tparafac2.aoadmm.SolverConfig`); ``None``
    gives the plain least-squares fit.
    """
    lam_A = getattr(cfg, "lambda_A", 0.0)
    lam_D = getattr(cfg, "lambda_D", 0.0)
    lam_B = getattr(cfg, "lambda_B", 0.0)
    ridge_B = getattr(cfg, "ridge_B", 0.0)
    penalty = penalty_terms(f, lam_A, lam_D, lam_B, ridge_B)
    return fidelity(f, x, mask) + penalty


def crossproduct_deviation(B: Sequence[np.ndarray]) -> float:
    """Largest deviation of ``B_k^T B_k`` from the mean Gram, relative to ``||B_1^T B_1||``."""
    grams = [b.T @ b for b in B]
    if len(grams) < 2:
        return 0.0
    scale = np.linalg.norm(grams[0])
    if scale == 0:
        scale = max(np.linalg.norm(g) for g in grams) or 1.0
    mean = sum(grams) / len(grams)
    return float(max(np.linalg.norm(g - mean) for g in grams) / scale)


def check_constraint(f: Parafac2Factors, gaps: Optional[dict] = None) -> ConstraintReport:
    return ConstraintReport(crossproduct_deviation(f.B), dict(gaps or {}))


def save_factors(f: Parafac2Factors, directory, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_matrix(directory / "A.bin", f.A)
    _write_matrix(directory / "C.bin", f.C)
    for k, b in enumerate(f.B):
        _write_matrix(directory / f"B_{k:03d}.bin", b)
    manifest = {"I": f.I, "K": f.K, "J": list(f.J), "R": f.R, "dtype": "f64le", "kind": "factors"}
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def load_factors(directory) -> Parafac2Factors:
    directory = Path(directory)
    m = read_manifest(directory)
    I, K, J, R = m["I"], m["K"], m["J"], m["R"]
    A = _read_matrix(directory / "A.bin", (I, R))
    C = _read_matrix(directory / "C.bin", (K, R))
    B = [_read_matrix(directory / f"B_{k:03d}.bin", (J[k], R)) for k in range(K)]
    return Parafac2Factors(A, B, C)
