"""Factor match score, degeneracy screening and run selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import Parafac2Factors

__all__ = [
    "FmsReport",
    "NoValidRunError",
    "fms",
    "congruence_matrices",
    "detect_degenerate",
    "best_run",
    "CSV_COLUMNS",
    "write_csv",
]

CSV_COLUMNS = [
    "dataset", "mask", "method", "seed", "loss", "fms", "fms_A", "fms_B", "fms_C",
    "iters", "seconds", "feasible", "degenerate", "status",
]


class NoValidRunError(ValueError):
    """No run is both feasible and non-degenerate."""


@dataclass
class FmsReport:
    total: float
    per_component: list
    permutation: list
    zero_columns: list = field(default_factory=list)

    def mode_scores(self) -> tuple:
        """Mean match of ``A``, stacked ``B`` and ``C`` over components."""
        arr = np.asarray(self.per_component, dtype=float).reshape(-1, 3)
        return tuple(float(v) for v in arr.mean(axis=0))

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "per_component": [list(t) for t in self.per_component],
            "permutation": list(self.permutation),
            "zero_columns": list(self.zero_columns),
        }


def _stacked_B(f: Parafac2Factors) -> np.ndarray:
    return np.concatenate(f.B, axis=0)


def _cosines(X: np.ndarray, Y: np.ndarray, signed: bool = False):
    """Cosine similarity between every column of ``X`` and every column of ``Y``.

    Columns with zero norm get similarity 0; their indices are returned.
    """
    nx = np.linalg.norm(X, axis=0)
    ny = np.linalg.norm(Y, axis=0)
    zero_x = nx == 0
    zero_y = ny == 0
    nx[zero_x] = 1.0
    ny[zero_y] = 1.0
    cos = (X / nx).T @ (Y / ny)
    cos[zero_x, :] = 0.0
    cos[:, zero_y] = 0.0
    if not signed:
        cos = np.abs(cos)
    return np.clip(cos, -1.0, 1.0), np.flatnonzero(zero_x), np.flatnonzero(zero_y)


def congruence_matrices(f: Parafac2Factors, g: Parafac2Factors, signed: bool = False):
    """Per-mode cosine matrices between the components of ``f`` and ``g``."""
    return (
        _cosines(f.A, g.A, signed)[0],
        _cosines(_stacked_B(f), _stacked_B(g), signed)[0],
        _cosines(f.C, g.C, signed)[0],
    )


def fms(est: Parafac2Factors, truth: Parafac2Factors) -> FmsReport:
    """Factor match score of ``est`` against ``truth``, in ``[0, 1]``.

    For each matched pair the absolute cosines of the ``A`` columns, the
    stacked ``B_k`` columns and the ``C`` columns are multiplied; the
    matching maximizes the sum of these products and the total is their
    mean. ``permutation[i]`` is the estimated component matched to true
    component ``i``.
    """
    if est.R != truth.R:
        raise ValueError(f"Rank mismatch: {est.R} vs {truth.R}")
    if est.I != truth.I or est.J != truth.J or est.K != truth.K:
        raise ValueError("Estimated and true factors have different shapes")
    cA, zA, _ = _cosines(est.A, truth.A)
    cB, zB, _ = _cosines(_stacked_B(est), _stacked_B(truth))
    cC, zC, _ = _cosines(est.C, truth.C)
    score = cA * cB * cC  # rows: estimated, cols: true
    rows, cols = linear_sum_assignment(score, maximize=True)
    order = np.argsort(cols)
    rows, cols = rows[order], cols[order]
    per = [(float(cA[r, c]), float(cB[r, c]), float(cC[r, c])) for r, c in zip(rows, cols)]
    total = float(score[rows, cols].sum() / truth.R)
    zero = sorted(set(zA.tolist()) | set(zB.tolist()) | set(zC.tolist()))
    return FmsReport(total=total, per_component=per, permutation=rows.tolist(), zero_columns=zero)


def detect_degenerate(f: Parafac2Factors, threshold: float = 0.85) -> bool:
    """Flag two-factor degeneracy.

    A pair of components whose signed congruences over ``A``, stacked
    ``B`` and ``C`` multiply to less than ``-threshold`` cancel each other
    out.
    """
    if f.R < 2:
        return False
    cA, cB, cC = congruence_matrices(f, f, signed=True)
    prod = cA * cB * cC
    iu = np.triu_indices(f.R, k=1)
    return bool(np.min(prod[iu]) < -threshold)


def best_run(runs: Sequence, threshold: float = 0.85) -> int:
    """Index of the lowest-loss run that is feasible and not degenerate.

    ``runs`` holds ``(factors, report)`` pairs.
    """
    if len(runs) == 0:
        raise ValueError("No runs to choose from")
    best, best_loss = None, np.inf
    for n, (factors, report) in enumerate(runs):
        if not report.feasible or detect_degenerate(factors, threshold):
            continue
        if report.final_loss < best_loss:
            best, best_loss = n, report.final_loss
    if best is None:
        raise NoValidRunError(f"None of the {len(runs)} runs is feasible and non-degenerate")
    return best


def write_csv(rows: Sequence[dict], path, columns=CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
