"""Direct-fitting PARAFAC2 by alternating least squares, with EM imputation.

``B_k = P_k B`` with orthonormal ``P_k``. Each sweep solves an orthogonal
Procrustes problem per slice, projects the slices onto their ``P_k`` and
runs one CP-ALS sweep over ``A``, ``B`` and ``C`` of the projected
``I x R x K`` tensor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .aoadmm import FitReport, NonFiniteLossError, _gram_init, _resolve_init
from .missing import initial_imputation
from .model import Parafac2Factors, check_constraint, fidelity
from .tensor import MaskStack, SliceStack

__all__ = ["AlsState", "fit_als"]


@dataclass
class AlsState:
    P: list
    B: np.ndarray

    def evolving(self) -> list:
        return [p @ self.B for p in self.P]


def _procrustes_P(x, A, B, C):
    P = []
    for k, xk in enumerate(x):
        U, _, Vt = np.linalg.svd(xk.T @ (A * C[k]) @ B.T, full_matrices=False)
        P.append(U @ Vt)
    return P


def fit_als(x: SliceStack, R: int, tol: float = 1e-8, max_iter: int = 10000,
            mask: Optional[MaskStack] = None, init=None, seed=None, nonneg_C: bool = False,
            abs_tol: float = 1e-10):
    """Fit PARAFAC2 by ALS.

    With ``mask``, missing entries start at the mean of the observed
    entries of their slice and are replaced by the reconstruction after
    every sweep; the loss is then measured on observed entries only.
    ``nonneg_C`` clamps ``C`` at zero after each least-squares solve.
    Stops when the loss changes by less than ``abs_tol`` or by a relative
    amount below ``tol``.

    Returns ``(factors, report)``; the report's trace holds the data-fit
    loss after every sweep.
    """
    if R > min(x.I, min(x.J)):
        raise ValueError(f"R={R} exceeds min(I, J_k)")
    init = _resolve_init(x, R, init, seed)
    start = time.perf_counter()

    if mask is not None:
        work = [s.copy() for s in initial_imputation(x, mask)]
        missing = [w == 0 for w in mask]
    else:
        work = [s.copy() for s in x]
        missing = None

    A, C = init.A.copy(), init.C.copy()
    B = _gram_init(init.B, np.full(x.K, 1.0 / x.K))
    state = AlsState(P=_procrustes_P(work, A, B, C), B=B)

    def current():
        return Parafac2Factors(A, state.evolving(), C)

    trace = [fidelity(current(), x, mask)]
    reason = "max_iter"
    n = 0
    for n in range(1, max_iter + 1):
        P = state.P = _procrustes_P(work, A, state.B, C)
        Y = np.stack([xk @ p for xk, p in zip(work, P)])  # (K, I, R)
        B = state.B

        A = np.linalg.solve((B.T @ B) * (C.T @ C), np.einsum("kiq,qs,ks->is", Y, B, C).T).T
        B = np.linalg.solve((A.T @ A) * (C.T @ C), np.einsum("kir,ij,kj->rj", Y, A, C).T).T
        C = np.linalg.solve((A.T @ A) * (B.T @ B), np.einsum("ir,kij,jr->kr", A, Y, B).T).T
        if nonneg_C:
            C = np.maximum(C, 0)
        state.B = B

        f = current()
        if missing is not None:
            for k, m in enumerate(missing):
                work[k][m] = f.slice(k)[m]
        value = fidelity(f, x, mask)
        if not np.isfinite(value):
            raise NonFiniteLossError(f"ALS loss became {value} at sweep {n}")
        trace.append(value)
        change = abs(trace[-1] - trace[-2])
        if change < abs_tol:
            reason = "abs_tol"
            break
        if change / abs(trace[-2]) < tol:
            reason = "rel_tol"
            break

    factors = current()
    report = FitReport(
        loss_trace=trace,
        n_outer=n,
        exit_reason=reason,
        feasible=True,
        constraint=check_constraint(factors),
        wall_time=time.perf_counter() - start,
        primal=factors.copy(),
        imputed=SliceStack(work, copy=True) if mask is not None else None,
        method="als-em" if mask is not None else "als",
    )
    return factors, report
