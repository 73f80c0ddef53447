"""Fitting (t)PARAFAC2 to partially observed data.

Two strategies share the AO-ADMM engine:

* :func:`fit_em` fills the missing entries with per-slice means of the
  observed values, then alternates one full outer AO-ADMM iteration on
  the completed tensor with overwriting the missing entries by the model
  reconstruction.
* :func:`fit_rw` fits only the observed entries, replacing the three
  primal least-squares updates by their row-wise masked versions.

Both stop on the objective restricted to observed entries.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .aoadmm import AoAdmmEngine, SolverConfig, _resolve_init, run_engine
from .tensor import MaskStack, SliceStack

__all__ = ["initial_imputation", "fit_em", "fit_rw"]


def _validate(x: SliceStack, w: MaskStack) -> None:
    w.check_congruent(x)
    w.check_fibers()
    for k, wk in enumerate(w):
        if not wk.any():
            raise ValueError(f"Frontal slice {k} has no observed entries")


def initial_imputation(x: SliceStack, w: MaskStack) -> SliceStack:
    """Copy of ``x`` with missing entries set to the mean of the observed entries of their slice."""
    _validate(x, w)
    filled = []
    for xk, wk in zip(x, w):
        observed = wk == 1
        out = xk.copy()
        out[~observed] = xk[observed].mean()
        filled.append(out)
    return SliceStack(filled, copy=False)


def fit_em(x: SliceStack, w: MaskStack, cfg: SolverConfig, init=None, callback: Optional[Callable] = None):
    """EM-style fit: full AO-ADMM iterations on the imputed tensor.

    Observed entries of the working tensor are never touched. After each
    outer iteration the missing entries are replaced by the reconstruction
    from the primal factors. The final working tensor is returned as
    ``report.imputed``.
    """
    working = initial_imputation(x, w)
    init = _resolve_init(x, cfg.R, init, cfg.seed)
    engine = AoAdmmEngine(working, cfg, init, loss_mask=w)
    missing = [wk == 0 for wk in w]

    if engine.regular:
        missing_arr = np.stack(missing)

        def e_step(eng):
            xhat = eng.reconstruction()
            eng.X[missing_arr] = xhat[missing_arr]
    else:

        def e_step(eng):
            xhat = eng.reconstruction()
            for xk, xh, m in zip(eng.X, xhat, missing):
                xk[m] = xh[m]

    method = "tparafac2-em" if cfg.lambda_B > 0 else "aoadmm-em"
    factors, report = run_engine(engine, method=method, after_step=e_step, callback=callback)
    X = engine.X
    report.imputed = SliceStack(list(X), copy=True)
    return factors, report


def fit_rw(x: SliceStack, w: MaskStack, cfg: SolverConfig, init=None, callback: Optional[Callable] = None):
    """Row-wise fit to the observed entries only."""
    _validate(x, w)
    init = _resolve_init(x, cfg.R, init, cfg.seed)
    engine = AoAdmmEngine(x, cfg, init, rowwise_mask=w, loss_mask=w)
    method = "tparafac2-rw" if cfg.lambda_B > 0 else "aoadmm-rw"
    return run_engine(engine, method=method, callback=callback)
