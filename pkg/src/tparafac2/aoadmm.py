"""AO-ADMM fitting of PARAFAC2 and temporally smooth PARAFAC2 (tPARAFAC2).

One outer iteration updates, in order,

1. the evolving factors ``B_k`` with an ADMM loop that splits off a
   temporally smoothed copy ``Z_B`` (a block tridiagonal system solved with
   Thomas' algorithm) and a copy ``Y_B`` projected onto the set of
   factors with constant cross products,
2. the rows of ``C`` (diagonals of ``D_k``) with an ADMM loop carrying the
   ridge term in the primal step and non-negativity in the auxiliary,
3. ``A`` in closed form under a ridge penalty.

All duals are stored in scaled form.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import rowwise
from .model import ConstraintReport, Parafac2Factors, check_constraint, loss
from .tensor import MaskStack, SliceStack

__all__ = [
    "SolverConfig",
    "AdmmState",
    "FitReport",
    "NonFiniteLossError",
    "random_init",
    "update_A",
    "update_Bk_primal",
    "thomas",
    "solve_Z_tridiagonal",
    "tridiagonal_coefficients",
    "project_P",
    "projection_objective",
    "update_D_admm",
    "feasibility_gaps",
    "check_stop",
    "AoAdmmEngine",
    "run_engine",
    "fit",
]

logger = logging.getLogger(__name__)

RHO_FLOOR = 1e-12


class NonFiniteLossError(ArithmeticError):
    """Raised when the objective becomes NaN or infinite."""


@dataclass
class SolverConfig:
    R: int = 3
    lambda_A: float = 0.0
    lambda_B: float = 0.0
    lambda_D: float = 0.0
    ridge_B: float = 0.0
    nonneg_C: bool = True
    eps_abs: float = 1e-10
    eps_rel: float = 1e-8
    eps_feas: float = 1e-5
    inner_tol: float = 1e-5
    max_outer: int = 10000
    max_inner: int = 5
    seed: int = 0
    proj_sweeps: int = 10

    def __post_init__(self):
        if self.R < 1:
            raise ValueError(f"R must be positive, got {self.R}")
        for name in ("lambda_A", "lambda_B", "lambda_D", "ridge_B"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("eps_abs", "eps_rel", "eps_feas", "inner_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("max_outer", "max_inner", "proj_sweeps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")

    def replace(self, **changes) -> "SolverConfig":
        return SolverConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown solver config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SolverConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class AdmmState:
    """Auxiliary variables, scaled duals and step sizes of the ADMM splits."""

    Z_B: list
    Y_B: list
    mu_Z: list
    mu_Delta: list
    Z_D: np.ndarray
    mu_D: np.ndarray
    rho_B: np.ndarray
    rho_D: np.ndarray
    P: Optional[list] = None
    DeltaB: Optional[np.ndarray] = None

    @classmethod
    def from_factors(cls, f: Parafac2Factors, nonneg: bool = True) -> "AdmmState":
        Z_D = np.maximum(f.C, 0) if nonneg else f.C.copy()
        return cls(
            Z_B=[b.copy() for b in f.B],
            Y_B=[b.copy() for b in f.B],
            mu_Z=[np.zeros_like(b) for b in f.B],
            mu_Delta=[np.zeros_like(b) for b in f.B],
            Z_D=Z_D,
            mu_D=np.zeros_like(f.C),
            rho_B=np.ones(f.K),
            rho_D=np.ones(f.K),
        )


@dataclass
class FitReport:
    loss_trace: list
    n_outer: int
    exit_reason: str
    feasible: bool
    constraint: ConstraintReport
    wall_time: float
    aux_loss_trace: list = field(default_factory=list)
    primal: Optional[Parafac2Factors] = None
    imputed: Optional[SliceStack] = None
    method: str = "aoadmm"
    n_increases: int = 0

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "loss_trace": [float(v) for v in self.loss_trace],
            "aux_loss_trace": [float(v) for v in self.aux_loss_trace],
            "final_loss": float(self.final_loss),
            "n_outer": self.n_outer,
            "exit_reason": self.exit_reason,
            "feasible": self.feasible,
            "constraint": self.constraint.to_dict(),
            "wall_time": self.wall_time,
            "n_increases": self.n_increases,
        }


def random_init(I: int, J, K: int, R: int, seed=None) -> Parafac2Factors:
    """Uniform(0, 1) ``A`` and ``B_k``, all-ones ``C``."""
    rng = np.random.default_rng(seed)
    J = list(J) if np.iterable(J) else [J] * K
    A = rng.uniform(size=(I, R))
    B = [rng.uniform(size=(j, R)) for j in J]
    return Parafac2Factors(A, B, np.ones((K, R)))


def _resolve_init(x: SliceStack, R: int, init, seed) -> Parafac2Factors:
    if isinstance(init, Parafac2Factors):
        if init.R != R or init.I != x.I or init.J != x.J or init.K != x.K:
            raise ValueError("Initial factors do not match the data shape or rank")
        return init.copy()
    return random_init(x.I, x.J, x.K, R, seed=seed if init is None else init)


def update_A(x, f: Parafac2Factors, lambda_A: float) -> np.ndarray:
    """Closed-form ridge least-squares update of ``A``.

    ``A = (sum_k X_k B_k D_k) (sum_k D_k B_k^T B_k D_k + lambda_A I)^{-1}``.
    A singular normal matrix (only possible with ``lambda_A == 0``) raises
    :class:`numpy.linalg.LinAlgError`.
    """
    R = f.R
    lhs = lambda_A * np.eye(R)
    rhs = np.zeros((f.I, R))
    for k, xk in enumerate(x):
        BD = f.B[k] * f.C[k]
        lhs += BD.T @ BD
        rhs += xk @ BD
    return np.linalg.solve(lhs, rhs.T).T


def update_Bk_primal(x_k, A, d_k, state: AdmmState, k: int) -> np.ndarray:
    """ADMM primal step for ``B_k`` with both auxiliary copies as priors."""
    rho = state.rho_B[k]
    M = state.Z_B[k] - state.mu_Z[k] + state.Y_B[k] - state.mu_Delta[k]
    return _bk_primal(x_k.T @ A, A.T @ A, d_k, rho, M)


def _bk_primal(XtA, AtA, d_k, rho, M):
    lhs = AtA * np.outer(d_k, d_k) + rho * np.eye(len(d_k))
    rhs = XtA * d_k + 0.5 * rho * M
    return np.linalg.solve(lhs, rhs.T).T


def thomas(lower, diag, upper, rhs):
    """Tridiagonal solve with scalar coefficients and a block right-hand side.

    Row ``k`` reads ``lower[k-1] x[k-1] + diag[k] x[k] + upper[k] x[k+1] = rhs[k]``
    where each ``x[k]`` and ``rhs[k]`` can be an array of any shape. One
    forward/backward sweep is shared by all right-hand-side entries.
    """
    diag = np.asarray(diag, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = len(diag)
    if len(lower) != n - 1 or len(upper) != n - 1 or rhs.shape[0] != n:
        raise ValueError("Inconsistent tridiagonal system sizes")

    cp = np.empty(max(n - 1, 0))
    dp = np.empty_like(rhs)
    denom = diag[0]
    dp[0] = rhs[0] / denom
    for k in range(1, n):
        cp[k - 1] = upper[k - 1] / denom
        denom = diag[k] - lower[k - 1] * cp[k - 1]
        dp[k] = (rhs[k] - lower[k - 1] * dp[k - 1]) / denom
    for k in range(n - 2, -1, -1):
        dp[k] -= cp[k] * dp[k + 1]
    return dp


def tridiagonal_coefficients(rho_B, lambda_B: float, ridge: float = 0.0):
    """Scalar bands of the ``Z_B`` stationarity system."""
    rho_B = np.asarray(rho_B, dtype=float)
    K = len(rho_B)
    neighbours = np.full(K, 2.0)
    neighbours[[0, -1]] = 1.0
    if K == 1:
        neighbours[0] = 0.0
    diag = rho_B + 2.0 * lambda_B * neighbours + 2.0 * ridge
    off = np.full(K - 1, -2.0 * lambda_B)
    return off, diag, off.copy()


def solve_Z_tridiagonal(B, mu_ZB, rho_B, lambda_B: float, ridge: float = 0.0):
    """Minimize ``lambda_B sum ||Z_k - Z_{k-1}||^2 + ridge sum ||Z_k||^2 + sum rho_k/2 ||B_k - Z_k + mu_k||^2``."""
    if lambda_B < 0 or ridge < 0:
        raise ValueError("lambda_B and ridge must be non-negative")
    as_array = isinstance(B, np.ndarray)
    if lambda_B == 0:
        if ridge == 0:
            return _map(np.add, B, mu_ZB)
        rho_B = np.asarray(rho_B, dtype=float)
        shrink = rho_B / (rho_B + 2.0 * ridge)
        if as_array:
            return shrink[:, None, None] * (B + mu_ZB)
        return [s * (b + m) for s, b, m in zip(shrink, B, mu_ZB)]
    if len({b.shape for b in B}) != 1:
        raise ValueError("Temporal smoothness needs every B_k to have the same shape")
    rho_B = np.asarray(rho_B, dtype=float)
    rhs = rho_B[:, None, None] * (np.asarray(B) + np.asarray(mu_ZB))
    lower, diag, upper = tridiagonal_coefficients(rho_B, lambda_B, ridge)
    Z = thomas(lower, diag, upper, rhs)
    return Z if as_array else list(Z)


def _procrustes(M, DeltaB):
    """Orthonormal ``P`` minimizing ``||M - P DeltaB||`` (batched over a leading axis)."""
    U, _, Vt = np.linalg.svd(M @ DeltaB.T, full_matrices=False)
    return U @ Vt


def _gram_init(M, weights) -> np.ndarray:
    """``DeltaB`` whose Gram equals the weighted mean Gram of the ``M_k``."""
    G = sum(w * (m.T @ m) for w, m in zip(weights, M))
    evals, evecs = np.linalg.eigh(G)
    return np.sqrt(np.maximum(evals, 0))[:, None] * evecs.T


def projection_objective(M, rho, Y) -> float:
    return float(sum(r * np.sum((m - y) ** 2) for r, m, y in zip(rho, M, Y)))


def project_P(B, mu_Delta, rho_B, state: Optional[AdmmState] = None, n_sweeps: int = 10, tol: float = 1e-12):
    """Approximate projection of ``B_k + mu_k`` onto constant-cross-product factors.

    Alternates orthogonal Procrustes updates of every ``P_k`` with a
    weighted average for the shared ``DeltaB``, so that the returned
    ``Y_k = P_k DeltaB`` have identical Gram matrices ``DeltaB^T DeltaB``.
    ``DeltaB`` is warm-started from ``state`` when available; otherwise it
    starts from the square root of the weighted mean Gram matrix.

    Returns ``(Y, P, DeltaB)``.
    """
    as_array = isinstance(B, np.ndarray)
    M = _map(np.add, B, mu_Delta)
    R = M[0].shape[1]
    if any(m.shape[0] < R for m in M):
        raise ValueError(f"Projection needs J_k >= R={R} for every slice")
    rho = np.asarray(rho_B, dtype=float)
    weights = rho / rho.sum()
    regular = len({m.shape for m in M}) == 1
    if regular and not as_array:
        M = np.stack(M)

    DeltaB = None if state is None else state.DeltaB
    if DeltaB is None or DeltaB.shape != (R, R):
        DeltaB = _gram_init(M, weights)

    prev = -np.inf
    for _ in range(n_sweeps):
        if regular:
            P = _procrustes(M, DeltaB)
            DeltaB = (weights[:, None, None] * P).reshape(-1, R).T @ M.reshape(-1, R)
        else:
            P = [_procrustes(m, DeltaB) for m in M]
            DeltaB = sum(w * (p.T @ m) for w, p, m in zip(weights, P, M))
        # With DeltaB optimal for the current P, the objective equals
        # sum rho ||M||^2 - sum(rho) ||DeltaB||^2, so track ||DeltaB||^2.
        size = float(np.sum(DeltaB**2))
        if size - prev <= tol * max(size, 1e-300):
            break
        prev = size

    Y = P @ DeltaB if regular else [p @ DeltaB for p in P]
    if not as_array:
        Y, P = list(Y), list(P)
    if state is not None:
        state.P = P
        state.DeltaB = DeltaB
    return Y, P, DeltaB


def _d_system(x, A, B):
    """Gram matrices ``(A^T A) * (B_k^T B_k)`` and ``diag(A^T X_k B_k)``."""
    AtA = A.T @ A
    G = np.stack([AtA * (b.T @ b) for b in B])
    rhs = np.stack([np.einsum("ir,ir->r", A, xk @ b) for xk, b in zip(x, B)])
    return G, rhs


def _admm_D(G, rhs, C, state: AdmmState, lambda_D: float, nonneg: bool, max_inner: int, tol: float):
    K, R = C.shape
    rho = state.rho_D
    lhs = G + (lambda_D + 0.5 * rho)[:, None, None] * np.eye(R)
    for _ in range(max_inner):
        C = np.linalg.solve(lhs, (rhs + 0.5 * rho[:, None] * (state.Z_D - state.mu_D))[..., None])[..., 0]
        Z_old = state.Z_D
        Z = C + state.mu_D
        if nonneg:
            Z = np.maximum(Z, 0)
        state.Z_D = Z
        state.mu_D = state.mu_D + C - Z
        if _rel(C - Z, C) < tol and _rel(Z - Z_old, Z) < tol:
            break
    return C


def update_D_admm(x, f: Parafac2Factors, state: AdmmState, lambda_D: float, nonneg: bool = True, max_inner: int = 5, tol: float = 1e-5):
    """ADMM updates of the ``D_k`` diagonals (rows of ``C``).

    The primal step solves
    ``((A^T A) * (B_k^T B_k) + (lambda_D + rho_k/2) I) d = diag(A^T X_k B_k) + rho_k/2 (z_k - mu_k)``,
    the auxiliary step clamps ``d + mu`` at zero when ``nonneg`` is set and
    the scaled dual accumulates ``d - z``. ``state`` is updated in place.
    """
    G, rhs = _d_system(x, f.A, f.B)
    C = _admm_D(G, rhs, f.C, state, lambda_D, nonneg, max_inner, tol)
    return C, state


def _rel(diff, ref) -> float:
    num, den = _norm(diff), _norm(ref)
    if den == 0:
        return 0.0 if num == 0 else np.inf
    return float(num / den)


def _norm(x) -> float:
    if isinstance(x, np.ndarray):
        return float(np.sqrt(np.vdot(x, x)))
    return float(np.sqrt(sum(np.vdot(v, v) for v in x)))


def _map(fn, *stacks):
    """Apply ``fn`` to whole arrays, or slice by slice for ragged lists."""
    if isinstance(stacks[0], np.ndarray):
        return fn(*stacks)
    return [fn(*parts) for parts in zip(*stacks)]


def _as_stack(mats):
    """One ``(K, J, R)`` array when all slices match in shape, else a list."""
    if len({m.shape for m in mats}) == 1:
        return np.stack(mats)
    return [np.array(m) for m in mats]


def feasibility_gaps(state: AdmmState, f: Parafac2Factors) -> dict:
    """Relative distances between primal factors and their auxiliary copies."""
    B = f.B
    return {
        "B_Z": _rel(_map(np.subtract, B, state.Z_B), B),
        "B_Y": _rel(_map(np.subtract, B, state.Y_B), B),
        "D_Z": _rel(f.C - state.Z_D, f.C),
    }


def check_stop(trace, state: AdmmState, f: Parafac2Factors, cfg: SolverConfig):
    """Outer stopping test.

    Returns ``(stop, reason)``; ``reason`` is ``"abs_tol"`` or ``"rel_tol"``
    when stopping and ``None`` otherwise.
    """
    if len(trace) < 2:
        return False, None
    gaps = feasibility_gaps(state, f)
    if max(gaps.values()) >= cfg.eps_feas:
        return False, None
    change = abs(trace[-1] - trace[-2])
    if change < cfg.eps_abs:
        return True, "abs_tol"
    if trace[-2] != 0 and change / abs(trace[-2]) < cfg.eps_rel:
        return True, "rel_tol"
    return False, None


class _Stacked:
    """Factor view used by the engine; ``B`` may be a 3-way array."""

    def __init__(self, A, B, C):
        self.A, self.B, self.C = A, B, C


class AoAdmmEngine:
    """Holds the primal factors and ADMM state of one fit and performs outer iterations.

    ``data`` is used as-is by the full-matrix updates. With ``rowwise_mask``
    the primal updates only fit the observed entries. ``loss_mask``
    restricts the reported objective to observed entries. Slices of equal
    width are processed as one 3-way array.
    """

    def __init__(self, data: SliceStack, cfg: SolverConfig, init: Parafac2Factors,
                 rowwise_mask: Optional[MaskStack] = None, loss_mask: Optional[MaskStack] = None):
        if cfg.lambda_B > 0 and not data.is_regular:
            raise ValueError("Temporal smoothness needs every slice to have the same number of columns")
        if cfg.R > min(data.J):
            raise ValueError(f"R={cfg.R} exceeds the smallest slice width {min(data.J)}")
        if rowwise_mask is not None:
            rowwise_mask.check_congruent(data)
        if loss_mask is not None:
            loss_mask.check_congruent(data)
        self.cfg = cfg
        self.regular = data.is_regular
        self.data = data
        self.X = _as_stack(data.slices)
        self.rowwise_mask = None if rowwise_mask is None else _as_stack(rowwise_mask.slices)
        self.loss_mask = None if loss_mask is None else _as_stack(loss_mask.slices)
        if self.rowwise_mask is not None:
            self.X_obs = _map(np.multiply, self.rowwise_mask, self.X)
        self.A = init.A.copy()
        self.B = _as_stack(init.B)
        self.C = init.C.copy()
        st = AdmmState.from_factors(init, nonneg=cfg.nonneg_C)
        st.Z_B, st.Y_B = _as_stack(st.Z_B), _as_stack(st.Y_B)
        st.mu_Z, st.mu_Delta = _as_stack(st.mu_Z), _as_stack(st.mu_Delta)
        self.state = st

    def set_data(self, data: SliceStack) -> None:
        """Swap in new values for the data (used by EM imputation)."""
        self.data = data
        self.X = _as_stack(data.slices)

    @property
    def primal(self) -> Parafac2Factors:
        return Parafac2Factors(self.A.copy(), [b.copy() for b in self.B], self.C.copy())

    @property
    def feasible_factors(self) -> Parafac2Factors:
        """``A`` with the constraint-satisfying ``Y_B`` and ``Z_D`` copies."""
        return Parafac2Factors(self.A.copy(), [y.copy() for y in self.state.Y_B], self.state.Z_D.copy())

    def reconstruction(self, B=None, C=None):
        B = self.B if B is None else B
        C = self.C if C is None else C
        if self.regular:
            return (self.A[None] * C[:, None, :]) @ np.swapaxes(B, 1, 2)
        return [(self.A * C[k]) @ B[k].T for k in range(len(B))]

    def _objective(self, B, C) -> float:
        res = _map(np.subtract, self.X, self.reconstruction(B, C))
        if self.loss_mask is not None:
            res = _map(np.multiply, self.loss_mask, res)
        cfg = self.cfg
        value = _norm(res) ** 2 + cfg.lambda_A * float(np.vdot(self.A, self.A)) + cfg.lambda_D * float(np.vdot(C, C))
        if cfg.lambda_B > 0:
            value += cfg.lambda_B * float(np.sum((B[1:] - B[:-1]) ** 2))
        if cfg.ridge_B > 0:
            value += cfg.ridge_B * _norm(B) ** 2
        return value

    def objective(self) -> float:
        return self._objective(self.B, self.C)

    def aux_objective(self) -> float:
        return self._objective(self.state.Y_B, self.state.Z_D)

    def gaps(self) -> dict:
        return feasibility_gaps(self.state, _Stacked(self.A, self.B, self.C))

    def step(self) -> None:
        self._update_B()
        self._update_D()
        self._update_A()

    def _B_primal(self, AtA, XtA, M):
        st, A, C = self.state, self.A, self.C
        R = self.cfg.R
        rho = st.rho_B
        if self.rowwise_mask is None:
            if self.regular:
                lhs = AtA * (C[:, :, None] * C[:, None, :]) + rho[:, None, None] * np.eye(R)
                rhs = XtA * C[:, None, :] + 0.5 * rho[:, None, None] * M
                return np.linalg.solve(lhs, rhs.transpose(0, 2, 1)).transpose(0, 2, 1)
            return [_bk_primal(XtA[k], AtA, C[k], rho[k], M[k]) for k in range(len(M))]
        if self.regular:
            K, J = M.shape[:2]
            outA = (A[:, :, None] * A[:, None, :]).reshape(A.shape[0], R * R)
            G = (self.rowwise_mask.transpose(0, 2, 1) @ outA).reshape(K, J, R, R)
            G = G * (C[:, None, :, None] * C[:, None, None, :]) + rho[:, None, None, None] * np.eye(R)
            rhs = XtA * C[:, None, :] + 0.5 * rho[:, None, None] * M
            return rowwise.solve_spd_batch(G.reshape(K * J, R, R), rhs.reshape(K * J, R)).reshape(K, J, R)
        return [
            rowwise.update_Bk_rows(self.X_obs[k], self.rowwise_mask[k], A, C[k], rho[k], M[k])
            for k in range(len(M))
        ]

    def _update_B(self):
        cfg, st = self.cfg, self.state
        A, C = self.A, self.C
        AtA = A.T @ A
        st.rho_B = np.maximum(np.einsum("kr,r->k", C**2, np.diag(AtA)) / cfg.R, RHO_FLOOR)
        X = self.X if self.rowwise_mask is None else self.X_obs
        XtA = _map(lambda xk: np.swapaxes(xk, -1, -2) @ A, X)

        for _ in range(cfg.max_inner):
            M = _map(lambda z, mz, y, md: z - mz + y - md, st.Z_B, st.mu_Z, st.Y_B, st.mu_Delta)
            self.B = self._B_primal(AtA, XtA, M)

            Z_old, Y_old = st.Z_B, st.Y_B
            st.Z_B = solve_Z_tridiagonal(self.B, st.mu_Z, st.rho_B, cfg.lambda_B, cfg.ridge_B)
            st.Y_B, _, _ = project_P(self.B, st.mu_Delta, st.rho_B, st, n_sweeps=cfg.proj_sweeps)
            st.mu_Z = _map(lambda m, b, z: m + b - z, st.mu_Z, self.B, st.Z_B)
            st.mu_Delta = _map(lambda m, b, y: m + b - y, st.mu_Delta, self.B, st.Y_B)

            primal_res = max(
                _rel(_map(np.subtract, self.B, st.Z_B), self.B),
                _rel(_map(np.subtract, self.B, st.Y_B), self.B),
            )
            dual_res = max(
                _rel(_map(np.subtract, st.Z_B, Z_old), st.Z_B),
                _rel(_map(np.subtract, st.Y_B, Y_old), st.Y_B),
            )
            if primal_res < cfg.inner_tol and dual_res < cfg.inner_tol:
                break

    def _BtB(self):
        if self.regular:
            return np.swapaxes(self.B, 1, 2) @ self.B
        return np.stack([b.T @ b for b in self.B])

    def _update_D(self):
        cfg, st = self.cfg, self.state
        A, B = self.A, self.B
        AtA = A.T @ A
        BtB = self._BtB()
        st.rho_D = np.maximum(np.einsum("r,krr->k", np.diag(AtA), BtB) / cfg.R, RHO_FLOOR)
        if self.rowwise_mask is None:
            G = AtA * BtB
            XB = _map(lambda xk, bk: xk @ bk, self.X, B)
            rhs = np.stack([np.einsum("ir,ir->r", A, xb) for xb in XB]) if not self.regular else np.einsum("ir,kir->kr", A, XB)
        else:
            G, rhs = rowwise.masked_d_system(self.X_obs, self.rowwise_mask, A, list(B))
        self.C = _admm_D(G, rhs, self.C, st, cfg.lambda_D, cfg.nonneg_C, cfg.max_inner, cfg.inner_tol)

    def _update_A(self):
        cfg, B, C = self.cfg, self.B, self.C
        if self.rowwise_mask is None:
            if self.regular:
                BtB = self._BtB()
                lhs = np.einsum("krs,kr,ks->rs", BtB, C, C) + cfg.lambda_A * np.eye(cfg.R)
                rhs = (self.X @ (B * C[:, None, :])).sum(axis=0)
                self.A = np.linalg.solve(lhs, rhs.T).T
            else:
                self.A = update_A(self.X, Parafac2Factors(self.A, list(B), C), cfg.lambda_A)
        else:
            self.A = rowwise.update_A_rows(self.X_obs, self.rowwise_mask, self.A, list(B), C, reg=cfg.lambda_A)


def run_engine(engine: AoAdmmEngine, method: str = "aoadmm",
               after_step: Optional[Callable] = None, callback: Optional[Callable] = None) -> tuple:
    """Outer loop shared by the full-data, EM and row-wise fits."""
    cfg = engine.cfg
    start = time.perf_counter()
    trace = [engine.objective()]
    aux_trace = [engine.aux_objective()]
    reason = "max_iter"
    n_increases = 0
    n = 0
    for n in range(1, cfg.max_outer + 1):
        try:
            engine.step()
        except np.linalg.LinAlgError as err:
            if engine.primal.is_finite():
                raise
            raise NonFiniteLossError(f"Factors became non-finite at outer iteration {n}") from err
        if after_step is not None:
            after_step(engine)
        value = engine.objective()
        if not np.isfinite(value):
            raise NonFiniteLossError(f"Objective became {value} at outer iteration {n}")
        if value - trace[-1] > 1e-6 * trace[0]:
            n_increases += 1
            logger.debug("Objective increased from %g to %g at iteration %d", trace[-1], value, n)
        trace.append(value)
        aux_trace.append(engine.aux_objective())
        if callback is not None:
            callback(n, engine)
        stop, why = check_stop(trace, engine.state, _Stacked(engine.A, engine.B, engine.C), cfg)
        if stop:
            reason = why
            break
    wall = time.perf_counter() - start

    gaps = engine.gaps()
    factors = engine.feasible_factors
    report = FitReport(
        loss_trace=trace,
        n_outer=n,
        exit_reason=reason,
        feasible=bool(max(gaps.values()) < cfg.eps_feas),
        constraint=check_constraint(factors, gaps),
        wall_time=wall,
        aux_loss_trace=aux_trace,
        primal=engine.primal,
        method=method,
        n_increases=n_increases,
    )
    return factors, report


def fit(x: SliceStack, cfg: SolverConfig, init=None, callback: Optional[Callable] = None):
    """Fit (t)PARAFAC2 to fully observed data.

    ``init`` is either a :class:`Parafac2Factors` or a seed for
    :func:`random_init` (defaults to ``cfg.seed``). Setting
    ``cfg.lambda_B > 0`` turns on temporal smoothness of the ``B_k``.

    Returns the factors with ``B_k`` taken from the constraint-satisfying
    projection ``Y_B`` and ``C`` from its non-negative auxiliary copy,
    together with a :class:`FitReport`. The report's ``loss_trace`` holds
    the objective on the primal variables (``report.primal``).
    """
    init = _resolve_init(x, cfg.R, init, cfg.seed)
    engine = AoAdmmEngine(x, cfg, init)
    method = "tparafac2" if cfg.lambda_B > 0 else "aoadmm"
    return run_engine(engine, method=method, callback=callback)
