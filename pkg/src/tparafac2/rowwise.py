"""Row-wise least-squares kernels for fitting only the observed entries.

Every row of ``A``, every row of each ``B_k`` and every row of ``C`` has
its own ``R x R`` normal matrix once the mask is taken into account. The
single-row functions solve one system and exist mainly as readable
references; the batched ``*_rows`` variants assemble all Gram matrices at
once with one matrix product per slice and are what the solver uses.

With an all-ones mask every rule here reduces algebraically to its
full-matrix counterpart in :mod:`tparafac2.aoadmm`.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "update_A_row",
    "update_A_rows",
    "update_Bk_row",
    "update_Bk_rows",
    "update_C_row",
    "masked_d_system",
    "solve_spd_batch",
]


def _outer_rows(M: np.ndarray) -> np.ndarray:
    """Row-wise outer products flattened to shape ``(n, R*R)``."""
    n, R = M.shape
    return (M[:, :, None] * M[:, None, :]).reshape(n, R * R)


def solve_spd_batch(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``G[n] @ x[n] = rhs[n]`` for a stack of small systems.

    Falls back to a least-squares solution for the (rare) singular
    systems so iterates stay finite when a row has too few observations
    and no regularization.
    """
    try:
        return np.linalg.solve(G, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(rhs)
        for n in range(G.shape[0]):
            out[n] = np.linalg.lstsq(G[n], rhs[n], rcond=None)[0]
        return out


def update_A_row(i, x, w, A, B, C, reg=0.0, prior=None):
    """Least-squares update of ``A[i]`` using only observed entries of row ``i``.

    Solves ``A[i] (sum_k D_k B_k^T diag(W_k[i]) B_k D_k + reg I) =
    sum_k (W_k[i] * X_k[i]) B_k D_k + prior``.

    Pass ``reg=rho/2, prior=rho/2 * (Z_A[i] - mu_A[i])`` for an ADMM split
    on ``A`` or ``reg=lambda_A, prior=None`` for a plain ridge penalty.

    Raises
    ------
    numpy.linalg.LinAlgError
        If the normal matrix is singular (e.g. a fully missing row with
        ``reg == 0``).
    """
    R = A.shape[1]
    G = reg * np.eye(R)
    rhs = np.zeros(R) if prior is None else np.array(prior, dtype=float)
    for k in range(len(B)):
        BD = B[k] * C[k]
        wi = w[k][i]
        G += (BD.T * wi) @ BD
        rhs += (wi * x[k][i]) @ BD
    return np.linalg.solve(G, rhs)


def update_A_rows(x, w, A, B, C, reg=0.0, prior=None):
    """All rows of :func:`update_A_row` at once; ``prior`` is ``(I, R)`` or ``None``."""
    I, R = A.shape
    G = np.zeros((I, R * R))
    rhs = np.zeros((I, R)) if prior is None else np.array(prior, dtype=float)
    for k in range(len(B)):
        BD = B[k] * C[k]
        G += w[k] @ _outer_rows(BD)
        rhs += (w[k] * x[k]) @ BD
    G = G.reshape(I, R, R) + reg * np.eye(R)
    return solve_spd_batch(G, rhs)


def update_Bk_row(j, k, x, w, A, c_k, rho, Z, mu_Z, Y, mu_Delta):
    """ADMM primal update of row ``j`` of ``B_k`` from observed entries of column ``j``.

    ``Z, mu_Z, Y, mu_Delta`` are the ``J_k x R`` auxiliary and dual
    matrices of slice ``k``.
    """
    AD = A * c_k
    wj = w[k][:, j]
    G = (AD.T * wj) @ AD + rho * np.eye(A.shape[1])
    prior = Z[j] - mu_Z[j] + Y[j] - mu_Delta[j]
    rhs = (wj * x[k][:, j]) @ AD + 0.5 * rho * prior
    return np.linalg.solve(G, rhs)


def update_Bk_rows(xk, wk, A, c_k, rho, M):
    """Every row of ``B_k`` at once.

    ``M = Z - mu_Z + Y - mu_Delta`` for slice ``k``. ``xk`` must already be
    zero at missing entries.
    """
    R = A.shape[1]
    AD = A * c_k
    G = (wk.T @ _outer_rows(AD)).reshape(-1, R, R) + rho * np.eye(R)
    rhs = xk.T @ AD + 0.5 * rho * M
    return solve_spd_batch(G, rhs)


def masked_d_system(x, w, A, B):
    """Gram matrices and right-hand sides of the row-wise ``C`` update.

    Returns ``G`` of shape ``(K, R, R)`` with
    ``G[k] = sum_{(i,j) observed} (a_i a_i^T) * (b_j b_j^T)`` and ``rhs`` of
    shape ``(K, R)`` with ``rhs[k] = diag(A^T (W_k * X_k) B_k)``.
    """
    I, R = A.shape
    K = len(B)
    outA = _outer_rows(A)
    G = np.empty((K, R, R))
    rhs = np.empty((K, R))
    for k in range(K):
        G[k] = np.sum(outA * (w[k] @ _outer_rows(B[k])), axis=0).reshape(R, R)
        rhs[k] = np.einsum("ir,ir->r", A, (w[k] * x[k]) @ B[k])
    return G, rhs


def update_C_row(k, x, w, A, B, rho, z, mu, lambda_D=0.0):
    """ADMM primal update of ``C[k]`` fitted to the observed entries of slice ``k``."""
    R = A.shape[1]
    G = np.zeros((R, R))
    rhs = np.zeros(R)
    wk, xk, Bk = w[k], x[k], B[k]
    for i, j in zip(*np.nonzero(wk)):
        v = A[i] * Bk[j]
        G += np.outer(v, v)
        rhs += xk[i, j] * v
    G += (lambda_D + 0.5 * rho) * np.eye(R)
    return np.linalg.solve(G, rhs + 0.5 * rho * (np.asarray(z) - np.asarray(mu)))
