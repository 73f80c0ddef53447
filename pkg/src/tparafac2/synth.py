"""Synthetic evolving-concept datasets, noise and missingness masks.

The concept generator mimics an ``authors x words x time`` tensor: each
component has a sparse author profile (``A``), a word profile that drifts
slowly over time and gradually swaps words from an initial set to a final
set (``B_k``), and a popularity curve (``C``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .model import Parafac2Factors, reconstruct
from .tensor import DimSpec, MaskStack, SliceStack, frobenius_norm

__all__ = [
    "ConceptSpec",
    "derive_seed",
    "generate",
    "random_parafac2",
    "max_congruence",
    "add_noise",
    "make_mask",
    "MASK_KINDS",
]

MASK_KINDS = ("random", "fiber2", "fiber3", "mixed")


def derive_seed(base, *keys) -> int:
    """Stable 32-bit seed for a sub-task identified by integer ``keys``."""
    return int(np.random.SeedSequence([int(base), *map(int, keys)]).generate_state(1)[0])


@dataclass
class ConceptSpec:
    n_concepts: int = 3
    dims: DimSpec = field(default_factory=lambda: DimSpec.regular(100, 80, 25))
    overlap_keep_fraction: float = 0.3
    drift_std: float = 0.1
    transition_prob: float = 0.3
    strength_range: tuple = (1.0, 15.0)
    max_congruence: float = 0.8
    author_fraction: float = 0.2
    word_fraction: float = 0.25
    fade_steps: int = 3
    max_retries: int = 10000

    def __post_init__(self):
        if isinstance(self.dims, dict):
            self.dims = DimSpec(**self.dims)
        self.strength_range = tuple(self.strength_range)
        for name in ("overlap_keep_fraction", "transition_prob", "author_fraction", "word_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.strength_range
        if lo > hi:
            raise ValueError(f"strength_range must be ordered, got {self.strength_range}")
        if self.drift_std < 0:
            raise ValueError("drift_std must be non-negative")
        if not self.dims.is_regular:
            raise ValueError("Evolving concepts need the same vocabulary size at every time step")
        if self.n_concepts > min(self.dims.I, self.dims.J[0], self.dims.K):
            raise ValueError("More concepts than the smallest tensor dimension")
        n_words, n_keep = self._word_counts()
        if n_keep + 2 * (n_words - n_keep) > self.dims.J[0]:
            raise ValueError("Vocabulary too small for disjoint initial-only and final-only word sets")

    def _word_counts(self):
        n_words = max(1, round(self.word_fraction * self.dims.J[0]))
        n_keep = min(n_words, math.ceil(self.overlap_keep_fraction * n_words))
        return n_words, n_keep

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = {"I": self.dims.I, "K": self.dims.K, "J": list(self.dims.J)}
        out["strength_range"] = list(self.strength_range)
        return out


def max_congruence(M: np.ndarray) -> float:
    """Largest cosine similarity between two distinct columns."""
    U = M / np.linalg.norm(M, axis=0)
    G = U.T @ U
    R = M.shape[1]
    if R < 2:
        return 0.0
    return float(max(G[r, s] for r, s in combinations(range(R), 2)))


def _strengths(rng, K, R, strength_range, max_cong, retries=10000) -> np.ndarray:
    lo, hi = strength_range
    for _ in range(retries):
        C = rng.uniform(lo, hi, size=(K, R))
        if max_congruence(C) <= max_cong:
            return C
    raise RuntimeError(f"Could not draw strengths with congruence <= {max_cong} in {retries} attempts")


def _evolve_words(rng, spec: ConceptSpec) -> np.ndarray:
    """Word profile of one concept over time, shape ``(K, J)``."""
    J, K = spec.dims.J[0], spec.dims.K
    n_words, n_keep = spec._word_counts()
    perm = rng.permutation(J)
    common = perm[:n_keep]
    initial_only = list(perm[n_keep:n_words])
    final_only = list(perm[n_words:n_words + (n_words - n_keep)])

    b = np.zeros(J)
    b[np.concatenate([common, initial_only]).astype(int)] = rng.standard_normal(n_words)
    live = np.zeros(J, dtype=bool)
    live[common] = True
    live[initial_only] = True
    fading = {}  # word -> (start value, steps left)

    # Transition starts somewhere in the middle half of the time axis.
    t0 = int(rng.integers(K // 4, max(K // 4 + 1, (3 * K) // 4)))
    profile = np.empty((K, J))
    profile[0] = b
    for k in range(1, K):
        b[live] += rng.normal(0.0, spec.drift_std, size=int(live.sum()))
        for word, (start, left) in list(fading.items()):
            left -= 1
            b[word] = start * left / spec.fade_steps
            if left == 0:
                del fading[word]
            else:
                fading[word] = (start, left)
        if k >= t0 and rng.uniform() < spec.transition_prob:
            event = rng.integers(3)  # 0: fade out, 1: fade in, 2: both
            if event in (0, 2) and initial_only:
                word = initial_only.pop(int(rng.integers(len(initial_only))))
                live[word] = False
                fading[word] = (b[word], spec.fade_steps)
            if event in (1, 2) and final_only:
                word = final_only.pop(int(rng.integers(len(final_only))))
                b[word] = rng.normal(0.0, spec.drift_std)
                live[word] = True
        profile[k] = b
    return profile


def generate(spec: ConceptSpec, seed=None):
    """Draw one evolving-concept dataset.

    Returns the noiseless data ``X_k = A D_k B_k^T`` and the ground-truth
    factors. The ground truth is not required to have constant cross
    products.
    """
    rng = np.random.default_rng(seed)
    I, J, K, R = spec.dims.I, spec.dims.J[0], spec.dims.K, spec.n_concepts
    n_authors = max(1, round(spec.author_fraction * I))

    A = np.zeros((I, R))
    for r in range(R):
        authors = rng.choice(I, size=n_authors, replace=False)
        A[authors, r] = rng.standard_normal(n_authors)

    words = np.stack([_evolve_words(rng, spec) for _ in range(R)], axis=2)  # (K, J, R)
    C = _strengths(rng, K, R, spec.strength_range, spec.max_congruence, spec.max_retries)
    truth = Parafac2Factors(A, [words[k] for k in range(K)], C)
    return reconstruct(truth), truth


def random_parafac2(dims: DimSpec, R: int, seed=None, strength_range=(1.0, 15.0), max_cong: float = 0.8):
    """Ground truth that satisfies the constant cross-product constraint exactly.

    ``B_k = P_k B`` with random orthonormal ``P_k``; ``A`` and ``B`` are
    standard normal and ``C`` uniform within ``strength_range``.
    """
    rng = np.random.default_rng(seed)
    if R > min(dims.J):
        raise ValueError("R must not exceed any J_k")
    A = rng.standard_normal((dims.I, R))
    B = rng.standard_normal((R, R))
    Bk = [np.linalg.qr(rng.standard_normal((j, R)))[0] @ B for j in dims.J]
    C = _strengths(rng, dims.K, R, strength_range, max_cong)
    truth = Parafac2Factors(A, Bk, C)
    return reconstruct(truth), truth


def add_noise(x: SliceStack, eta: float, seed=None) -> SliceStack:
    """``X + eta ||X|| Theta / ||Theta||`` with standard normal ``Theta``.

    The relative error ``||X_noisy - X|| / ||X||`` equals ``eta`` exactly.
    """
    if eta < 0:
        raise ValueError("Noise level must be non-negative")
    if eta == 0:
        return x.copy()
    norm = frobenius_norm(x)
    if norm == 0:
        raise ValueError("Cannot scale noise relative to an all-zero tensor")
    rng = np.random.default_rng(seed)
    theta = [rng.standard_normal(s.shape) for s in x]
    theta_norm = np.sqrt(sum(np.sum(t * t) for t in theta))
    scale = eta * norm / theta_norm
    return SliceStack([s + scale * t for s, t in zip(x, theta)], copy=False)


def _repair_columns(W: np.ndarray, rng) -> None:
    """Give every all-missing column one observed entry, keeping the missing count."""
    for col in np.flatnonzero(W.sum(axis=0) == 0):
        donors = np.flatnonzero(W.sum(axis=0) >= 2)
        if donors.size == 0:
            raise ValueError("Missing fraction too high to keep every mode-1 fiber observed")
        W[rng.integers(W.shape[0]), col] = 1
        dcol = donors[rng.integers(donors.size)]
        rows = np.flatnonzero(W[:, dcol])
        W[rows[rng.integers(rows.size)], dcol] = 0


def _pick_fibers(n_total: int, n_pick: int, groups: np.ndarray, group_size: int, rng) -> np.ndarray:
    """Choose ``n_pick`` fibers without removing a whole group of ``group_size``.

    ``groups[f]`` labels the mode-1 fiber family each candidate fiber
    belongs to; a family may never lose all its members.
    """
    n_groups = groups.max() + 1
    if n_pick > n_groups * (group_size - 1):
        raise ValueError("Requested fraction would remove a full mode-1 fiber")
    chosen = rng.permutation(n_total)[:n_pick]
    counts = np.bincount(groups[chosen], minlength=n_groups)
    while (counts >= group_size).any():
        g = int(np.flatnonzero(counts >= group_size)[0])
        members = np.flatnonzero(groups[chosen] == g)
        drop = members[rng.integers(members.size)]
        pool = np.setdiff1d(np.flatnonzero(counts[groups] < group_size - 1), chosen)
        pool = pool[groups[pool] != g]
        if pool.size == 0:
            raise ValueError("Requested fraction would remove a full mode-1 fiber")
        new = pool[rng.integers(pool.size)]
        counts[g] -= 1
        counts[groups[new]] += 1
        chosen[drop] = new
    return chosen


def make_mask(dims: DimSpec, kind: str, fraction: float, seed=None) -> MaskStack:
    """Binary observation mask with about ``fraction`` of the entries missing.

    ``random`` removes uniformly chosen entries (exactly ``round(fraction *
    size)`` of them); ``fiber2`` removes whole mode-2 fibers (row ``i`` of
    slice ``k``); ``fiber3`` removes whole mode-3 fibers (entry ``(i, j)`` in
    every slice); ``mixed`` takes half the budget from mode-2 fibers and
    the rest at random. No mode-1 fiber is ever entirely missing.
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    if kind not in MASK_KINDS:
        raise ValueError(f"Unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
    rng = np.random.default_rng(seed)
    I, K, J = dims.I, dims.K, list(dims.J)
    offsets = np.concatenate([[0], np.cumsum(J)])
    total = I * offsets[-1]
    W = np.ones((I, offsets[-1]))  # slices side by side; columns are mode-1 fibers

    def split(W):
        return MaskStack([W[:, offsets[k]:offsets[k + 1]] for k in range(K)])

    if fraction == 0:
        return split(W)

    if kind == "fiber3":
        if not dims.is_regular:
            raise ValueError("Mode-3 fibers need slices of equal width")
        n_pick = round(fraction * I * J[0])
        groups = np.tile(np.arange(J[0]), I)  # fiber (i, j) -> column j
        chosen = _pick_fibers(I * J[0], n_pick, groups, I, rng)
        i, j = np.divmod(chosen, J[0])
        for k in range(K):
            W[i, offsets[k] + j] = 0
        return split(W)

    n_missing = round(fraction * total)
    n_random = n_missing
    if kind in ("fiber2", "mixed"):
        budget = n_missing if kind == "fiber2" else n_missing / 2
        n_pick = round(budget * K / offsets[-1])
        groups = np.repeat(np.arange(K), I)  # fiber (k, i) -> slice k
        chosen = _pick_fibers(I * K, n_pick, groups, I, rng)
        for f in chosen:
            k, i = divmod(int(f), I)
            W[i, offsets[k]:offsets[k + 1]] = 0
        if kind == "fiber2":
            return split(W)
        n_random = n_missing - int(total - W.sum())

    if n_random > 0:
        observed = np.flatnonzero(W.ravel())
        drop = rng.choice(observed, size=n_random, replace=False)
        W.ravel()[drop] = 0
        _repair_columns(W, rng)
    return split(W)
