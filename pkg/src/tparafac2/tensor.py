"""Frontal-slice stacks, binary masks and their on-disk bundle layout."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "DimSpec",
    "SliceStack",
    "MaskStack",
    "frobenius_norm",
    "hadamard_residual",
    "save_stack",
    "load_stack",
    "save_mask",
    "load_mask",
]


@dataclass(frozen=True)
class DimSpec:
    """Dimensions of a (possibly ragged) third-order tensor."""

    I: int
    K: int
    J: tuple

    def __post_init__(self):
        J = tuple(int(j) for j in (self.J if np.iterable(self.J) else [self.J] * self.K))
        object.__setattr__(self, "J", J)
        if self.I < 1 or self.K < 1 or any(j < 1 for j in J):
            raise ValueError(f"All dimensions must be positive, got I={self.I}, K={self.K}, J={J}")
        if len(J) != self.K:
            raise ValueError(f"Expected {self.K} column counts, got {len(J)}")

    @classmethod
    def regular(cls, I: int, J: int, K: int) -> "DimSpec":
        return cls(I=I, K=K, J=(J,) * K)

    @property
    def is_regular(self) -> bool:
        return len(set(self.J)) == 1

    @property
    def size(self) -> int:
        return self.I * sum(self.J)


class SliceStack:
    """Ordered list of K frontal slices, slice k of shape ``(I, J_k)``.

    Slices are stored independently as float64 arrays, so ragged second
    modes need no padding.
    """

    def __init__(self, slices: Sequence[np.ndarray], copy: bool = True):
        if len(slices) == 0:
            raise ValueError("A slice stack needs at least one slice")
        arrays = [np.array(s, dtype=np.float64, copy=copy) for s in slices]
        for k, s in enumerate(arrays):
            if s.ndim != 2:
                raise ValueError(f"Slice {k} is not a matrix (ndim={s.ndim})")
            if s.shape[0] != arrays[0].shape[0]:
                raise ValueError(
                    f"Slice {k} has {s.shape[0]} rows, expected {arrays[0].shape[0]}"
                )
            if 0 in s.shape:
                raise ValueError(f"Slice {k} is empty")
            if not np.all(np.isfinite(s)):
                raise ValueError(f"Slice {k} contains non-finite values")
        self.slices = arrays

    @classmethod
    def from_array(cls, tensor: np.ndarray) -> "SliceStack":
        """Split a dense ``I x J x K`` array into its frontal slices."""
        tensor = np.asarray(tensor, dtype=np.float64)
        return cls([tensor[:, :, k] for k in range(tensor.shape[2])])

    @property
    def I(self) -> int:
        return self.slices[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.slices)

    @property
    def J(self) -> tuple:
        return tuple(s.shape[1] for s in self.slices)

    @property
    def dims(self) -> DimSpec:
        return DimSpec(I=self.I, K=self.K, J=self.J)

    @property
    def is_regular(self) -> bool:
        return len(set(self.J)) == 1

    def to_array(self) -> np.ndarray:
        if not self.is_regular:
            raise ValueError("Ragged stacks cannot be converted to a dense array")
        return np.stack(self.slices, axis=2)

    def copy(self) -> "SliceStack":
        return SliceStack(self.slices, copy=True)

    def __len__(self) -> int:
        return self.K

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.slices)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.slices[k]

    def __repr__(self) -> str:
        return f"SliceStack(I={self.I}, J={self.J}, K={self.K})"


class MaskStack:
    """Binary indicator congruent to a :class:`SliceStack` (1 = observed).

    A mode-1 fiber (fixed ``j, k``) that is entirely missing is rejected,
    since the matching row of ``B_k`` is then unidentifiable. Pass
    ``check_fibers=False`` to build such a mask for plain elementwise use;
    the fitting routines call :meth:`check_fibers` themselves.
    """

    def __init__(self, slices: Sequence[np.ndarray], check_fibers: bool = True):
        if len(slices) == 0:
            raise ValueError("A mask needs at least one slice")
        arrays = []
        for k, s in enumerate(slices):
            s = np.asarray(s)
            if s.ndim != 2:
                raise ValueError(f"Mask slice {k} is not a matrix")
            if not np.all((s == 0) | (s == 1)):
                raise ValueError(f"Mask slice {k} has entries outside {{0, 1}}")
            if s.shape[0] != np.asarray(slices[0]).shape[0]:
                raise ValueError(f"Mask slice {k} has a mismatched row count")
            arrays.append(s.astype(np.float64))
        self.slices = arrays
        if check_fibers:
            self.check_fibers()

    def check_fibers(self) -> None:
        """Raise ``ValueError`` if some mode-1 fiber is entirely missing."""
        for k, s in enumerate(self.slices):
            empty_fibers = np.flatnonzero(s.sum(axis=0) == 0)
            if empty_fibers.size:
                raise ValueError(
                    f"Mask slice {k} has fully missing mode-1 fibers at columns {empty_fibers.tolist()}"
                )

    @classmethod
    def ones_like(cls, x: SliceStack) -> "MaskStack":
        return cls([np.ones_like(s) for s in x])

    @property
    def I(self) -> int:
        return self.slices[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.slices)

    @property
    def J(self) -> tuple:
        return tuple(s.shape[1] for s in self.slices)

    @property
    def n_missing(self) -> int:
        return int(sum(s.size - s.sum() for s in self.slices))

    @property
    def missing_fraction(self) -> float:
        return self.n_missing / sum(s.size for s in self.slices)

    def check_congruent(self, x: SliceStack) -> None:
        if self.K != x.K or any(w.shape != s.shape for w, s in zip(self.slices, x.slices)):
            raise ValueError(
                f"Mask shapes (I={self.I}, J={self.J}, K={self.K}) do not match "
                f"data shapes (I={x.I}, J={x.J}, K={x.K})"
            )

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.slices)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.slices[k]

    def __len__(self) -> int:
        return self.K

    def __repr__(self) -> str:
        return f"MaskStack(I={self.I}, J={self.J}, K={self.K}, missing={self.n_missing})"


def _check_pair(x: SliceStack, y: SliceStack) -> None:
    if x.K != y.K or any(a.shape != b.shape for a, b in zip(x.slices, y.slices)):
        raise ValueError(f"Stacks are not congruent: {x!r} vs {y!r}")


def frobenius_norm(x: SliceStack, mask: Optional[MaskStack] = None) -> float:
    """Frobenius norm over all (observed, if ``mask`` is given) entries."""
    if mask is None:
        return float(np.sqrt(sum(np.sum(s * s) for s in x)))
    mask.check_congruent(x)
    return float(np.sqrt(sum(np.sum((w * s) ** 2) for s, w in zip(x, mask))))


def hadamard_residual(
    x: SliceStack, xhat: SliceStack, mask: Optional[MaskStack] = None
) -> SliceStack:
    """Elementwise ``x - xhat``, zeroed wherever ``mask`` is 0."""
    _check_pair(x, xhat)
    if mask is None:
        return SliceStack([a - b for a, b in zip(x, xhat)], copy=False)
    mask.check_congruent(x)
    return SliceStack([w * (a - b) for a, b, w in zip(x, xhat, mask)], copy=False)


# Bundle layout: manifest.json plus one row-major little-endian float64 file per slice.

_DTYPE = "<f8"


def _write_matrix(path: Path, matrix: np.ndarray) -> None:
    np.ascontiguousarray(matrix, dtype=_DTYPE).tofile(path)


def _read_matrix(path: Path, shape: tuple) -> np.ndarray:
    data = np.fromfile(path, dtype=_DTYPE)
    if data.size != shape[0] * shape[1]:
        raise ValueError(f"{path} holds {data.size} values, expected shape {shape}")
    return data.reshape(shape).astype(np.float64)


def _write_manifest(directory: Path, manifest: dict) -> None:
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def read_manifest(directory) -> dict:
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("dtype") != "f64le":
        raise ValueError(f"Unsupported dtype {manifest.get('dtype')!r} in {directory}")
    return manifest


def save_stack(x: SliceStack, directory, extra: Optional[dict] = None, prefix: str = "slice") -> Path:
    """Write ``x`` as a bundle: ``manifest.json`` and ``<prefix>_000.bin`` ..."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(x):
        _write_matrix(directory / f"{prefix}_{k:03d}.bin", s)
    manifest = {"I": x.I, "K": x.K, "J": list(x.J), "dtype": "f64le", "kind": prefix}
    if extra:
        manifest.update(extra)
    _write_manifest(directory, manifest)
    return directory


def _load_slices(directory: Path, prefix: str) -> list:
    manifest = read_manifest(directory)
    I, K, J = manifest["I"], manifest["K"], manifest["J"]
    if len(J) != K:
        raise ValueError(f"Manifest in {directory} lists {len(J)} column counts for K={K}")
    return [_read_matrix(directory / f"{prefix}_{k:03d}.bin", (I, J[k])) for k in range(K)]


def load_stack(directory) -> SliceStack:
    return SliceStack(_load_slices(Path(directory), "slice"), copy=False)


def save_mask(mask: MaskStack, directory, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, w in enumerate(mask):
        _write_matrix(directory / f"mask_{k:03d}.bin", w)
    manifest = {"I": mask.I, "K": mask.K, "J": list(mask.J), "dtype": "f64le", "kind": "mask"}
    if extra:
        manifest.update(extra)
    _write_manifest(directory, manifest)
    return directory


def load_mask(directory) -> MaskStack:
    return MaskStack(_load_slices(Path(directory), "mask"))
