"""Method dispatch, multi-start fitting and benchmark grids.

A *method* is one of ``als``, ``aoadmm`` (PARAFAC2, optionally with ridge
on every mode) and ``tparafac2`` (temporal smoothness on ``B_k``), combined
with a missing-data strategy ``none``, ``em`` or ``rw``. A *cell* is one
(dataset, mask, method) combination fitted from several shared random
starts; its result is the best valid run.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .als import fit_als
from .aoadmm import NonFiniteLossError, SolverConfig, fit, random_init
from .evaluation import CSV_COLUMNS, NoValidRunError, best_run, detect_degenerate, fms
from .missing import fit_em, fit_rw
from .synth import ConceptSpec, add_noise, derive_seed, generate, make_mask, random_parafac2
from .tensor import DimSpec, MaskStack, SliceStack

__all__ = [
    "METHODS",
    "MISSING",
    "MethodSpec",
    "run_method",
    "fit_starts",
    "GridSpec",
    "build_datasets",
    "run_grid",
    "summarize",
    "parse_size",
    "select_best",
    "RUN_COLUMNS",
    "CELL_COLUMNS",
    "SUMMARY_COLUMNS",
]

logger = logging.getLogger(__name__)

METHODS = ("als", "aoadmm", "tparafac2")
MISSING = ("none", "em", "rw")

# Seed streams; keys keep data, noise, masks and starts independent.
_DATA, _NOISE, _MASK, _START = 1, 2, 3, 4


def parse_size(text: str) -> DimSpec:
    """``"50x40x15"`` -> ``DimSpec`` with ``I=50, J=40, K=15``."""
    try:
        I, J, K = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"Size must look like IxJxK, got {text!r}") from None
    return DimSpec.regular(I, J, K)


@dataclass
class MethodSpec:
    """A fitting method with its hyperparameters."""

    method: str = "aoadmm"
    missing: str = "none"
    lambda_A: float = 0.0
    lambda_B: float = 0.0
    lambda_D: float = 0.0
    ridge_B: float = 0.0
    label: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"Unknown method {self.method!r}; expected one of {METHODS}")
        if self.missing not in MISSING:
            raise ValueError(f"Unknown missing-data strategy {self.missing!r}; expected one of {MISSING}")
        if self.method == "als":
            if self.missing == "rw":
                raise ValueError("ALS supports only the 'none' and 'em' strategies")
            if max(self.lambda_A, self.lambda_B, self.lambda_D, self.ridge_B) > 0:
                raise ValueError("ALS does not take regularization")
        if self.method == "aoadmm" and self.lambda_B > 0:
            raise ValueError("Temporal smoothness needs method 'tparafac2'")
        if self.method == "tparafac2" and not self.lambda_B > 0:
            raise ValueError("Method 'tparafac2' needs lambda_B > 0")
        if self.label is None:
            self.label = self.default_label()

    def default_label(self) -> str:
        parts = [self.method]
        if self.method == "aoadmm" and max(self.lambda_A, self.lambda_D, self.ridge_B) > 0:
            parts.append(f"ridge{_fmt(self.lambda_A)}")
        if self.method == "tparafac2":
            parts.append(f"l{_fmt(self.lambda_A)}")
            parts.append(f"lb{_fmt(self.lambda_B)}")
        if self.missing != "none":
            parts.append(self.missing)
        return "-".join(parts)

    def solver_config(self, base: SolverConfig) -> SolverConfig:
        return base.replace(lambda_A=self.lambda_A, lambda_B=self.lambda_B,
                            lambda_D=self.lambda_D, ridge_B=self.ridge_B)

    @classmethod
    def expand(cls, entry: dict) -> list:
        """All methods described by a grid entry; list-valued fields are crossed.

        ``ridge`` sets ``lambda_A``, ``lambda_D`` and ``ridge_B`` together
        (a list of values varies all three in lockstep) unless they are
        given explicitly.
        """
        keys = list(entry)
        values = [v if isinstance(v, list) else [v] for v in entry.values()]
        out = []
        for combo in itertools.product(*values):
            kw = dict(zip(keys, combo))
            if "ridge" in kw:
                r = kw.pop("ridge")
                for name in ("lambda_A", "lambda_D", "ridge_B"):
                    kw.setdefault(name, r)
            out.append(cls(**kw))
        return out


def _fmt(v: float) -> str:
    return f"{v:g}"


def run_method(spec: MethodSpec, x: SliceStack, mask: Optional[MaskStack], cfg: SolverConfig, init):
    """Fit one start. Returns ``(factors, report)``."""
    if spec.missing == "none" and mask is not None:
        raise ValueError("A mask was given but the missing-data strategy is 'none'")
    if spec.missing != "none" and mask is None:
        raise ValueError(f"Strategy {spec.missing!r} needs a mask")
    if spec.method == "als":
        return fit_als(x, cfg.R, tol=cfg.eps_rel, abs_tol=cfg.eps_abs, max_iter=cfg.max_outer,
                       mask=mask, init=init, nonneg_C=cfg.nonneg_C)
    cfg = spec.solver_config(cfg)
    if spec.missing == "em":
        return fit_em(x, mask, cfg, init=init)
    if spec.missing == "rw":
        return fit_rw(x, mask, cfg, init=init)
    return fit(x, cfg, init=init)


@dataclass
class StartResult:
    index: int
    init_seed: int
    factors: object
    report: object
    degenerate: bool
    error: Optional[str] = None


def fit_starts(spec: MethodSpec, x: SliceStack, mask: Optional[MaskStack], cfg: SolverConfig,
               init_seeds: Sequence[int]) -> list:
    """Fit from each seed. Numerical failures are recorded, not raised."""
    results = []
    for n, seed in enumerate(init_seeds):
        init = random_init(x.I, x.J, x.K, cfg.R, seed=seed)
        try:
            factors, report = run_method(spec, x, mask, cfg, init)
        except (NonFiniteLossError, np.linalg.LinAlgError) as err:
            logger.warning("Start %d of %s failed: %s", n, spec.label, err)
            results.append(StartResult(n, seed, None, None, False, error=str(err)))
            continue
        results.append(StartResult(n, seed, factors, report, detect_degenerate(factors)))
    return results


def select_best(results: Sequence[StartResult]) -> int:
    """Index into ``results`` of the best valid run; raises :class:`NoValidRunError`."""
    ok = [r for r in results if r.report is not None]
    if not ok:
        raise NoValidRunError("Every start failed numerically")
    return ok[best_run([(r.factors, r.report) for r in ok])].index


@dataclass
class GridSpec:
    """Benchmark grid.

    ``noise`` is a level or a list of levels; every dataset is fitted at
    every level. ``masks`` entries look like ``{"kind": "random", "fraction": 0.5}``
    (``{"kind": "none"}`` for full data); ``n_masks`` masks are drawn per
    kind and dataset. ``methods`` entries are expanded with
    :meth:`MethodSpec.expand`. ``truth`` is ``"concepts"`` for the
    evolving-concept generator or ``"parafac2"`` for ground truth with
    constant cross products.
    """

    n_datasets: int = 5
    size: str = "50x40x15"
    R: int = 3
    noise: object = 0.0
    truth: str = "concepts"
    masks: list = field(default_factory=lambda: [{"kind": "none"}])
    n_masks: int = 1
    methods: list = field(default_factory=lambda: [{"method": "aoadmm"}])
    starts: int = 5
    seed: int = 0
    solver: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_datasets < 1 or self.starts < 1 or self.n_masks < 1:
            raise ValueError("n_datasets, n_masks and starts must be positive")
        if self.truth not in ("concepts", "parafac2"):
            raise ValueError(f"Unknown truth generator {self.truth!r}")
        parse_size(self.size)
        if any(eta < 0 for eta in self.noise_levels()):
            raise ValueError("Noise levels must be non-negative")
        for m in self.masks:
            if m.get("kind") != "none":
                if "fraction" not in m:
                    raise ValueError(f"Mask entry {m} needs a fraction")
        self.method_specs()
        self.solver_config()

    def noise_levels(self) -> list:
        return [float(v) for v in self.noise] if isinstance(self.noise, list) else [float(self.noise)]

    def method_specs(self) -> list:
        specs = [s for entry in self.methods for s in MethodSpec.expand(entry)]
        labels = [s.label for s in specs]
        if len(set(labels)) != len(labels):
            raise ValueError(f"Duplicate method labels in grid: {labels}")
        return specs

    def solver_config(self) -> SolverConfig:
        return SolverConfig.from_dict({"R": self.R, "seed": self.seed, **self.solver})

    def mask_labels(self) -> list:
        """``(label, entry, entry_index, draw)`` for every mask of a dataset."""
        out = []
        for e, m in enumerate(self.masks):
            if m["kind"] == "none":
                out.append(("none", None, e, 0))
            else:
                for n in range(self.n_masks):
                    out.append((f"{m['kind']}:{m['fraction']:g}#{n}", m, e, n))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "GridSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def build_datasets(grid: GridSpec):
    """``(dataset, noise, x, truth)`` for every dataset and noise level of the grid.

    The noiseless data depend only on the dataset index, so all noise
    levels perturb the same ground truth.
    """
    dims = parse_size(grid.size)
    out = []
    for d in range(grid.n_datasets):
        data_seed = derive_seed(grid.seed, _DATA, d)
        if grid.truth == "concepts":
            clean, truth = generate(ConceptSpec(n_concepts=grid.R, dims=dims), seed=data_seed)
        else:
            clean, truth = random_parafac2(dims, grid.R, seed=data_seed)
        for v, eta in enumerate(grid.noise_levels()):
            x = add_noise(clean, eta, seed=derive_seed(grid.seed, _NOISE, d, v)) if eta > 0 else clean
            out.append((d, eta, x, truth))
    return out


def _cell_task(args):
    key, mask_label, spec, x, mask, truth, cfg, seeds = args
    d, eta = key
    results = fit_starts(spec, x, mask, cfg, seeds)
    run_rows = []
    for r in results:
        row = {"dataset": d, "noise": eta, "mask": mask_label, "method": spec.label,
               "seed": r.init_seed, "start": r.index}
        if r.report is None:
            row.update(status="error", error=r.error)
        else:
            row.update(_run_row(r, truth))
            row["status"] = "ok" if r.report.feasible and not r.degenerate else (
                "infeasible" if not r.report.feasible else "degenerate")
        run_rows.append(row)

    cell = {"dataset": d, "noise": eta, "mask": mask_label, "method": spec.label,
            "total_seconds": sum(row.get("seconds", 0.0) for row in run_rows)}
    try:
        b = select_best(results)
    except NoValidRunError:
        cell.update(status="no_valid_run", seed=None)
        return run_rows, cell
    best = next(row for row in run_rows if row["start"] == b)
    cell.update({k: best[k] for k in ("seed", "loss", "fms", "fms_A", "fms_B", "fms_C", "iters",
                                       "seconds", "feasible", "degenerate")})
    cell["status"] = "ok"
    return run_rows, cell


def _run_row(r: StartResult, truth) -> dict:
    score = fms(r.factors, truth)
    fA, fB, fC = score.mode_scores()
    return {
        "loss": r.report.final_loss, "fms": score.total, "fms_A": fA, "fms_B": fB, "fms_C": fC,
        "iters": r.report.n_outer, "seconds": r.report.wall_time, "feasible": r.report.feasible,
        "degenerate": r.degenerate, "exit_reason": r.report.exit_reason,
        "seconds_per_iter": r.report.wall_time / max(r.report.n_outer, 1),
        "max_gap": max(r.report.constraint.feasibility_gaps.values(), default=0.0),
        "crossprod_dev": r.report.constraint.max_crossprod_deviation,
    }


def run_grid(grid: GridSpec, parallel: int = 1):
    """Run every (dataset, mask, method) cell of ``grid``.

    All methods of a (dataset, mask) pair share the same starts. Cells run
    in a process pool when ``parallel > 1``; each fit stays single-threaded
    in its worker so timings remain comparable. Returns ``(run_rows,
    cell_rows)`` in grid order regardless of ``parallel``.
    """
    cfg = grid.solver_config()
    specs = grid.method_specs()
    datasets = build_datasets(grid)
    tasks = []
    for d, eta, x, truth in datasets:
        for mask_label, mask_entry, e, n in grid.mask_labels():
            mask = None
            if mask_entry is not None:
                mseed = derive_seed(grid.seed, _MASK, d, e, n)
                mask = make_mask(x.dims, mask_entry["kind"], mask_entry["fraction"], seed=mseed)
            seeds = [derive_seed(grid.seed, _START, d, e, n, s) for s in range(grid.starts)]
            for spec in specs:
                if (mask is None) != (spec.missing == "none"):
                    continue
                tasks.append(((d, eta), mask_label, spec, x, mask, truth, cfg, seeds))

    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(_cell_task, tasks))
    else:
        outcomes = [_cell_task(t) for t in tasks]
    run_rows = [row for rows, _ in outcomes for row in rows]
    cell_rows = [cell for _, cell in outcomes]
    return run_rows, cell_rows


def summarize(cell_rows: Sequence[dict]) -> list:
    """Median best-run FMS and median total wall time per (noise, mask kind, method).

    Mask labels are grouped by kind and fraction, ignoring the mask index.
    """
    groups = {}
    for row in cell_rows:
        key = (row["noise"], row["mask"].split("#")[0], row["method"])
        groups.setdefault(key, []).append(row)
    out = []
    for (eta, mask, method), rows in groups.items():
        scores = [r["fms"] for r in rows if r.get("status") == "ok"]
        out.append({
            "noise": eta,
            "mask": mask,
            "method": method,
            "cells": len(rows),
            "valid": len(scores),
            "median_fms": float(np.median(scores)) if scores else math.nan,
            "median_seconds": float(np.median([r["total_seconds"] for r in rows])),
        })
    return out


RUN_COLUMNS = CSV_COLUMNS + ["noise", "start", "exit_reason", "seconds_per_iter", "max_gap", "crossprod_dev", "error"]
CELL_COLUMNS = CSV_COLUMNS + ["noise", "total_seconds"]
SUMMARY_COLUMNS = ["noise", "mask", "method", "cells", "valid", "median_fms", "median_seconds"]
