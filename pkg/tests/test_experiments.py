import json
import math

import numpy as np
import pytest

from tparafac2 import experiments
from tparafac2.aoadmm import NonFiniteLossError, SolverConfig
from tparafac2.evaluation import NoValidRunError
from tparafac2.experiments import (
    GridSpec,
    MethodSpec,
    build_datasets,
    fit_starts,
    parse_size,
    run_grid,
    run_method,
    select_best,
    summarize,
)
from tparafac2.synth import make_mask
from tparafac2.tensor import DimSpec, SliceStack

from .conftest import random_stack

TIMING = {"seconds", "total_seconds", "seconds_per_iter"}


def _toy_grid(**changes):
    base = dict(
        n_datasets=2, size="12x10x6", R=2, noise=0.5, starts=2, seed=3,
        masks=[{"kind": "none"}, {"kind": "random", "fraction": 0.3}],
        methods=[{"method": "aoadmm", "missing": "none"},
                 {"method": "tparafac2", "lambda_A": 1.0, "lambda_D": 1.0, "lambda_B": 10.0,
                  "missing": ["none", "em"]}],
        solver={"max_outer": 60},
    )
    base.update(changes)
    return GridSpec(**base)


def _strip_timing(rows):
    return [{k: v for k, v in row.items() if k not in TIMING} for row in rows]


def test_parse_size():
    assert parse_size("50x40x15") == DimSpec.regular(50, 40, 15)
    with pytest.raises(ValueError):
        parse_size("50x40")


@pytest.mark.parametrize("bad", [
    {"method": "cp"}, {"missing": "drop"}, {"method": "als", "missing": "rw"},
    {"method": "als", "lambda_A": 1.0}, {"method": "aoadmm", "lambda_B": 1.0},
    {"method": "tparafac2", "lambda_B": 0.0},
])
def test_method_spec_validation(bad):
    with pytest.raises(ValueError):
        MethodSpec(**bad)


def test_method_labels():
    assert MethodSpec().label == "aoadmm"
    assert MethodSpec(lambda_A=1, lambda_D=1, ridge_B=1, missing="em").label == "aoadmm-ridge1-em"
    assert MethodSpec("tparafac2", "rw", 10, 100, 10).label == "tparafac2-l10-lb100-rw"
    assert MethodSpec("als", "em").label == "als-em"
    assert MethodSpec(label="mine").label == "mine"


def test_expand_crosses_lists_and_ties_ridge():
    specs = MethodSpec.expand({"method": "aoadmm", "ridge": [0.001, 1.0], "missing": ["em", "rw"]})
    assert len(specs) == 4
    for s in specs:
        assert s.lambda_A == s.lambda_D == s.ridge_B
    specs = MethodSpec.expand({"method": "tparafac2", "ridge": 10.0, "ridge_B": 0.0, "lambda_B": [10, 1000]})
    assert [(s.lambda_A, s.ridge_B, s.lambda_B) for s in specs] == [(10.0, 0.0, 10), (10.0, 0.0, 1000)]


def test_solver_config_overrides():
    cfg = MethodSpec("tparafac2", lambda_A=2.0, lambda_B=5.0).solver_config(SolverConfig(R=4))
    assert (cfg.R, cfg.lambda_A, cfg.lambda_B, cfg.lambda_D) == (4, 2.0, 5.0, 0.0)


def test_run_method_dispatch(rng):
    x = random_stack(rng, 6, 5, 4)
    w = make_mask(x.dims, "random", 0.2, seed=0)
    cfg = SolverConfig(R=2, max_outer=3)
    cases = [
        (MethodSpec("als"), None, "als"),
        (MethodSpec("als", "em"), w, "als-em"),
        (MethodSpec("aoadmm"), None, "aoadmm"),
        (MethodSpec("tparafac2", "em", lambda_B=100.0), w, "tparafac2-em"),
        (MethodSpec("aoadmm", "rw"), w, "aoadmm-rw"),
    ]
    for spec, mask, method in cases:
        _, report = run_method(spec, x, mask, cfg, init=0)
        assert report.method == method
    with pytest.raises(ValueError):
        run_method(MethodSpec("aoadmm"), x, w, cfg, init=0)
    with pytest.raises(ValueError):
        run_method(MethodSpec("aoadmm", "em"), x, None, cfg, init=0)


def test_fit_starts_records_failures(rng, monkeypatch):
    x = random_stack(rng, 6, 5, 4)
    cfg = SolverConfig(R=2, max_outer=5)

    def boom(*args, **kwargs):
        raise NonFiniteLossError("diverged")

    monkeypatch.setattr(experiments, "run_method", boom)
    results = fit_starts(MethodSpec(), x, None, cfg, [1, 2])
    assert [r.error for r in results] == ["diverged", "diverged"]
    with pytest.raises(NoValidRunError):
        select_best(results)


def test_fit_starts_selects_lowest_loss(rng):
    x = random_stack(rng, 6, 5, 4)
    cfg = SolverConfig(R=2, lambda_A=1.0, lambda_D=1.0, ridge_B=1.0, max_outer=500)
    results = fit_starts(MethodSpec(lambda_A=1.0, lambda_D=1.0, ridge_B=1.0), x, None, cfg, [1, 2, 3])
    valid = [r for r in results if r.report.feasible and not r.degenerate]
    if valid:
        assert select_best(results) == min(valid, key=lambda r: r.report.final_loss).index


def test_grid_validation(tmp_path):
    with pytest.raises(ValueError):
        _toy_grid(truth="random")
    with pytest.raises(ValueError):
        _toy_grid(masks=[{"kind": "random"}])
    with pytest.raises(ValueError):
        _toy_grid(methods=[{"method": "aoadmm"}, {"method": "aoadmm"}])
    with pytest.raises(ValueError):
        _toy_grid(solver={"max_iterations": 5})
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(_toy_grid().to_dict()))
    assert GridSpec.from_json(path) == _toy_grid()


def test_datasets_share_clean_data_across_noise_levels():
    grid = _toy_grid(noise=[0.0, 0.5, 2.0])
    data = build_datasets(grid)
    assert len(data) == 6
    clean = data[0][2]
    for d, eta, x, truth in data[:3]:
        diff = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(x, clean)))
        norm = np.sqrt(sum(np.sum(a**2) for a in clean))
        assert diff / norm == pytest.approx(eta, abs=1e-12)


def test_grid_parafac2_truth():
    grid = _toy_grid(truth="parafac2", noise=0.0)
    _, _, x, truth = build_datasets(grid)[0]
    assert isinstance(x, SliceStack)
    np.testing.assert_allclose(x[0], truth.slice(0))


def test_grid_row_counts_and_parallel_determinism():
    grid = _toy_grid()
    runs, cells = run_grid(grid, parallel=1)
    # datasets x (1 full-data cell x 2 full-data methods + 1 mask x 1 masked method)
    assert len(cells) == 2 * (2 + 1)
    assert len(runs) == len(cells) * grid.starts
    assert {c["status"] for c in cells} <= {"ok", "no_valid_run"}
    runs2, cells2 = run_grid(grid, parallel=2)
    assert _strip_timing(runs) == _strip_timing(runs2)
    assert _strip_timing(cells) == _strip_timing(cells2)


def test_summarize():
    rows = [
        {"noise": 2.0, "mask": "none", "method": "m", "status": "ok", "fms": 0.5, "total_seconds": 1.0},
        {"noise": 2.0, "mask": "none", "method": "m", "status": "ok", "fms": 0.7, "total_seconds": 3.0},
        {"noise": 2.0, "mask": "none", "method": "m", "status": "no_valid_run", "total_seconds": 9.0},
        {"noise": 2.0, "mask": "random:0.5#0", "method": "m", "status": "no_valid_run", "total_seconds": 2.0},
        {"noise": 2.0, "mask": "random:0.5#1", "method": "m", "status": "ok", "fms": 0.9, "total_seconds": 4.0},
    ]
    out = {(r["mask"], r["method"]): r for r in summarize(rows)}
    assert out[("none", "m")]["median_fms"] == pytest.approx(0.6)
    assert out[("none", "m")]["median_seconds"] == 3.0
    assert (out[("none", "m")]["cells"], out[("none", "m")]["valid"]) == (3, 2)
    assert out[("random:0.5", "m")]["median_fms"] == 0.9
    empty = summarize([rows[2]])[0]
    assert math.isnan(empty["median_fms"])
