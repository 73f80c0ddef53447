import csv
from itertools import permutations
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tparafac2.evaluation import CSV_COLUMNS, NoValidRunError, best_run, detect_degenerate, fms, write_csv
from tparafac2.model import Parafac2Factors

from .conftest import orthonormal, random_factors


def _cos(u, v):
    return abs(float(u @ v)) / (np.linalg.norm(u) * np.linalg.norm(v))


def _brute_fms(est, truth):
    R = truth.R
    Be, Bt = np.vstack(est.B), np.vstack(truth.B)
    best = 0.0
    for perm in permutations(range(R)):
        total = 0.0
        for i, p in enumerate(perm):
            total += (_cos(est.A[:, p], truth.A[:, i]) * _cos(Be[:, p], Bt[:, i])
                      * _cos(est.C[:, p], truth.C[:, i]))
        best = max(best, total / R)
    return best


def _report(loss, feasible=True):
    return SimpleNamespace(final_loss=loss, feasible=feasible)


# --- FMS --------------------------------------------------------------------------

def test_fms_identity(rng):
    f = random_factors(rng, 6, [4, 5, 3], 3, 3)
    r = fms(f, f)
    assert r.total == pytest.approx(1.0, abs=1e-12)
    assert r.permutation == [0, 1, 2]
    assert r.mode_scores() == pytest.approx((1.0, 1.0, 1.0))


def test_fms_permutation_and_sign(rng):
    f = random_factors(rng, 6, 5, 4, 3)
    g = f.permuted([2, 0, 1])
    g.A[:, 1] *= -1
    g.C[:, 1] *= -1
    r = fms(g, f)
    assert r.total == pytest.approx(1.0, abs=1e-12)
    assert r.permutation == [1, 2, 0]


def test_fms_brute_force_oracle():
    for seed in range(50):
        r = np.random.default_rng(seed)
        R = int(r.integers(1, 5))
        est = random_factors(r, 5, 4, 3, R, nonneg_C=False)
        truth = random_factors(r, 5, 4, 3, R, nonneg_C=False)
        assert fms(est, truth).total == pytest.approx(_brute_fms(est, truth), abs=1e-12)


def test_fms_handcrafted_two_components():
    A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    B = [np.array([[1.0, 0.0], [0.0, 1.0]])] * 2
    C = np.array([[1.0, 2.0], [2.0, 1.0]])
    truth = Parafac2Factors(A, B, C)
    est = Parafac2Factors(A[:, ::-1] + 0.1, [b[:, ::-1] for b in B], C[:, ::-1])
    assert fms(est, truth).total == pytest.approx(_brute_fms(est, truth), abs=1e-12)
    assert fms(est, truth).permutation == [1, 0]


@given(st.integers(1, 4), st.integers(0, 2**31))
def test_fms_symmetric_and_bounded(R, seed):
    r = np.random.default_rng(seed)
    a = random_factors(r, 5, 4, 3, R, nonneg_C=False)
    b = random_factors(r, 5, 4, 3, R, nonneg_C=False)
    assert fms(a, b).total == pytest.approx(fms(b, a).total, abs=1e-12)
    assert 0.0 <= fms(a, b).total <= 1.0


def test_fms_zero_column_flagged(rng):
    f = random_factors(rng, 4, 3, 2, 2)
    g = f.copy()
    g.A[:, 0] = 0.0
    r = fms(g, f)
    assert r.zero_columns == [0]
    assert r.total == pytest.approx(0.5, abs=1e-12)


def test_fms_shape_errors(rng):
    f = random_factors(rng, 4, 3, 2, 2)
    with pytest.raises(ValueError):
        fms(f, random_factors(rng, 4, 3, 2, 3))
    with pytest.raises(ValueError):
        fms(f, random_factors(rng, 5, 3, 2, 2))


# --- degeneracy -------------------------------------------------------------------

def test_orthogonal_components_not_degenerate(rng):
    A = orthonormal(rng, 6, 3)
    B = [orthonormal(rng, 5, 3) for _ in range(4)]
    f = Parafac2Factors(A, B, rng.uniform(1, 2, (4, 3)))
    assert not detect_degenerate(f)


def test_cancelling_pair_is_degenerate(rng):
    a, c = rng.standard_normal(6), rng.uniform(1, 2, 4)
    B = [rng.standard_normal((5, 1)) for _ in range(4)]
    f = Parafac2Factors(np.column_stack([a, -a]), [np.hstack([b, -b]) for b in B], np.column_stack([c, -c]))
    assert detect_degenerate(f)


def test_single_component_never_degenerate(rng):
    assert not detect_degenerate(random_factors(rng, 4, 3, 2, 1))


def test_degeneracy_pairwise_oracle():
    flagged = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        f = random_factors(r, 2, 1, 2, 3, nonneg_C=False)
        Bs = np.vstack(f.B)
        expected = False
        for p in range(3):
            for q in range(p + 1, 3):
                prod = 1.0
                for M in (f.A, Bs, f.C):
                    prod *= M[:, p] @ M[:, q] / (np.linalg.norm(M[:, p]) * np.linalg.norm(M[:, q]))
                expected |= prod < -0.85
        assert detect_degenerate(f) == expected
        flagged += expected
    assert 0 < flagged < 100


# --- run selection -----------------------------------------------------------------

def test_best_run_examples(rng):
    f = random_factors(rng, 4, 3, 2, 2)
    assert best_run([(f, _report(1.0))]) == 0
    assert best_run([(f, _report(5.0)), (f, _report(3.0))]) == 1
    with pytest.raises(NoValidRunError):
        best_run([(f, _report(1.0, feasible=False))])
    with pytest.raises(ValueError):
        best_run([])


def test_best_run_filter_then_argmin_oracle():
    for seed in range(30):
        r = np.random.default_rng(seed)
        runs, ok = [], []
        for n in range(6):
            f = random_factors(r, 2, 1, 2, 3, nonneg_C=False)
            rep = _report(float(r.uniform(0, 10)), feasible=bool(r.uniform() < 0.7))
            runs.append((f, rep))
            if rep.feasible and not detect_degenerate(f):
                ok.append(n)
        if not ok:
            with pytest.raises(NoValidRunError):
                best_run(runs)
        else:
            assert best_run(runs) == min(ok, key=lambda n: runs[n][1].final_loss)


def test_write_csv(tmp_path):
    path = tmp_path / "runs.csv"
    row = {c: i for i, c in enumerate(CSV_COLUMNS)}
    row["extra"] = "ignored"
    write_csv([row], path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == CSV_COLUMNS
    assert CSV_COLUMNS[:13] == ["dataset", "mask", "method", "seed", "loss", "fms", "fms_A", "fms_B",
                                "fms_C", "iters", "seconds", "feasible", "degenerate"]
