import numpy as np
import pytest
from hypothesis import given, strategies as st

from tparafac2.model import reconstruct
from tparafac2.synth import (
    ConceptSpec,
    add_noise,
    derive_seed,
    generate,
    make_mask,
    max_congruence,
    random_parafac2,
)
from tparafac2.tensor import DimSpec, SliceStack, frobenius_norm

from .conftest import random_stack

SMALL = ConceptSpec(dims=DimSpec.regular(30, 24, 10))


def _rel_noise(noisy, clean):
    diff = SliceStack([a - b for a, b in zip(noisy, clean)])
    return frobenius_norm(diff) / frobenius_norm(clean)


# --- concept generator ------------------------------------------------------------

def test_generate_reconstruction_identity():
    x, truth = generate(SMALL, seed=0)
    for a, b in zip(x, reconstruct(truth)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_generate_shapes_and_supports():
    x, truth = generate(SMALL, seed=1)
    assert (x.I, x.K, x.J) == (30, 10, (24,) * 10)
    assert truth.R == 3
    assert np.all(np.count_nonzero(truth.A, axis=0) == round(0.2 * 30))
    lo, hi = SMALL.strength_range
    assert truth.C.min() >= lo and truth.C.max() <= hi


def test_generate_default_dims():
    spec = ConceptSpec()
    assert (spec.dims.I, spec.dims.J[0], spec.dims.K) == (100, 80, 25)
    assert spec.n_concepts == 3 and spec.max_congruence == 0.8


def test_generate_keeps_common_words_active():
    for seed in range(10):
        _, truth = generate(SMALL, seed=seed)
        for r in range(truth.R):
            start = np.flatnonzero(truth.B[0][:, r])
            still = np.count_nonzero(truth.B[-1][start, r])
            assert still >= 0.3 * start.size


def test_generate_strength_congruence():
    for seed in range(20):
        _, truth = generate(SMALL, seed=seed)
        assert max_congruence(truth.C) <= 0.8


def test_generate_is_deterministic():
    x1, t1 = generate(SMALL, seed=5)
    x2, t2 = generate(SMALL, seed=5)
    x3, _ = generate(SMALL, seed=6)
    for a, b in zip(x1, x2):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(t1.C, t2.C)
    assert not np.array_equal(x1[0], x3[0])


def test_generate_profiles_evolve_smoothly():
    _, truth = generate(SMALL, seed=2)
    steps = [np.linalg.norm(truth.B[k] - truth.B[k - 1]) for k in range(1, truth.K)]
    assert max(steps) < np.linalg.norm(truth.B[0])


def test_congruence_retry_failure():
    spec = ConceptSpec(dims=DimSpec.regular(10, 20, 5), max_congruence=0.0, max_retries=5)
    with pytest.raises(RuntimeError):
        generate(spec, seed=0)


@pytest.mark.parametrize("bad", [
    {"transition_prob": 1.5}, {"overlap_keep_fraction": -0.1}, {"strength_range": (5, 1)},
    {"drift_std": -1.0}, {"n_concepts": 50}, {"dims": DimSpec(10, 3, (5, 6, 7))},
    {"dims": DimSpec.regular(10, 4, 5), "word_fraction": 0.9},
])
def test_concept_spec_validation(bad):
    with pytest.raises(ValueError):
        ConceptSpec(**bad)


def test_concept_spec_dict_roundtrip():
    d = SMALL.to_dict()
    assert ConceptSpec(**d) == SMALL


def test_random_parafac2_constant_crossproducts():
    x, truth = random_parafac2(DimSpec(8, 3, (4, 5, 6)), 3, seed=0)
    G = [b.T @ b for b in truth.B]
    for g in G[1:]:
        np.testing.assert_allclose(g, G[0], atol=1e-10)
    with pytest.raises(ValueError):
        random_parafac2(DimSpec.regular(8, 2, 3), 3)


# --- noise --------------------------------------------------------------------------

@pytest.mark.parametrize("eta", [0.5, 0.75, 1.0, 1.5, 2.0])
def test_noise_level_identity(rng, eta):
    x = random_stack(rng, 9, [6, 7, 8], 3)
    assert _rel_noise(add_noise(x, eta, seed=1), x) == pytest.approx(eta, abs=1e-12)


def test_zero_noise_returns_copy(rng):
    x = random_stack(rng, 4, 3, 2)
    out = add_noise(x, 0.0, seed=0)
    for a, b in zip(out, x):
        np.testing.assert_array_equal(a, b)


def test_noise_errors():
    zero = SliceStack([np.zeros((3, 3))])
    with pytest.raises(ValueError):
        add_noise(zero, 0.5, seed=0)
    with pytest.raises(ValueError):
        add_noise(SliceStack([np.ones((3, 3))]), -0.1)


@given(st.floats(0.01, 5.0), st.integers(0, 2**31))
def test_noise_level_property(eta, seed):
    x = random_stack(np.random.default_rng(seed), 5, 4, 3)
    assert _rel_noise(add_noise(x, eta, seed=seed), x) == pytest.approx(eta, rel=1e-12)


# --- masks ----------------------------------------------------------------------------

def _missing_count(w):
    return int(sum(np.sum(wk == 0) for wk in w))


def _fibers_ok(w):
    return all(np.all(wk.sum(axis=0) > 0) for wk in w) and all(wk.any() for wk in w)


def test_mask_fraction_zero():
    w = make_mask(DimSpec.regular(5, 4, 3), "random", 0.0, seed=0)
    assert all(np.all(wk == 1) for wk in w)


def test_random_mask_count_full_size():
    dims = DimSpec.regular(100, 80, 25)
    w = make_mask(dims, "random", 0.25, seed=0)
    assert _missing_count(w) == round(0.25 * 200000)


def test_fiber2_mask_scan():
    dims = DimSpec.regular(20, 15, 8)
    w = make_mask(dims, "fiber2", 0.10, seed=3)
    missing = _missing_count(w)
    assert missing > 0
    in_fibers = 0
    for wk in w:
        for i in range(dims.I):
            if not wk[i].any():
                in_fibers += wk.shape[1]
    assert in_fibers == missing


def test_fiber3_mask_scan():
    dims = DimSpec.regular(20, 15, 8)
    w = make_mask(dims, "fiber3", 0.2, seed=3)
    W = np.stack(list(w))
    missing_ij = W.sum(axis=0) == 0
    assert missing_ij.sum() == round(0.2 * 20 * 15)
    assert np.all((W == 0) == missing_ij[None])


def test_mixed_mask_budget():
    dims = DimSpec.regular(20, 15, 8)
    w = make_mask(dims, "mixed", 0.4, seed=5)
    total = 20 * 15 * 8
    assert _missing_count(w) == round(0.4 * total)
    fiber_entries = sum(wk.shape[1] * int(np.sum(~wk.any(axis=1))) for wk in w)
    assert abs(fiber_entries - 0.2 * total) <= 15


def test_masks_never_drop_mode1_fibers():
    dims = DimSpec.regular(10, 8, 6)
    for seed in range(1000):
        kind = ("random", "fiber2", "fiber3", "mixed")[seed % 4]
        w = make_mask(dims, kind, (0.25, 0.5, 0.75)[seed % 3], seed=seed)
        assert _fibers_ok(w), (seed, kind)


def test_ragged_masks():
    dims = DimSpec(6, 3, (4, 5, 6))
    for kind in ("random", "fiber2", "mixed"):
        w = make_mask(dims, kind, 0.3, seed=1)
        assert [wk.shape for wk in w] == [(6, 4), (6, 5), (6, 6)]
        assert _fibers_ok(w)
    with pytest.raises(ValueError):
        make_mask(dims, "fiber3", 0.3, seed=1)


def test_mask_errors():
    dims = DimSpec.regular(4, 3, 2)
    with pytest.raises(ValueError):
        make_mask(dims, "random", 1.0)
    with pytest.raises(ValueError):
        make_mask(dims, "diagonal", 0.1)
    with pytest.raises(ValueError):
        make_mask(DimSpec.regular(2, 3, 2), "fiber3", 0.9, seed=0)


def test_mask_determinism():
    dims = DimSpec.regular(10, 8, 6)
    a = make_mask(dims, "mixed", 0.5, seed=9)
    b = make_mask(dims, "mixed", 0.5, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_derive_seed():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    seeds = {derive_seed(0, d, v) for d in range(20) for v in range(5)}
    assert len(seeds) == 100
    assert 0 <= derive_seed(7) < 2**32
