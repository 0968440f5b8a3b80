"""Metrics: latitude weighting, rank correlation, SNR measurement."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from distana.metrics import (
    LatGrid,
    RankCorrelation,
    lat_weighted_rmse,
    measure_snr,
    mse,
    spearman,
)


# ---------------------------------------------------------------------------
# latitude grid


def test_latitudes_at_cell_centers():
    g = LatGrid(4, 8)
    expected = [-math.pi / 2 + (i + 0.5) * math.pi / 4 for i in range(4)]
    np.testing.assert_allclose(g.latitudes(), expected, rtol=1e-15)
    assert np.all(np.abs(g.latitudes()) < math.pi / 2)


def test_weights_positive_mean_one():
    for n_lat in (1, 2, 3, 32, 181):
        w = LatGrid(n_lat, 4).weights()
        assert np.all(w > 0)
        assert abs(w.mean() - 1.0) < 1e-14
    with pytest.raises(ValueError):
        LatGrid(0, 4)


def test_equator_weight_largest():
    w = LatGrid(32, 64).weights()
    assert w.argmax() in (15, 16)
    assert w[0] == pytest.approx(w[-1], rel=1e-12)  # symmetric poles


# ---------------------------------------------------------------------------
# latitude-weighted RMSE


def test_rmse_zero_when_equal():
    g = LatGrid(5, 7)
    f = np.random.default_rng(0).normal(size=(5, 7))
    assert lat_weighted_rmse(f, f, g) == 0.0


def test_rmse_uniform_error_is_k_exactly():
    g = LatGrid(32, 64)
    target = np.random.default_rng(1).normal(size=(32, 64))
    for k in (1.0, 0.125, 3.75e-3):
        got = lat_weighted_rmse(target + k, target, g)
        assert abs(got - k) < 1e-12


def test_rmse_polar_vs_equator_ratio():
    g = LatGrid(32, 64)
    weights = g.weights()
    base = np.zeros((32, 64))
    polar = base.copy()
    polar[0, :] = 1.0
    equator = base.copy()
    equator[16, :] = 1.0
    r_p = lat_weighted_rmse(polar, base, g)
    r_e = lat_weighted_rmse(equator, base, g)
    assert r_p < r_e
    assert abs(r_p / r_e - math.sqrt(weights[0] / weights[16])) < 1e-12


def test_rmse_uniform_weights_equal_plain_rmse():
    # a single-row grid has cos(0) everywhere: L = 1, plain RMSE
    g = LatGrid(1, 9)
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(1, 9)), rng.normal(size=(1, 9))
    plain = math.sqrt(np.mean((a - b) ** 2))
    assert lat_weighted_rmse(a, b, g) == pytest.approx(plain, rel=1e-15)


def test_rmse_scale_equivariance():
    g = LatGrid(6, 5)
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    base = lat_weighted_rmse(a, b, g)
    for k in (2.0, -3.5, 0.01):
        got = lat_weighted_rmse(k * a, k * b, g)
        assert got == pytest.approx(abs(k) * base, rel=1e-12)


def test_rmse_shape_mismatch():
    g = LatGrid(4, 4)
    with pytest.raises(ValueError):
        lat_weighted_rmse(np.zeros((4, 5)), np.zeros((4, 5)), g)
    with pytest.raises(ValueError):
        lat_weighted_rmse(np.zeros((4, 4)), np.zeros((5, 4)), g)


# ---------------------------------------------------------------------------
# plain MSE


def test_mse_basics():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([3.0, 0.0], [0.0, 0.0]) == pytest.approx(4.5)
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# Spearman rank correlation


def test_spearman_identity_and_negation():
    a = np.array([0.3, -1.2, 5.0, 0.0, 2.2])
    assert spearman(a, a).rho == pytest.approx(1.0)
    assert spearman(a, -a).rho == pytest.approx(-1.0)


def test_spearman_hand_example():
    r = spearman([1, 2, 3, 4], [1, 3, 2, 4])
    assert r.rho == pytest.approx(0.8, rel=1e-15)
    assert r.defined


def test_spearman_constant_input_undefined():
    r = spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    assert not r.defined
    assert r.rho is None
    assert isinstance(r, RankCorrelation)


def test_spearman_validation():
    with pytest.raises(ValueError):
        spearman([1.0], [2.0])
    with pytest.raises(ValueError):
        spearman([1.0, 2.0], [1.0, 2.0, 3.0])


def test_spearman_monotone_transform_invariance():
    rng = np.random.default_rng(4)
    a = rng.normal(size=40)
    b = rng.normal(size=40)
    base = spearman(a, b).rho
    assert spearman(np.exp(a), b).rho == pytest.approx(base, rel=1e-12)
    assert spearman(a, b**3).rho == pytest.approx(base, rel=1e-12)
    assert spearman(2 * a + 7, b).rho == pytest.approx(base, rel=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_spearman_matches_scipy_including_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 40))
    # quantized values force plenty of ties
    a = np.round(rng.normal(size=n) * 2) / 2
    b = np.round(rng.normal(size=n) * 2) / 2
    ours = spearman(a, b)
    ref = stats.spearmanr(a, b).statistic
    if np.isnan(ref):
        assert not ours.defined
    else:
        assert ours.rho == pytest.approx(ref, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_spearman_bounded(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    a = rng.integers(-3, 4, size=n).astype(float)
    b = rng.integers(-3, 4, size=n).astype(float)
    r = spearman(a, b)
    if r.defined:
        assert -1.0 - 1e-12 <= r.rho <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# SNR measurement


def test_measure_snr_exact_construction():
    clean = np.full((4, 4), 2.0)  # power 4
    noise = np.tile([1.0, -1.0], 8).reshape(4, 4)  # power 1
    assert measure_snr(clean, clean + noise) == pytest.approx(4.0)


def test_measure_snr_zero_noise_is_infinite():
    f = np.random.default_rng(0).normal(size=(3, 3))
    assert measure_snr(f, f.copy()) == math.inf


def test_measure_snr_roundtrip_with_generator():
    from distana.wavegen import ImpulseSpec, VelocityField, add_noise, generate_sequence

    seq = generate_sequence(
        140, VelocityField(np.full((16, 16), 0.7)), ImpulseSpec(origin=(8.0, 8.0))
    )
    noisy = add_noise(seq, 0.25, 11)
    got = measure_snr(seq.fields, noisy.fields)
    assert got == pytest.approx(0.25, rel=0.05)


def test_measure_snr_shape_mismatch():
    with pytest.raises(ValueError):
        measure_snr(np.zeros(3), np.zeros(4))
