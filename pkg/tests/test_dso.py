import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsynergy import tensor as T
from dsynergy.dso import (
    Region,
    RegionConfig,
    channel_stats,
    classify_point,
    classify_regions,
    dso_apply,
    dso_factored,
    dso_grad,
    surface_csv,
    surface_grid,
)
from dsynergy.tensor import DomainError

nonneg = st.floats(0, 1e3)
positive = st.floats(1e-3, 10)


def test_operator_reference_values():
    assert dso_apply(0.0, 0.0) == 0.0
    assert dso_apply(1.0, 1.0) == 3.0
    for v in (0.1, 0.37, 2.9, 1e-9, 123.456):
        assert dso_apply(v, 0.0) == v
        assert dso_apply(0.0, v) == v


def test_gradient_is_swapped_shift():
    assert dso_grad(0.5, 2.0) == (3.0, 1.5)


@settings(max_examples=500, deadline=None)
@given(nonneg, nonneg, positive)
def test_strictly_increasing_in_both_arguments(mu, d, delta):
    assert dso_apply(mu + delta, d) > dso_apply(mu, d)
    assert dso_apply(mu, d + delta) > dso_apply(mu, d)


@settings(max_examples=500, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100), positive)
def test_synergy(mu, d1, gap, delta):
    d2 = d1 + gap + 1e-3
    # the mean increment grows with d, and symmetrically the d increment with mu
    assert dso_apply(mu + delta, d2) - dso_apply(mu, d2) > dso_apply(mu + delta, d1) - dso_apply(mu, d1)
    assert dso_apply(d2, mu + delta) - dso_apply(d2, mu) > dso_apply(d1, mu + delta) - dso_apply(d1, mu)


@settings(max_examples=500, deadline=None)
@given(nonneg, nonneg)
def test_superadditive_on_quadrant(mu, d):
    # phi - mu - d = mu * d >= 0; compared without subtracting, since rounding
    # is monotone the float inequality holds exactly
    assert dso_apply(mu, d) >= mu + d
    if mu == 0 or d == 0:
        assert dso_apply(mu, d) == mu + d


def test_factored_and_expanded_agree_on_grid():
    mu, d = np.meshgrid(np.linspace(0, 3, 61), np.linspace(0, 3, 61))
    assert np.abs(dso_apply(mu, d) - dso_factored(mu, d)).max() <= 1e-12


# ----------------------------------------------------------- channel stats


def test_stats_hand_example():
    s = channel_stats(T.tensor4([0, 0, 0, 4], (1, 1, 2, 2)))
    assert (s.mu.item(), s.m.item(), s.d.item(), s.phi.item()) == (1.0, 4.0, 3.0, 7.0)


@pytest.mark.parametrize("c", [0.0, 0.3, 2.5, -0.2])
def test_stats_constant_input(c):
    s = channel_stats(np.full((2, 3, 4, 4), c))
    assert np.all(s.mu == c) and np.all(s.d == 0) and np.all(s.phi == c)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (2, 3, 3, 4), elements=st.floats(-1e3, 1e3)), st.floats(-100, 100))
def test_stats_invariants_under_shift(x, c):
    s = channel_stats(x)
    assert np.all(s.d >= 0)
    assert np.array_equal(s.d, s.m - s.mu)
    np.testing.assert_allclose(s.phi, s.mu * s.d + s.mu + s.d, rtol=1e-12, atol=1e-9)
    shifted = channel_stats(x + c)
    np.testing.assert_allclose(shifted.d, s.d, atol=1e-9)
    np.testing.assert_allclose(shifted.mu, s.mu + c, atol=1e-9)


# ---------------------------------------------------------------- regions


@pytest.mark.parametrize(
    "mu, d, expected",
    [
        (0.1, 2.0, Region.SMALL),
        (2.0, 2.0, Region.MIXED),
        (0.05, 0.05, Region.BACKGROUND),
        (2.0, 0.1, Region.LARGE),
        (0.0, 0.0, Region.BACKGROUND),
    ],
)
def test_region_rule(mu, d, expected):
    assert classify_point(mu, d) == expected


def test_classify_regions_uses_config():
    s = channel_stats(np.full((1, 1, 2, 2), 0.0))
    loose = RegionConfig(band_ratio=0.2, phi_threshold=-1.0)
    assert classify_regions(s, loose)[0, 0] == Region.MIXED
    assert classify_regions(s)[0, 0] == Region.BACKGROUND


@pytest.mark.parametrize("rho", [0.0, 1.0, -0.1, 1.5])
def test_region_config_validates_band(rho):
    with pytest.raises(ValueError):
        RegionConfig(band_ratio=rho)


def test_region_labels():
    assert [r.label for r in Region] == ["background", "small", "large", "mixed"]


# ---------------------------------------------------------------- surface


def test_surface_grid_points_and_diagonal():
    mu, d, phi, labels = surface_grid((0, 3, 61), (0, 3, 61))
    assert len(mu) == 61 * 61
    assert phi[(mu == 0) & (d == 0)].item() == 0.0
    assert phi[(mu == 1) & (d == 1)].item() == 3.0
    diag = np.isclose(mu, d)
    order = np.argsort(mu[diag])
    assert np.all(np.diff(phi[diag][order]) > 0)


def test_surface_rejects_degenerate_ranges():
    with pytest.raises(DomainError):
        surface_grid((1, 1, 5), (0, 3, 5))
    with pytest.raises(DomainError):
        surface_grid((0, 3, 1), (0, 3, 5))


def test_surface_csv_format():
    text = surface_csv(*surface_grid((0, 1, 2), (0, 1, 2)))
    lines = text.splitlines()
    assert lines[0] == "mu,d,phi,label"
    assert len(lines) == 5
    assert lines[1] == "0.0,0.0,0.0,background"
    assert {ln.rsplit(",", 1)[1] for ln in lines[1:]} <= {"small", "large", "mixed", "background"}
