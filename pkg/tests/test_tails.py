from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coordcascade import tails
from coordcascade.errors import EmptySamples, IdenticalLikelihoods, InsufficientScales, InsufficientTail
from coordcascade.observables import ExtremeSample


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# CCDF
# ---------------------------------------------------------------------------


def test_ccdf_examples():
    assert tails.ccdf([1, 1, 2]) == [(1, 1.0), (2, pytest.approx(1 / 3))]
    assert tails.ccdf([5]) == [(5, 1.0)]
    with pytest.raises(EmptySamples):
        tails.ccdf([])


def test_ccdf_shape_of_tpl_variates():
    x = tails.sample("truncated_power_law", {"alpha": 2.3, "xc": 50}, 1, 200_000, _rng(3))
    pts = dict(tails.ccdf(x))

    def at(v):
        return pts[max(k for k in pts if k <= v)]

    # mid-range log-log slope near 1 - alpha, steeper beyond the cutoff
    mid = (math.log(at(10)) - math.log(at(2))) / (math.log(10) - math.log(2))
    far = (math.log(at(100)) - math.log(at(50))) / (math.log(100) - math.log(50))
    assert -1.9 < mid < -1.0
    assert far < mid - 0.5
    xs = np.array([2, 10, 50])
    model = 1.0 - np.concatenate([[0.0], np.cumsum(np.exp(tails.log_pmf(
        "truncated_power_law", {"alpha": 2.3, "xc": 50}, 1, np.arange(1, 50))))])[xs - 1]
    assert np.allclose([at(v) for v in xs], model, rtol=0.25)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=300))
def test_ccdf_properties(x):
    pts = tails.ccdf(x)
    assert pts[0][1] == 1.0
    xs = [p[0] for p in pts]
    ps = [p[1] for p in pts]
    assert xs == sorted(set(xs))
    assert all(a > b for a, b in zip(ps, ps[1:]))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def test_power_law_recovery():
    x = tails.sample("power_law", {"alpha": 2.5}, 5, 50_000, _rng(11))
    fit = tails.fit_family(x, "power_law", 5)
    assert abs(fit.alpha_hat - 2.5) < 0.05
    assert fit.n_tail == 50_000 and fit.x_min == 5
    assert 0.0 <= fit.ks <= 1.0


def test_constant_samples_rejected():
    with pytest.raises(InsufficientTail):
        tails.select_xmin([7] * 100)
    with pytest.raises(InsufficientTail):
        tails.fit_family([7] * 100, "truncated_power_law", 1)


def test_too_few_tail_samples():
    with pytest.raises(InsufficientTail):
        tails.fit_family([1, 2, 3, 4, 5, 6, 7, 8, 9], "power_law", 1)


@pytest.mark.parametrize("family,params", [
    ("log_normal", {"mu": 1.5, "sigma": 1.0}),
    ("exponential", {"rate": 0.2}),
])
def test_other_family_recovery(family, params):
    x = tails.sample(family, params, 1, 40_000, _rng(5))
    fit = tails.fit_family(x, family, 1)
    for k, v in params.items():
        assert fit.params[k] == pytest.approx(v, rel=0.08)


def test_select_xmin_finds_contamination_boundary():
    rng = _rng(2)
    tail = tails.sample("power_law", {"alpha": 2.5}, 5, 8000, rng)
    head = rng.integers(1, 5, 6000)
    xm, fit = tails.select_xmin(np.concatenate([head, tail]), "power_law")
    assert 4 <= xm <= 7
    assert abs(fit.alpha_hat - 2.5) < 0.15


def test_select_xmin_pure_power_law():
    x = tails.sample("power_law", {"alpha": 2.5}, 1, 20_000, _rng(4))
    xm, _ = tails.select_xmin(x, "power_law")
    assert xm <= 3


def test_fixed_xmin_matches_candidate_scan():
    x = tails.sample("power_law", {"alpha": 2.2}, 1, 20_000, _rng(6))
    xm, scanned = tails.select_xmin(x, "power_law", candidates=[8])
    fixed = tails.fit_family(x, "power_law", 8)
    assert xm == 8 and scanned.alpha_hat == fixed.alpha_hat and scanned.loglik == fixed.loglik


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=10), st.floats(2.5, 4.0))
def test_tpl_large_cutoff_matches_power_law(x, a):
    # sum(x) <= 500, so the -sum(x)/x_c term stays below 1e-6
    xmin = min(x)
    ll_tpl = tails.log_pmf("truncated_power_law", {"alpha": a, "xc": 1e9}, xmin, x).sum()
    ll_pl = tails.log_pmf("power_law", {"alpha": a}, xmin, x).sum()
    assert abs(ll_tpl - ll_pl) < 1e-6


def test_tpl_large_cutoff_gap_matches_first_order_expansion():
    # ll_TPL - ll_PL = -sum(x)/x_c + n * zeta(alpha - 1, x_min) / (x_c * zeta(alpha, x_min)) + O(x_c^-2)
    from scipy.special import zeta
    x = tails.sample("power_law", {"alpha": 2.3}, 2, 2000, _rng(8))
    xc = 1e9
    for a in (2.3, 2.5, 3.1):
        ll_tpl = tails.log_pmf("truncated_power_law", {"alpha": a, "xc": xc}, 2, x).sum()
        ll_pl = tails.log_pmf("power_law", {"alpha": a}, 2, x).sum()
        first = -x.sum() / xc + x.size * zeta(a - 1, 2) / (xc * zeta(a, 2))
        assert abs((ll_tpl - ll_pl) - first) < 1e-6


@pytest.mark.parametrize("family,params,xmin", [
    ("power_law", {"alpha": 2.1}, 1),
    ("truncated_power_law", {"alpha": 1.7, "xc": 30.0}, 3),
    ("log_normal", {"mu": 0.5, "sigma": 1.2}, 2),
    ("log_normal", {"mu": 40.0, "sigma": 3.0}, 1),
    ("exponential", {"rate": 0.4}, 4),
])
def test_pmf_normalises(family, params, xmin):
    xs = np.arange(xmin, xmin + 400_000)
    total = float(np.exp(tails.log_pmf(family, params, xmin, xs)).sum())
    if family == "log_normal" and params["mu"] > 10:
        assert total < 1.0  # mass sits far beyond the window; just finite
    else:
        assert total == pytest.approx(1.0, abs=2e-3)


def _ks_brute(tail, family, params, xmin):
    tail = sorted(int(v) for v in tail)
    n = len(tail)
    worst = 0.0
    for v in sorted(set(tail)):
        emp = sum(1 for t in tail if t <= v) / n
        mod = sum(math.exp(float(tails.log_pmf(family, params, xmin, [k])[0])) for k in range(xmin, v + 1))
        worst = max(worst, abs(emp - mod))
    return worst


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=12, max_size=100), st.sampled_from(tails.FAMILIES))
def test_ks_matches_brute_force(x, family):
    xmin = min(x)
    if len(set(x)) < 2:
        return
    fit = tails.fit_family(x, family, xmin)
    assert abs(fit.ks - _ks_brute(x, family, fit.params, xmin)) < 1e-12


def test_mle_error_shrinks_with_n():
    errs = []
    for n in (1_000, 10_000, 100_000):
        e = [abs(tails.fit_family(tails.sample("power_law", {"alpha": 2.5}, 1, n, _rng(s)), "power_law", 1)
                 .alpha_hat - 2.5) for s in range(20)]
        errs.append(float(np.mean(e)))
    assert errs[0] > errs[1] > errs[2]


# ---------------------------------------------------------------------------
# model comparison
# ---------------------------------------------------------------------------


def test_tpl_favoured_on_tpl_variates():
    x = tails.sample("truncated_power_law", {"alpha": 2.3, "xc": 50}, 1, 50_000, _rng(21))
    for other in ("log_normal", "power_law"):
        c = tails.compare_models(x, 1, "truncated_power_law", other)
        assert c.lr > 0 and c.p_value < 0.05


def test_self_comparison_is_degenerate():
    x = tails.sample("power_law", {"alpha": 2.5}, 1, 2000, _rng(1))
    with pytest.raises(IdenticalLikelihoods) as exc:
        tails.compare_models(x, 1, "power_law", "power_law")
    assert exc.value.lr == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([("truncated_power_law", "log_normal"),
                                                ("power_law", "exponential"),
                                                ("log_normal", "power_law")]))
def test_comparison_antisymmetry(seed, pair):
    x = tails.sample("truncated_power_law", {"alpha": 2.0, "xc": 40}, 1, 500, _rng(seed))
    fa, fb = (tails.fit_family(x, f, 1) for f in pair)
    ab = tails.compare_fits(fa, fb, x)
    ba = tails.compare_fits(fb, fa, x)
    assert ab.lr + ba.lr == 0.0
    assert ab.p_value == ba.p_value


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


def test_bootstrap_width_matches_asymptotics():
    x = tails.sample("power_law", {"alpha": 2.28}, 1, 90_000, _rng(13))
    bs = tails.bootstrap_ci(x, "power_law", resamples=100, x_min=1, seed=0)
    lo, hi = bs.intervals["alpha"]
    expected = 2 * 1.96 * (2.28 - 1) / math.sqrt(90_000)
    assert lo < 2.28 < hi
    assert hi - lo == pytest.approx(expected, rel=0.35)


def test_bootstrap_single_resample_is_point_estimate():
    x = tails.sample("power_law", {"alpha": 2.5}, 1, 500, _rng(2))
    bs = tails.bootstrap_ci(x, "power_law", resamples=1, x_min=1)
    a = bs.point["alpha"]
    assert bs.intervals["alpha"] == (a, a)


def test_bootstrap_coverage_small_samples():
    hits = 0
    for trial in range(100):
        x = tails.sample("power_law", {"alpha": 2.5}, 1, 100, _rng(1000 + trial))
        lo, hi = tails.bootstrap_ci(x, "power_law", resamples=200, x_min=1, seed=trial).intervals["alpha"]
        hits += lo <= 2.5 <= hi
    assert hits >= 90


def test_bootstrap_is_seeded():
    x = tails.sample("power_law", {"alpha": 2.5}, 1, 800, _rng(2))
    a = tails.bootstrap_ci(x, "power_law", resamples=30, x_min=1, seed=5)
    b = tails.bootstrap_ci(x, "power_law", resamples=30, x_min=1, seed=5)
    assert a.intervals == b.intervals


# ---------------------------------------------------------------------------
# extreme-value scaling
# ---------------------------------------------------------------------------


def test_scaling_exact_power_law():
    # N = 2^(20j) makes N^0.85 = 2^(17j) an exact integer maximum
    ex = [ExtremeSample("tce", f"r{j}{k}", 2 ** (20 * j), 3 * 2 ** (17 * j)) for j in (1, 2, 3) for k in range(3)]
    fit = tails.fit_extreme_scaling(ex)
    assert abs(fit.gamma_hat - 0.85) < 1e-9
    assert fit.r2 == pytest.approx(1.0)


def test_gamma_theory():
    assert tails.gamma_theory(2.22) == pytest.approx(0.82, abs=0.005)
    assert tails.gamma_theory(1.0) is None
    assert tails.gamma_theory(None) is None


def test_scaling_needs_three_scales():
    ex = [ExtremeSample("tce", f"r{n}{k}", n, 5 + k) for n in (8, 16) for k in range(3)]
    with pytest.raises(InsufficientScales):
        tails.fit_extreme_scaling(ex)
    ex += [ExtremeSample("tce", "x", 32, 9), ExtremeSample("tce", "y", 32, 9)]
    with pytest.raises(InsufficientScales):
        tails.fit_extreme_scaling(ex)


def test_scaling_of_iid_maxima():
    alpha = 3.0
    rng = _rng(17)
    ex = []
    for N in (8, 16, 32, 64, 128, 256):
        for run in range(100):
            x = tails.sample("power_law", {"alpha": alpha}, 1, 50 * N, rng)
            ex.append(ExtremeSample("tce", f"{N}-{run}", N, int(x.max())))
    fit = tails.fit_extreme_scaling(ex, alpha)
    assert abs(fit.gamma_hat - 1 / (alpha - 1)) < 0.1
    assert fit.gamma_th == pytest.approx(1 / (alpha - 1))
