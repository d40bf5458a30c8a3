"""Discrete heavy-tail inference.

Four candidate families on integer support ``x >= x_min``:

* power law          p(x) ∝ x^-alpha
* truncated PL       p(x) ∝ x^-alpha exp(-x / x_c)
* log-normal         p(x) ∝ x^-1 exp(-(ln x - mu)^2 / (2 sigma^2))
* exponential        p(x) ∝ exp(-rate x)

Normalisers are exact sums: the power law uses the Hurwitz zeta function; the
truncated power law and log-normal sum the first ``_HEAD`` terms directly and
close the remainder with an Euler-Maclaurin-corrected integral (upper incomplete
gamma / Gaussian tail), which keeps the relative error near machine precision
without summing millions of terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, special

from .errors import EmptySamples, IdenticalLikelihoods, InsufficientScales, InsufficientTail, NonConvergence

FAMILIES = ("power_law", "truncated_power_law", "log_normal", "exponential")
MIN_TAIL = 10
_HEAD = 2000
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# normalisers
# ---------------------------------------------------------------------------


def _upper_gamma(s: float, z: float) -> float:
    """Upper incomplete gamma Γ(s, z) for any real s and z > 0."""
    if s > 0:
        return float(special.gammaincc(s, z) * special.gamma(s))
    k = int(math.floor(-s)) + 1
    top = s + k
    if abs(top - 1.0) < 1e-12 or abs(top) < 1e-12:
        # s is a non-positive integer: start the recurrence from E1(z) = Γ(0, z)
        k -= 1
        top = s + k
        g = float(special.exp1(z))
    else:
        g = float(special.gammaincc(top, z) * special.gamma(top))
    # Γ(a, z) = (Γ(a + 1, z) - z^a e^-z) / a, stepping a down to s
    a = top
    for _ in range(k):
        a -= 1.0
        g = (g - math.exp(a * math.log(z) - z)) / a
    return g


def _log_head_plus_tail(logf: np.ndarray, tail: float) -> float:
    m = float(logf.max())
    return m + math.log(float(np.exp(logf - m).sum()) + tail * math.exp(-m))


def _tpl_log_z(alpha: float, xc: float, xmin: int) -> float:
    X = xmin + _HEAD
    xs = np.arange(xmin, X, dtype=float)
    logf = -alpha * np.log(xs) - xs / xc
    # Euler-Maclaurin: sum_{x>=X} f = int_X^inf f + f(X)/2 - f'(X)/12 + ...
    z = X / xc
    integral = xc ** (1.0 - alpha) * _upper_gamma(1.0 - alpha, z) if z < 700 else 0.0
    fX = math.exp(-alpha * math.log(X) - z)
    dfX = -fX * (alpha / X + 1.0 / xc)
    return _log_head_plus_tail(logf, max(integral, 0.0) + fX / 2 - dfX / 12)


def _ln_log_z(mu: float, sigma: float, xmin: int) -> float:
    X = xmin + _HEAD
    xs = np.arange(xmin, X, dtype=float)
    lx = np.log(xs)
    logf = -lx - (lx - mu) ** 2 / (2 * sigma * sigma)
    lX = math.log(X)
    u = (lX - mu) / sigma
    log_int = math.log(sigma) + _LOG_SQRT_2PI + float(special.log_ndtr(-u))
    log_fX = -lX - u * u / 2
    # common reference keeps every term finite when the mass sits in the tail
    m = max(float(logf.max()), log_int, log_fX)
    fX = math.exp(log_fX - m)
    dfX = -fX / X * (1.0 + (lX - mu) / (sigma * sigma))
    tail_scaled = math.exp(log_int - m) + fX / 2 - dfX / 12
    return m + math.log(float(np.exp(logf - m).sum()) + max(tail_scaled, 0.0))


def _pl_log_z(alpha: float, xmin: int) -> float:
    return math.log(float(special.zeta(alpha, xmin)))


def log_pmf(family: str, params: dict, xmin: int, x) -> np.ndarray:
    """Log probability mass of integer values ``x >= xmin``."""
    x = np.asarray(x, dtype=float)
    if family == "power_law":
        a = params["alpha"]
        return -a * np.log(x) - _pl_log_z(a, xmin)
    if family == "truncated_power_law":
        a, xc = params["alpha"], params["xc"]
        return -a * np.log(x) - x / xc - _tpl_log_z(a, xc, xmin)
    if family == "log_normal":
        mu, s = params["mu"], params["sigma"]
        lx = np.log(x)
        return -lx - (lx - mu) ** 2 / (2 * s * s) - _ln_log_z(mu, s, xmin)
    if family == "exponential":
        lam = params["rate"]
        return math.log(-math.expm1(-lam)) - lam * (x - xmin)
    raise ValueError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------


@dataclass
class TailFit:
    family: str
    x_min: int
    n_tail: int
    loglik: float
    ks: float
    alpha_hat: float | None = None
    xc_hat: float | None = None
    mu: float | None = None
    sigma: float | None = None
    rate: float | None = None
    n_distinct: int = 0
    n_total: int = 0
    x_max: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def params(self) -> dict:
        if self.family == "power_law":
            return {"alpha": self.alpha_hat}
        if self.family == "truncated_power_law":
            return {"alpha": self.alpha_hat, "xc": self.xc_hat}
        if self.family == "log_normal":
            return {"mu": self.mu, "sigma": self.sigma}
        return {"rate": self.rate}

    def logpmf(self, x) -> np.ndarray:
        return log_pmf(self.family, self.params, self.x_min, x)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "x_min": self.x_min,
            "n_total": self.n_total,
            "n_tail": self.n_tail,
            "n_distinct": self.n_distinct,
            "x_max": self.x_max,
            "loglik": self.loglik,
            "ks": self.ks,
            "alpha_hat": self.alpha_hat,
            "xc_hat": self.xc_hat,
            "mu": self.mu,
            "sigma": self.sigma,
            "rate": self.rate,
        }


def _as_int_array(samples) -> np.ndarray:
    x = np.asarray(samples)
    if x.size == 0:
        raise EmptySamples("no samples")
    if np.any(x < 1) or np.any(x != np.round(x)):
        raise ValueError("samples must be positive integers")
    return x.astype(np.int64)


def _tail(x: np.ndarray, xmin: int) -> np.ndarray:
    t = x[x >= xmin]
    if t.size < MIN_TAIL:
        raise InsufficientTail(f"{t.size} samples >= x_min={xmin}; need {MIN_TAIL}")
    if np.unique(t).size < 2:
        raise InsufficientTail(f"tail above x_min={xmin} holds a single distinct value")
    return t


def model_cdf(family: str, params: dict, xmin: int, upto: int) -> np.ndarray:
    """CDF at xmin..upto (inclusive)."""
    xs = np.arange(xmin, upto + 1)
    return np.cumsum(np.exp(log_pmf(family, params, xmin, xs)))


def ks_distance(tail: np.ndarray, family: str, params: dict, xmin: int) -> float:
    """max |F_emp - F_model| over the distinct tail values."""
    tail = np.sort(tail)
    vals, counts = np.unique(tail, return_counts=True)
    emp = np.cumsum(counts) / tail.size
    cdf = model_cdf(family, params, xmin, int(vals[-1]))
    mod = cdf[vals - xmin]
    return float(np.max(np.abs(emp - mod)))


def _fit_pl(t: np.ndarray, xmin: int) -> dict:
    s1 = float(np.log(t).mean())

    def nll(a):
        return a * s1 + _pl_log_z(a, xmin)

    res = optimize.minimize_scalar(nll, bounds=(1.0 + 1e-6, 20.0), method="bounded",
                                   options={"xatol": 1e-10, "maxiter": 500})
    if not res.success:
        raise NonConvergence(f"power-law MLE failed: {res.message}")
    return {"alpha": float(res.x)}


def _fit_tpl(t: np.ndarray, xmin: int) -> dict:
    n = t.size
    s1 = float(np.log(t).sum())
    s2 = float(t.sum())
    xmax = float(t.max())

    def nll(theta):
        a, lxc = theta
        xc = math.exp(lxc)
        return (a * s1 + s2 / xc + n * _tpl_log_z(a, xc, xmin)) / n

    alphas = np.linspace(1.05, 4.5, 24)
    lxcs = np.linspace(math.log(max(xmin, 1)), math.log(10 * xmax), 24)
    best = None
    for a in alphas:
        for lxc in lxcs:
            v = nll((a, lxc))
            if best is None or v < best[0]:
                best = (v, a, lxc)
    lo_xc = math.log(0.05)
    hi_xc = math.log(1e6 * xmax)
    bounds = [(1.0 + 1e-6, 8.0), (lo_xc, hi_xc)]
    res = optimize.minimize(nll, x0=[best[1], best[2]], method="L-BFGS-B", bounds=bounds,
                            options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 2000})
    x_opt, f_opt = res.x, res.fun
    # polish: Nelder-Mead is robust along the alpha/x_c ridge
    res2 = optimize.minimize(nll, x0=x_opt, method="Nelder-Mead",
                             options={"xatol": 1e-9, "fatol": 1e-13, "maxiter": 4000})
    if res2.fun < f_opt and bounds[0][0] <= res2.x[0] <= bounds[0][1] and lo_xc <= res2.x[1] <= hi_xc:
        x_opt, f_opt = res2.x, res2.fun
    if not (res.success or res2.success):
        raise NonConvergence(f"truncated power-law MLE failed: {res.message}")
    if abs(min(res.fun, res2.fun) - f_opt) * n > 1e-6 and not res2.success:
        raise NonConvergence("truncated power-law optimiser did not settle")
    return {"alpha": float(x_opt[0]), "xc": float(math.exp(x_opt[1]))}


def _fit_ln(t: np.ndarray, xmin: int) -> dict:
    lt = np.log(t)
    n = t.size
    s1 = float(lt.sum())

    def nll(theta):
        mu, ls = theta
        s = math.exp(ls)
        return (s1 + float(((lt - mu) ** 2).sum()) / (2 * s * s) + n * _ln_log_z(mu, s, xmin)) / n

    m0, s0 = float(lt.mean()), max(float(lt.std()), 0.1)
    best = (nll((m0, math.log(s0))), m0, math.log(s0))
    for mu in np.linspace(-15.0, float(lt.max()), 12):
        for ls in np.linspace(math.log(0.1), math.log(8.0), 10):
            v = nll((mu, ls))
            if v < best[0]:
                best = (v, mu, ls)
    bounds = [(-200.0, float(lt.max()) + 10.0), (math.log(0.02), math.log(50.0))]
    res = optimize.minimize(nll, x0=[best[1], best[2]], method="L-BFGS-B", bounds=bounds,
                            options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 2000})
    res2 = optimize.minimize(nll, x0=res.x, method="Nelder-Mead",
                             options={"xatol": 1e-9, "fatol": 1e-13, "maxiter": 4000})
    x_opt = res2.x if res2.fun < res.fun else res.x
    if not (res.success or res2.success):
        raise NonConvergence(f"log-normal MLE failed: {res.message}")
    return {"mu": float(x_opt[0]), "sigma": float(math.exp(x_opt[1]))}


def _fit_exp(t: np.ndarray, xmin: int) -> dict:
    excess = float(t.mean()) - xmin
    return {"rate": math.log1p(1.0 / excess)}


_FITTERS = {
    "power_law": _fit_pl,
    "truncated_power_law": _fit_tpl,
    "log_normal": _fit_ln,
    "exponential": _fit_exp,
}


def fit_family(samples, family: str, x_min: int) -> TailFit:
    """Maximum-likelihood fit of ``family`` to the discrete tail ``x >= x_min``."""
    if family not in _FITTERS:
        raise ValueError(f"unknown family {family!r}")
    x = _as_int_array(samples)
    x_min = int(x_min)
    if x_min < 1:
        raise ValueError("x_min must be >= 1")
    t = _tail(x, x_min)
    params = _FITTERS[family](t, x_min)
    ll = float(log_pmf(family, params, x_min, t).sum())
    ks = ks_distance(t, family, params, x_min)
    fit = TailFit(family=family, x_min=x_min, n_tail=int(t.size), loglik=ll, ks=ks,
                  n_distinct=int(np.unique(t).size), n_total=int(x.size), x_max=int(x.max()))
    if family in ("power_law", "truncated_power_law"):
        fit.alpha_hat = params["alpha"]
    if family == "truncated_power_law":
        fit.xc_hat = params["xc"]
    if family == "log_normal":
        fit.mu, fit.sigma = params["mu"], params["sigma"]
    if family == "exponential":
        fit.rate = params["rate"]
    return fit


def select_xmin(samples, family: str = "power_law", min_tail: int = 50,
                candidates: Sequence[int] | None = None) -> tuple[int, TailFit]:
    """Scan candidate x_min values; keep the one whose fit minimises the KS distance."""
    x = _as_int_array(samples)
    if candidates is None:
        vals = np.unique(x)
        srt = np.sort(x)
        n_at = srt.size - np.searchsorted(srt, vals, side="left")
        cands = [int(v) for v, n in zip(vals, n_at) if n >= min_tail]
    else:
        cands = sorted(int(c) for c in candidates)
    best: TailFit | None = None
    for c in cands:
        try:
            fit = fit_family(x, family, c)
        except InsufficientTail:
            continue
        if best is None or fit.ks < best.ks:
            best = fit
    if best is None:
        raise InsufficientTail(f"no x_min candidate leaves >= {min_tail} samples with >= 2 distinct values")
    return best.x_min, best


# ---------------------------------------------------------------------------
# model comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelComparison:
    family_a: str
    family_b: str
    lr: float
    p_value: float
    normalized: float
    x_min: int
    n_tail: int

    def to_dict(self) -> dict:
        return {"family_a": self.family_a, "family_b": self.family_b, "lr": self.lr,
                "p_value": self.p_value, "normalized_lr": self.normalized,
                "x_min": self.x_min, "n_tail": self.n_tail}


def compare_fits(fit_a: TailFit, fit_b: TailFit, samples) -> ModelComparison:
    """Vuong test on a shared tail: positive lr favours ``fit_a``."""
    if fit_a.x_min != fit_b.x_min:
        raise ValueError("fits must share x_min")
    x = _as_int_array(samples)
    t = x[x >= fit_a.x_min]
    d = fit_a.logpmf(t) - fit_b.logpmf(t)
    lr = float(d.sum())
    sd = float(d.std())
    n = t.size
    if sd <= 1e-12 * max(1.0, float(np.abs(d).max())):
        raise IdenticalLikelihoods(lr)
    z = lr / (sd * math.sqrt(n))
    p = float(special.erfc(abs(z) / math.sqrt(2)))
    return ModelComparison(fit_a.family, fit_b.family, lr, p, z, fit_a.x_min, int(n))


def compare_models(samples, x_min: int, family_a: str, family_b: str) -> ModelComparison:
    fa = fit_family(samples, family_a, x_min)
    fb = fa if family_b == family_a else fit_family(samples, family_b, x_min)
    return compare_fits(fa, fb, samples)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    family: str
    x_min: int
    point: dict
    intervals: dict
    estimates: dict
    n_failed: int
    resamples: int

    def to_dict(self) -> dict:
        return {"family": self.family, "x_min": self.x_min, "point": self.point,
                "intervals": {k: list(v) for k, v in self.intervals.items()},
                "n_failed": self.n_failed, "resamples": self.resamples}


def bootstrap_ci(samples, family: str, resamples: int = 1000, x_min: int | None = None,
                 seed: int = 0, level: float = 0.95, max_fail_frac: float = 0.2) -> BootstrapResult:
    """Nonparametric bootstrap; percentile intervals per parameter.

    Replicate 0 is the observed sample itself, so ``resamples=1`` collapses the
    interval onto the point estimate. x_min is held at the full-sample choice.
    """
    if resamples < 1:
        raise ValueError("resamples must be positive")
    x = _as_int_array(samples)
    if x_min is None:
        x_min, full = select_xmin(x, family)
    else:
        full = fit_family(x, family, x_min)
    rng = np.random.default_rng(seed)
    est: dict[str, list[float]] = {k: [] for k in full.params}
    failed = 0
    for b in range(resamples):
        xb = x if b == 0 else rng.choice(x, size=x.size, replace=True)
        try:
            f = full if b == 0 else fit_family(xb, family, x_min)
        except (InsufficientTail, NonConvergence):
            failed += 1
            continue
        for k, v in f.params.items():
            est[k].append(v)
    if failed > max_fail_frac * resamples:
        raise NonConvergence(f"{failed}/{resamples} bootstrap fits failed")
    q = (1 - level) / 2
    intervals = {k: (float(np.quantile(v, q)), float(np.quantile(v, 1 - q))) for k, v in est.items()}
    return BootstrapResult(family, x_min, full.params, intervals,
                           {k: np.asarray(v) for k, v in est.items()}, failed, resamples)


# ---------------------------------------------------------------------------
# CCDF and sampling
# ---------------------------------------------------------------------------


def ccdf(samples) -> list[tuple[int, float]]:
    """Empirical P(X >= x) at each distinct value."""
    x = _as_int_array(samples)
    vals, counts = np.unique(x, return_counts=True)
    ge = np.cumsum(counts[::-1])[::-1] / x.size
    return [(int(v), float(p)) for v, p in zip(vals, ge)]


def sample(family: str, params: dict, x_min: int, size: int, rng: np.random.Generator | None = None,
           table_span: int = 1_000_000) -> np.ndarray:
    """Draw discrete variates by inverse CDF over a table, with a continuous
    approximation for the (negligible) mass beyond the table."""
    rng = rng or np.random.default_rng()
    if family == "exponential":
        p = -math.expm1(-params["rate"])
        return x_min + rng.geometric(p, size=size) - 1
    if family == "truncated_power_law":
        span = min(table_span, int(60 * params["xc"]) + _HEAD)
    else:
        span = table_span
    xs = np.arange(x_min, x_min + span)
    cdf = np.cumsum(np.exp(log_pmf(family, params, x_min, xs)))
    u = rng.random(size)
    idx = np.searchsorted(cdf, u, side="right")
    out = xs[np.minimum(idx, span - 1)].astype(np.int64)
    beyond = idx >= span
    if beyond.any():
        top = cdf[-1]
        v = (u[beyond] - top) / max(1.0 - top, 1e-300)
        edge = x_min + span - 0.5
        if family == "power_law":
            cont = edge * (1 - v) ** (-1.0 / (params["alpha"] - 1.0))
        elif family == "log_normal":
            lo = special.ndtr((math.log(edge) - params["mu"]) / params["sigma"])
            cont = np.exp(params["mu"] + params["sigma"] * special.ndtri(lo + v * (1 - lo)))
        else:
            cont = np.full(v.shape, edge)
        out[beyond] = np.floor(cont + 0.5).astype(np.int64)
    return out


# ---------------------------------------------------------------------------
# extreme-value scaling
# ---------------------------------------------------------------------------


@dataclass
class ScalingFit:
    gamma_hat: float
    gamma_th: float | None
    intercept: float
    r2: float
    per_n: list[dict]
    observable: str | None = None

    def to_dict(self) -> dict:
        return {"observable": self.observable, "gamma_hat": self.gamma_hat, "gamma_th": self.gamma_th,
                "intercept": self.intercept, "r2": self.r2, "per_n": self.per_n}


def gamma_theory(alpha_hat: float | None) -> float | None:
    if alpha_hat is None or alpha_hat <= 1:
        return None
    return 1.0 / (alpha_hat - 1.0)


def fit_extreme_scaling(extremes, alpha_hat: float | None = None, min_scales: int = 3,
                        min_runs: int = 3) -> ScalingFit:
    """OLS of log <x_max> on log N; per-N means carry a 95% normal band."""
    by_n: dict[int, list[int]] = {}
    obs = None
    for e in extremes:
        by_n.setdefault(int(e.N), []).append(int(e.x_max))
        obs = obs or e.observable
    usable = {n: v for n, v in by_n.items() if len(v) >= min_runs and n > 0}
    if len(usable) < min_scales:
        raise InsufficientScales(
            f"need >= {min_scales} N values with >= {min_runs} runs each; have {len(usable)}")
    ns = np.array(sorted(usable), dtype=float)
    means = np.array([np.mean(usable[int(n)]) for n in ns])
    lx, ly = np.log(ns), np.log(means)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss if ss > 0 else 1.0
    per_n = []
    for n in ns:
        v = np.asarray(usable[int(n)], dtype=float)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        m = float(v.mean())
        per_n.append({"N": int(n), "runs": int(v.size), "mean_x_max": m,
                      "ci_low": m - 1.96 * se, "ci_high": m + 1.96 * se})
    return ScalingFit(float(slope), gamma_theory(alpha_hat), float(intercept), r2, per_n, obs)
