"""Observation models p(y | d) for the score difference d.

Each likelihood exposes the two derivative oracles used by the fitting
algorithm: derivatives of the log-partition function (moment matching /
EP) and derivatives of the expected log-likelihood (reverse-KL).  Both are
closed-form where tractable and Gauss-Hermite quadrature otherwise.  All
functions are vectorized over their float arguments.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from . import _fast
from .errors import ConfigError, DataError

__all__ = [
    "Likelihood",
    "Probit",
    "Logit",
    "OrdinalProbit",
    "PoissonExp",
    "Gaussian",
    "log_pdf",
    "ep_derivatives",
    "kl_derivatives",
    "likelihood_from_json",
    "DEFAULT_GH_ORDER",
]

DEFAULT_GH_ORDER = 64
_LOG_2PI = math.log(2.0 * math.pi)

_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights such that E_{N(m,v)}[f] ~= sum_i w_i f(m + sqrt(2v) x_i)."""
    try:
        return _GH_CACHE[order]
    except KeyError:
        x, w = np.polynomial.hermite.hermgauss(order)
        pair = (x, w / math.sqrt(math.pi))
        _GH_CACHE[order] = pair
        return pair


def _norm_logpdf(z):
    return -0.5 * z * z - 0.5 * _LOG_2PI


def _mills(z):
    """Inverse Mills ratio pdf/cdf, stable in the deep lower tail."""
    return np.exp(_norm_logpdf(z) - special.log_ndtr(z))


def _probit_family_stats(z):
    """(log Phi(z), ratio, curvature) helpers shared by probit-style forms."""
    logz = special.log_ndtr(z)
    r = np.exp(_norm_logpdf(z) - logz)
    return logz, r, -r * (z + r)


class Likelihood:
    """Base class; subclasses define the outcome space and the densities."""

    name: str
    nb_code: int
    nb_param: float = 0.0
    default_learning_rate: float = 1.0

    def validate_outcome(self, y) -> None:
        raise NotImplementedError

    def log_pdf(self, y, d):
        """log p(y | d), elementwise."""
        raise NotImplementedError

    def dlog_pdf(self, y, d):
        """d/dd log p(y | d)."""
        raise NotImplementedError

    def d2log_pdf(self, y, d):
        """d^2/dd^2 log p(y | d)."""
        raise NotImplementedError

    # -- EP oracle -----------------------------------------------------

    def ep_derivatives(self, y, mu, var, order: int | None = None):
        """log Z and its first two derivatives in the cavity mean.

        Z = integral of p(y | u) N(u | mu, var) du.  Default implementation
        is moment matching by quadrature in log space; subclasses override
        with closed forms where they exist.
        """
        return self._ep_quadrature(y, mu, var, order)

    def _ep_quadrature(self, y, mu, var, order=None):
        # Adaptive Gauss-Hermite: a first pass centered on the cavity
        # estimates the tilted moments, a second pass centered there (with
        # importance correction) evaluates log Z and the tilted moments to
        # near machine precision.  The mean-derivatives follow from the
        # Gaussian moment identities.
        x, w = gauss_hermite(order or DEFAULT_GH_ORDER)
        y, mu, var = np.broadcast_arrays(np.asarray(y, float),
                                         np.asarray(mu, float),
                                         np.asarray(var, float))
        yb = y[..., None]

        du = np.sqrt(2.0 * var)[..., None] * x
        ll = self.log_pdf(yb, mu[..., None] + du) + np.log(w)
        p = np.exp(ll - ll.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        m1 = (p * du).sum(axis=-1)
        m2 = (p * du * du).sum(axis=-1)
        center = mu + m1
        spread = np.maximum(m2 - m1 * m1, 1e-12 * var)

        u = center[..., None] + np.sqrt(2.0 * spread)[..., None] * x
        diff = u - mu[..., None]
        ll = (self.log_pdf(yb, u) + np.log(w)
              + 0.5 * np.log(spread[..., None] / var[..., None])
              - 0.5 * diff * diff / var[..., None]
              + 0.5 * (u - center[..., None]) ** 2 / spread[..., None])
        lmax = ll.max(axis=-1)
        p = np.exp(ll - lmax[..., None])
        zsum = p.sum(axis=-1)
        p /= zsum[..., None]
        logz = lmax + np.log(zsum)
        # two equivalent derivative identities with complementary stability:
        # tilted moments have polynomial integrands (fast-converging) but
        # cancel catastrophically as var -> 0, where the expectations of the
        # analytic log-density derivatives are exact
        m1 = (p * diff).sum(axis=-1)
        m2 = (p * diff * diff).sum(axis=-1)
        d1_mom = m1 / var
        d2_mom = (m2 - m1 * m1) / (var * var) - 1.0 / var
        g1 = self.dlog_pdf(yb, u)
        g2 = self.d2log_pdf(yb, u)
        d1_der = (p * g1).sum(axis=-1)
        d2_der = (p * (g2 + g1 * g1)).sum(axis=-1) - d1_der * d1_der
        small = var < 1e-6
        d1 = np.where(small, d1_der, d1_mom)
        d2 = np.where(small, d2_der, d2_mom)
        return logz, d1, d2

    # -- reverse-KL oracle ----------------------------------------------

    def kl_derivatives(self, y, mu, var, order: int | None = None):
        """Expected log-likelihood under N(mu, var) and its mu-derivatives.

        The derivatives are quadratures of the u-derivatives of log p(y|u)
        (Gaussian shift identities), so no finite differencing is involved.
        """
        x, w = gauss_hermite(order or DEFAULT_GH_ORDER)
        y, mu, var = np.broadcast_arrays(np.asarray(y, float),
                                         np.asarray(mu, float),
                                         np.asarray(var, float))
        u = mu[..., None] + np.sqrt(2.0 * var)[..., None] * x
        yb = y[..., None]
        val = (self.log_pdf(yb, u) * w).sum(axis=-1)
        d1 = (self.dlog_pdf(yb, u) * w).sum(axis=-1)
        d2 = (self.d2log_pdf(yb, u) * w).sum(axis=-1)
        return val, d1, d2

    # -- prediction ------------------------------------------------------

    def predictive(self, mu, var):
        """Outcome distribution after integrating N(mu, var) over the score
        difference."""
        raise NotImplementedError

    def to_json(self) -> dict:
        return {"likelihood": self.name}


class DiscretePrediction:
    """Distribution over a finite outcome set."""

    def __init__(self, probs: dict):
        self.probs = probs

    def prob(self, y) -> float:
        return self.probs[y]

    def log_prob(self, y) -> float:
        return math.log(self.probs[y])

    def argmax(self):
        """Most probable outcomes (all of them, in case of exact ties)."""
        best = max(self.probs.values())
        return [y for y, p in self.probs.items() if p == best]


class GaussianPrediction:
    """Predictive density over a real-valued outcome (points difference)."""

    def __init__(self, mean: float, var: float):
        self.mean = mean
        self.var = var

    def log_prob(self, y) -> float:
        return float(-0.5 * (_LOG_2PI + math.log(self.var))
                     - 0.5 * (y - self.mean) ** 2 / self.var)

    def ordinal_probs(self, ties: bool = False, band: float = 0.5) -> dict:
        """Win/tie/loss probabilities for an integer points difference.

        A tie corresponds to the difference falling within +-``band``.
        """
        s = math.sqrt(self.var)
        if not ties:
            p_pos = float(special.ndtr(self.mean / s))
            return {1: p_pos, -1: 1.0 - p_pos}
        hi = float(special.ndtr((band - self.mean) / s))
        lo = float(special.ndtr((-band - self.mean) / s))
        return {1: 1.0 - hi, 0: hi - lo, -1: lo}


class PoissonPrediction:
    """Predictive distribution over counts, by quadrature."""

    def __init__(self, mu, var, order=DEFAULT_GH_ORDER, cap=200):
        self.mu = mu
        self.var = var
        self.cap = cap
        x, w = gauss_hermite(order)
        self._rates = np.exp(mu + math.sqrt(2.0 * var) * x)
        self._w = w

    def prob(self, y) -> float:
        y = int(y)
        logs = y * np.log(self._rates) - self._rates - math.lgamma(y + 1)
        return float(np.sum(self._w * np.exp(logs)))

    def log_prob(self, y) -> float:
        return math.log(self.prob(y))

    def pmf(self, up_to: int | None = None) -> np.ndarray:
        n = (up_to if up_to is not None else self.cap) + 1
        ks = np.arange(n)
        logs = (ks[:, None] * np.log(self._rates)[None, :]
                - self._rates[None, :]
                - special.gammaln(ks + 1.0)[:, None])
        return np.exp(logs) @ self._w


class Probit(Likelihood):
    """Binary outcomes with p(y | d) = Phi(y d)."""

    name = "probit"
    nb_code = _fast.LIK_PROBIT

    def validate_outcome(self, y):
        if y not in (-1, 1):
            raise DataError(f"probit outcome must be +1 or -1, got {y!r}")

    def log_pdf(self, y, d):
        return special.log_ndtr(np.asarray(y, float) * np.asarray(d, float))

    def dlog_pdf(self, y, d):
        y = np.asarray(y, float)
        return y * _mills(y * np.asarray(d, float))

    def d2log_pdf(self, y, d):
        z = np.asarray(y, float) * np.asarray(d, float)
        r = _mills(z)
        return -r * (z + r)

    def ep_derivatives(self, y, mu, var, order=None):
        y = np.asarray(y, float)
        s2 = 1.0 + np.asarray(var, float)
        s = np.sqrt(s2)
        z = y * np.asarray(mu, float) / s
        logz, r, curv = _probit_family_stats(z)
        return logz, y * r / s, curv / s2

    def predictive(self, mu, var):
        p = float(special.ndtr(mu / math.sqrt(1.0 + var)))
        return DiscretePrediction({1: p, -1: 1.0 - p})


class Logit(Likelihood):
    """Binary outcomes with a logistic curve (Bradley-Terry style)."""

    name = "logit"
    nb_code = _fast.LIK_LOGIT

    def validate_outcome(self, y):
        if y not in (-1, 1):
            raise DataError(f"logit outcome must be +1 or -1, got {y!r}")

    def log_pdf(self, y, d):
        z = np.asarray(y, float) * np.asarray(d, float)
        # -log(1 + exp(-z)) without overflow
        return np.where(z > 0, -np.log1p(np.exp(-np.abs(z))),
                        z - np.log1p(np.exp(-np.abs(z))))

    def dlog_pdf(self, y, d):
        y = np.asarray(y, float)
        return y * special.expit(-y * np.asarray(d, float))

    def d2log_pdf(self, y, d):
        p = special.expit(np.asarray(d, float))
        return -p * (1.0 - p) * np.ones_like(np.asarray(y, float))

    def predictive(self, mu, var, order=None):
        x, w = gauss_hermite(order or DEFAULT_GH_ORDER)
        p = float(np.sum(w * special.expit(mu + math.sqrt(2.0 * var) * x)))
        return DiscretePrediction({1: p, -1: 1.0 - p})


class OrdinalProbit(Likelihood):
    """Win/tie/loss outcomes with a draw margin.

    p(+1 | d) = Phi(d - margin), p(-1 | d) = Phi(-d - margin) and the tie
    takes the remaining mass.
    """

    name = "ordinal_probit"
    nb_code = _fast.LIK_ORDINAL_PROBIT

    def __init__(self, draw_margin: float):
        draw_margin = float(draw_margin)
        if not draw_margin > 0:
            raise ConfigError("draw_margin must be positive")
        self.draw_margin = draw_margin
        self.nb_param = draw_margin

    def validate_outcome(self, y):
        if y not in (-1, 0, 1):
            raise DataError(f"ordinal outcome must be -1, 0 or +1, got {y!r}")

    def _tie_logp(self, d):
        d = np.asarray(d, float)
        a = d - self.draw_margin
        b = -d - self.draw_margin
        # the tie mass is even in d; using |d| keeps the two CDF terms well
        # separated in log space for every d
        am = np.abs(d) - self.draw_margin
        bm = -np.abs(d) - self.draw_margin
        la = special.log_ndtr(-am)
        lb = special.log_ndtr(bm)
        return la + np.log1p(-np.exp(lb - la)), a, b

    def log_pdf(self, y, d):
        y = np.asarray(y, float)
        d = np.asarray(d, float)
        win_loss = special.log_ndtr(np.where(y == 0, 1.0, y) * d - self.draw_margin)
        tie, _, _ = self._tie_logp(d)
        return np.where(y == 0, tie, win_loss)

    def dlog_pdf(self, y, d):
        y = np.asarray(y, float)
        d = np.asarray(d, float)
        ysafe = np.where(y == 0, 1.0, y)
        wl = ysafe * _mills(ysafe * d - self.draw_margin)
        lp, a, b = self._tie_logp(d)
        ra = np.exp(_norm_logpdf(a) - lp)
        rb = np.exp(_norm_logpdf(b) - lp)
        return np.where(y == 0, rb - ra, wl)

    def d2log_pdf(self, y, d):
        y = np.asarray(y, float)
        d = np.asarray(d, float)
        ysafe = np.where(y == 0, 1.0, y)
        z = ysafe * d - self.draw_margin
        r = _mills(z)
        wl = -r * (z + r)
        lp, a, b = self._tie_logp(d)
        ra = np.exp(_norm_logpdf(a) - lp)
        rb = np.exp(_norm_logpdf(b) - lp)
        g = rb - ra
        return np.where(y == 0, a * ra + b * rb - g * g, wl)

    def ep_derivatives(self, y, mu, var, order=None):
        y = np.asarray(y, float)
        mu = np.asarray(mu, float)
        s2 = 1.0 + np.asarray(var, float)
        s = np.sqrt(s2)
        ysafe = np.where(y == 0, 1.0, y)
        z = (ysafe * mu - self.draw_margin) / s
        logz_wl, r, curv = _probit_family_stats(z)
        d1_wl = ysafe * r / s
        d2_wl = curv / s2
        a = (mu - self.draw_margin) / s
        b = (-mu - self.draw_margin) / s
        am = (np.abs(mu) - self.draw_margin) / s
        bm = (-np.abs(mu) - self.draw_margin) / s
        la = special.log_ndtr(-am)
        lb = special.log_ndtr(bm)
        logz_tie = la + np.log1p(-np.exp(lb - la))
        ra = np.exp(_norm_logpdf(a) - logz_tie)
        rb = np.exp(_norm_logpdf(b) - logz_tie)
        d1_tie = (rb - ra) / s
        d2_tie = (a * ra + b * rb) / s2 - d1_tie * d1_tie
        tie = y == 0
        return (np.where(tie, logz_tie, logz_wl),
                np.where(tie, d1_tie, d1_wl),
                np.where(tie, d2_tie, d2_wl))

    def predictive(self, mu, var):
        s = math.sqrt(1.0 + var)
        p_win = float(special.ndtr((mu - self.draw_margin) / s))
        p_loss = float(special.ndtr((-mu - self.draw_margin) / s))
        return DiscretePrediction({1: p_win, 0: 1.0 - p_win - p_loss, -1: p_loss})

    def to_json(self):
        return {"likelihood": self.name, "draw_margin": self.draw_margin}


class PoissonExp(Likelihood):
    """Counts with rate exp(d): p(y | d) = exp(y d - e^d) / y!."""

    name = "poisson_exp"
    nb_code = _fast.LIK_POISSON_EXP
    default_learning_rate = 0.8

    def validate_outcome(self, y):
        if not (isinstance(y, (int, np.integer)) or float(y).is_integer()) or y < 0:
            raise DataError(f"poisson outcome must be a nonnegative integer, got {y!r}")

    def log_pdf(self, y, d):
        y = np.asarray(y, float)
        d = np.asarray(d, float)
        return y * d - np.exp(d) - special.gammaln(y + 1.0)

    def dlog_pdf(self, y, d):
        return np.asarray(y, float) - np.exp(np.asarray(d, float))

    def d2log_pdf(self, y, d):
        return -np.exp(np.asarray(d, float)) * np.ones_like(np.asarray(y, float))

    def predictive(self, mu, var):
        return PoissonPrediction(mu, var)


class Gaussian(Likelihood):
    """Real-valued outcomes (points difference): y ~ N(d, obs_noise)."""

    name = "gaussian"
    nb_code = _fast.LIK_GAUSSIAN

    def __init__(self, obs_noise: float):
        obs_noise = float(obs_noise)
        if not obs_noise > 0:
            raise ConfigError("obs_noise must be positive")
        self.obs_noise = obs_noise
        self.nb_param = obs_noise

    def validate_outcome(self, y):
        if not np.isfinite(y):
            raise DataError(f"gaussian outcome must be finite, got {y!r}")

    def log_pdf(self, y, d):
        r = np.asarray(y, float) - np.asarray(d, float)
        return -0.5 * (_LOG_2PI + math.log(self.obs_noise)) \
            - 0.5 * r * r / self.obs_noise

    def dlog_pdf(self, y, d):
        return (np.asarray(y, float) - np.asarray(d, float)) / self.obs_noise

    def d2log_pdf(self, y, d):
        shape = np.broadcast(np.asarray(y), np.asarray(d)).shape
        return np.full(shape, -1.0 / self.obs_noise)

    def ep_derivatives(self, y, mu, var, order=None):
        v = self.obs_noise + np.asarray(var, float)
        r = np.asarray(y, float) - np.asarray(mu, float)
        logz = -0.5 * (_LOG_2PI + np.log(v)) - 0.5 * r * r / v
        return logz, r / v, -1.0 / v

    def kl_derivatives(self, y, mu, var, order=None):
        r = np.asarray(y, float) - np.asarray(mu, float)
        var = np.asarray(var, float)
        val = -0.5 * (_LOG_2PI + math.log(self.obs_noise)) \
            - 0.5 * (r * r + var) / self.obs_noise
        d1 = r / self.obs_noise
        d2 = -np.ones_like(r) / self.obs_noise
        return val, d1, d2

    def predictive(self, mu, var):
        return GaussianPrediction(mu, var + self.obs_noise)

    def to_json(self):
        return {"likelihood": self.name, "obs_noise": self.obs_noise}


# -- module-level wrappers matching the operation names --------------------

def log_pdf(lik: Likelihood, y, d):
    lik.validate_outcome(y)
    return lik.log_pdf(y, d)


def ep_derivatives(lik: Likelihood, y, mu, var, order: int | None = None):
    return lik.ep_derivatives(y, mu, var, order=order)


def kl_derivatives(lik: Likelihood, y, mu, var, order: int | None = None):
    return lik.kl_derivatives(y, mu, var, order=order)


_LIK_FIELDS = {
    "probit": set(),
    "logit": set(),
    "ordinal_probit": {"draw_margin"},
    "poisson_exp": set(),
    "gaussian": {"obs_noise"},
}


def likelihood_from_json(obj) -> Likelihood:
    if not isinstance(obj, dict):
        raise ConfigError("likelihood description must be an object")
    name = obj.get("likelihood")
    if name not in _LIK_FIELDS:
        raise ConfigError(
            f"unknown likelihood {name!r}; expected one of {sorted(_LIK_FIELDS)}")
    extra = set(obj) - _LIK_FIELDS[name] - {"likelihood"}
    if extra:
        raise ConfigError(f"unknown fields for likelihood {name!r}: {sorted(extra)}")
    missing = _LIK_FIELDS[name] - set(obj)
    if missing:
        raise ConfigError(f"missing fields for likelihood {name!r}: {sorted(missing)}")
    if name == "probit":
        return Probit()
    if name == "logit":
        return Logit()
    if name == "ordinal_probit":
        return OrdinalProbit(obj["draw_margin"])
    if name == "poisson_exp":
        return PoissonExp()
    return Gaussian(obj["obs_noise"])
