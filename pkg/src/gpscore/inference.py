"""Iterative fitting: pseudo-observation updates + per-feature smoothing.

Each iteration makes two batched half-steps:

(a) for every observation, compute the joint marginal of the score
    difference under the factorized posterior, query the likelihood's
    derivative oracle (moment matching uses the cavity, reverse-KL the
    posterior), and update the observation's pseudo-observation parameters;
(b) re-smooth every feature chain against the updated pseudo-observations.

Both half-steps parallelize over disjoint slices (observations in (a),
features in (b)); the results are independent of the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field

import numpy as np

from . import _fast
from .errors import ConfigError
from .likelihoods import DEFAULT_GH_ORDER, gauss_hermite

__all__ = [
    "FitConfig",
    "FitReport",
    "GuardedUpdate",
    "cavity",
    "update_params_ep",
    "update_params_kl",
    "fit",
    "log_marginal",
]

_OBJECTIVES = {"ep": _fast.OBJ_EP, "kl": _fast.OBJ_KL, "reverse_kl": _fast.OBJ_KL}
_CHUNK = 1 << 16


class GuardedUpdate(ArithmeticError):
    """An update would produce an invalid cavity or site; skip it this round."""


@dataclass(frozen=True)
class FitConfig:
    """Knobs for the fitting loop.

    ``learning_rate`` of None resolves to the likelihood's default (1.0,
    except 0.8 for the Poisson model).  ``threads`` of None uses all cores.
    Convergence is declared when the log-marginal estimate improves by less
    than ``tol`` between iterations.
    """

    objective: str = "ep"
    learning_rate: float | None = None
    tol: float = 1e-3
    max_iters: int = 500
    threads: int | None = None
    gh_order: int = DEFAULT_GH_ORDER

    def __post_init__(self):
        if self.objective not in _OBJECTIVES:
            raise ConfigError(
                f"objective must be one of {sorted(_OBJECTIVES)}, got {self.objective!r}")
        if self.learning_rate is not None and not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be nonnegative")
        if self.gh_order < 2:
            raise ConfigError("gh_order must be at least 2")

    @property
    def objective_code(self) -> int:
        return _OBJECTIVES[self.objective]

    def resolved_threads(self) -> int:
        return self.threads if self.threads else (os.cpu_count() or 1)


@dataclass
class FitReport:
    """What happened during a fit."""

    iterations: int = 0
    converged: bool = False
    log_marginals: list = field(default_factory=list)
    guarded: int = 0
    clamped: int = 0
    all_guarded: bool = False

    def first_convergence_iteration(self, tol: float) -> int | None:
        """1-based index of the first iteration whose log-marginal moved by
        less than ``tol``, or None."""
        seq = self.log_marginals
        for i in range(1, len(seq)):
            if abs(seq[i] - seq[i - 1]) < tol:
                return i + 1
        return None

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "log_marginal": self.log_marginals[-1] if self.log_marginals else None,
            "log_marginals": list(self.log_marginals),
            "guarded": self.guarded,
            "clamped": self.clamped,
        }


# ---------------------------------------------------------------------------
# scalar update primitives (the compiled sweep inlines the same arithmetic)
# ---------------------------------------------------------------------------

def cavity(mu: float, var: float, alpha: float, beta: float):
    """Remove a pseudo-observation from a marginal, in natural parameters.

    Raises :class:`GuardedUpdate` when the remaining precision is not
    positive.
    """
    prec = 1.0 / var - beta
    if prec <= 0.0:
        raise GuardedUpdate("cavity precision is not positive")
    var_c = 1.0 / prec
    mu_c = var_c * (mu / var - alpha)
    return mu_c, var_c


def update_params_ep(x: float, sigma_mm: float, mu_m: float,
                     d1: float, d2: float, lam: float,
                     old: tuple[float, float]) -> tuple[float, float]:
    """Damped moment-matching update of one site's natural parameters.

    ``mu_m``/``sigma_mm`` are the cavity moments of the feature's sample and
    d1/d2 the log-partition derivatives in the cavity mean of the score
    difference.
    """
    den = 1.0 + sigma_mm * x * x * d2
    if den <= 0.0:
        raise GuardedUpdate("nonpositive moment-matching denominator")
    alpha, beta = old
    alpha = (1.0 - lam) * alpha + lam * (x * d1 - mu_m * x * x * d2) / den
    beta = (1.0 - lam) * beta + lam * (-x * x * d2) / den
    if beta < 0.0:
        beta = 0.0
    return alpha, beta


def update_params_kl(x: float, mu_m: float, d1: float, d2: float, lam: float,
                     old: tuple[float, float]) -> tuple[float, float]:
    """Damped natural-gradient update of one site (reverse-KL objective).

    ``mu_m`` is the posterior mean of the feature's sample; d1/d2 the
    expected log-likelihood derivatives in the posterior mean of the score
    difference.
    """
    alpha, beta = old
    alpha = (1.0 - lam) * alpha + lam * (x * d1 - mu_m * x * x * d2)
    beta = (1.0 - lam) * beta + lam * (-x * x * d2)
    if beta < 0.0:
        beta = 0.0
    return alpha, beta


# ---------------------------------------------------------------------------
# packed problem + the fitting loop
# ---------------------------------------------------------------------------

@dataclass
class PackedProblem:
    """Flat-array view of a model, shared by the compiled sweeps.

    One node per (observation, feature) incidence; the site and marginal
    arenas are indexed by global node id and each chain holds views into
    them.
    """

    obs_ptr: np.ndarray       # (N+1,) CSR offsets into the incidence arrays
    inc_node: np.ndarray      # (nnz,) global node ids
    inc_coeff: np.ndarray     # (nnz,) folded coefficients
    y: np.ndarray             # (N,) outcomes as floats
    alpha: np.ndarray         # (nnz,) site natural means
    beta: np.ndarray          # (nnz,) site precisions
    mu: np.ndarray            # (nnz,) smoothed marginal means
    var: np.ndarray           # (nnz,) smoothed marginal variances
    chains: list              # per-feature FeatureChain views
    lik_code: int
    lik_param: float
    maxw: int
    gh_order: int = DEFAULT_GH_ORDER

    def __post_init__(self):
        n = len(self.y)
        x, wn = gauss_hermite(self.gh_order)
        self.ghx = x
        self.ghwn = wn
        self.ghlw = np.log(wn)
        self.corr = np.zeros(n)
        self.guard = np.zeros(n, dtype=np.int64)
        self.clamped = np.zeros(n, dtype=np.int64)
        self.lognorms = np.zeros(len(self.chains))

    @property
    def n_obs(self) -> int:
        return len(self.y)


def _run_partitioned(tasks, threads):
    if threads <= 1 or len(tasks) <= 1:
        for task in tasks:
            task()
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(task) for task in tasks]
        wait(futures)
        for f in futures:
            f.result()  # re-raise worker errors


def _sweep_sites(prob: PackedProblem, objective: int, lam: float,
                 apply_updates: int, threads: int) -> None:
    n = prob.n_obs
    spans = [(s, min(s + _CHUNK, n)) for s in range(0, n, _CHUNK)]

    def make(span):
        s, e = span

        def task():
            _fast.update_sites_range(
                s, e, prob.obs_ptr, prob.inc_node, prob.inc_coeff, prob.y,
                prob.mu, prob.var, prob.alpha, prob.beta,
                prob.lik_code, prob.lik_param, objective, lam, apply_updates,
                prob.ghx, prob.ghlw, prob.ghwn, prob.maxw,
                prob.corr, prob.guard, prob.clamped)
        return task

    _run_partitioned([make(s) for s in spans], threads)


def _smooth_all(prob: PackedProblem, threads: int) -> float:
    def make(i):
        def task():
            prob.lognorms[i] = prob.chains[i].smooth()
        return task

    _run_partitioned([make(i) for i in range(len(prob.chains))], threads)
    return float(np.sum(prob.lognorms))


def fit(model, config: FitConfig | None = None) -> FitReport:
    """Run the two-step iteration until the log-marginal estimate settles."""
    config = config or FitConfig()
    if not model.observations:
        raise ValueError("cannot fit a model with no observations")
    prob = model._compile(gh_order=config.gh_order)
    lam = config.learning_rate
    if lam is None:
        lam = model.likelihood.default_learning_rate
    threads = config.resolved_threads()
    objective = config.objective_code

    report = FitReport()
    # bring the marginals in line with the current sites (the prior, unless
    # warm-started from an earlier fit)
    lognorm = _smooth_all(prob, threads)
    for it in range(config.max_iters):
        _sweep_sites(prob, objective, lam, 1, threads)
        lognorm = _smooth_all(prob, threads)
        logml = lognorm + float(np.sum(prob.corr))
        report.iterations = it + 1
        report.guarded += int(np.sum(prob.guard))
        report.clamped += int(np.sum(prob.clamped))
        report.log_marginals.append(logml)
        if not np.isfinite(logml):
            raise FloatingPointError("log-marginal estimate is not finite")
        if len(report.log_marginals) >= 2 and \
                abs(report.log_marginals[-1] - report.log_marginals[-2]) < config.tol:
            report.converged = True
            break
        if prob.n_obs > 0 and int(np.sum(prob.guard)) == prob.n_obs:
            report.all_guarded = True
            break
    model._report = report
    return report


def log_marginal(model, gh_order: int = DEFAULT_GH_ORDER) -> float:
    """Log-marginal likelihood estimate at the model's current sites.

    Sum over features of the chain log-normalizers plus, per observation,
    the log-partition under the cavity minus the log-density of its sites
    under their cavity moments.  Exact for the Gaussian likelihood with
    single-feature observations; zero for an empty model.
    """
    if not model.observations:
        return 0.0
    prob = model._compile(gh_order=gh_order)
    lognorm = _smooth_all(prob, 1)
    _sweep_sites(prob, _fast.OBJ_EP, 1.0, 0, 1)
    return lognorm + float(np.sum(prob.corr))


def elbo(model, gh_order: int = DEFAULT_GH_ORDER) -> float:
    """Evidence lower bound at the model's current posterior.

    Expected log-likelihood of the observations under the factorized
    posterior minus the divergence from the prior, computed chain by chain:

        sum_n E_q[log p(y_n | z_n)] + sum_m lognorm_m
            - sum_sites E_q[log N(site_mean | s, site_var)].

    This is the quantity the reverse-KL objective maximizes; for fits with
    a log-concave likelihood and unit learning rate it is nondecreasing
    across iterations.
    """
    if not model.observations:
        return 0.0
    prob = model._compile(gh_order=gh_order)
    lognorm = _smooth_all(prob, 1)
    contrib = prob.inc_coeff * prob.mu[prob.inc_node]
    mu_q = np.add.reduceat(contrib, prob.obs_ptr[:-1])
    contrib = prob.inc_coeff ** 2 * prob.var[prob.inc_node]
    var_q = np.add.reduceat(contrib, prob.obs_ptr[:-1])
    ell, _, _ = model.likelihood.kl_derivatives(prob.y, mu_q, np.maximum(var_q, 1e-300),
                                                order=gh_order)
    proper = prob.beta > 0
    a = prob.alpha[proper]
    b = prob.beta[proper]
    mu_n = prob.mu[proper]
    var_n = prob.var[proper]
    site_exp = 0.5 * (np.log(b) - np.log(2.0 * np.pi)) \
        - (a - b * mu_n) ** 2 / (2.0 * b) - 0.5 * b * var_n
    return float(np.sum(ell) + lognorm - np.sum(site_exp))
