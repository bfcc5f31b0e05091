"""Per-feature linear-time Gaussian inference.

A :class:`FeatureChain` holds one feature's sample times as a Gauss-Markov
chain.  Gaussian pseudo-observations attach to each node in natural form
(alpha = mean/var, beta = 1/var), so a vacuous pseudo-observation is exactly
(0, 0) and needs no infinity arithmetic.  Smoothing runs a Kalman forward
pass followed by a Rauch-Tung-Striebel backward pass and also accumulates
the log-evidence of the pseudo-observations under the chain's prior.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _fast
from .errors import NotFittedError
from .kernels import StateSpaceSpec

__all__ = ["FeatureChain", "build_chain", "batch_posterior"]


class FeatureChain:
    """Markov chain over one feature's observation times.

    Duplicate times are kept as distinct nodes joined by identity links, so
    every (observation, feature) incidence owns exactly one node and one
    pseudo-observation slot.
    """

    def __init__(self, spec: StateSpaceSpec, times,
                 alpha=None, beta=None, mu_out=None, var_out=None):
        times = np.ascontiguousarray(times, dtype=float)
        if times.ndim != 1:
            raise ValueError("times must be one-dimensional")
        if len(times) > 1 and np.any(np.diff(times) < 0):
            raise ValueError("times must be sorted nondecreasing")
        self.spec = spec
        self.times = times
        n = len(times)
        k = spec.order

        def _buf(arr, name):
            if arr is None:
                return np.zeros(n)
            if len(arr) != n:
                raise ValueError(f"{name} must have one entry per node")
            return arr

        self.alpha = _buf(alpha, "alpha")
        self.beta = _buf(beta, "beta")
        self.mu = _buf(mu_out, "mu_out")
        self.var = _buf(var_out, "var_out")

        if n > 0:
            A, Q = spec.link_matrices(times)
            m0, P0 = spec.initial(times[0])
            self._A = np.ascontiguousarray(A)
            self._Q = np.ascontiguousarray(Q)
            self._m0 = np.ascontiguousarray(m0)
            self._P0 = np.ascontiguousarray(P0)
        else:
            self._A = np.zeros((0, k, k))
            self._Q = np.zeros((0, k, k))
            self._m0 = np.zeros(k)
            self._P0 = np.zeros((k, k))
        self._h = np.ascontiguousarray(spec.measurement, dtype=float)
        self._fm = np.zeros((n, k))
        self._fP = np.zeros((n, k, k))
        self._sm = np.zeros((n, k))
        self._sP = np.zeros((n, k, k))
        self._smoothed = False

    def __len__(self):
        return len(self.times)

    @property
    def order(self) -> int:
        return self.spec.order

    def set_sites(self, alpha, beta) -> None:
        """Overwrite the pseudo-observation natural parameters."""
        alpha = np.asarray(alpha, dtype=float)
        beta = np.asarray(beta, dtype=float)
        if np.any(beta < 0):
            raise ValueError("pseudo-observation precisions must be nonnegative")
        self.alpha[:] = alpha
        self.beta[:] = beta
        self._smoothed = False

    def smooth(self) -> float:
        """Run the forward/backward sweep; returns the log-normalizer.

        The log-normalizer is the log-evidence of the pseudo-observations
        under the chain's prior (a sum of one-step-ahead predictive Gaussian
        log-densities).
        """
        n = len(self.times)
        if n == 0:
            self._smoothed = True
            return 0.0
        if self.spec.order == 1:
            lognorm = _fast.filter_smooth_1d(
                self._A[:, 0, 0], self._Q[:, 0, 0],
                self._m0[0], self._P0[0, 0],
                self.alpha, self.beta,
                self._fm[:, 0], self._fP[:, 0, 0],
                self._sm[:, 0], self._sP[:, 0, 0])
        else:
            lognorm = _fast.filter_smooth_nd(
                self._A, self._Q, self._h, self._m0, self._P0,
                self.alpha, self.beta,
                self._fm, self._fP, self._sm, self._sP)
        self.mu[:] = self._sm @ self._h
        self.var[:] = np.einsum("nij,i,j->n", self._sP, self._h, self._h)
        if not (np.isfinite(lognorm) and np.all(np.isfinite(self.var))):
            raise FloatingPointError(
                "non-finite filter covariance: hyperparameters diverge")
        self._smoothed = True
        return lognorm

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        """Smoothed scalar marginals (means, variances) at the node times."""
        if not self._smoothed:
            raise NotFittedError("chain has not been smoothed")
        return self.mu, self.var

    def posterior_at(self, t: float) -> tuple[float, float]:
        """Predictive marginal (mean, variance) of the skill at time ``t``.

        Constant-time given the bracketing node indices: past the last node
        the smoothed state is propagated forward; before the first node the
        prior state at ``t`` is conditioned on the first smoothed node; in
        the interior, a phantom node is filtered from the left neighbor and
        smoothed from the right one, which is the exact Gaussian bridge.
        """
        h = self._h
        spec = self.spec
        n = len(self.times)
        if n == 0:
            return 0.0, spec.prior_var(t)
        if not self._smoothed:
            if np.any(self.beta != 0.0):
                raise NotFittedError(
                    "chain has pending pseudo-observations; smooth() first")
            # vacuous sites: the prior marginal
            return 0.0, spec.prior_var(t)
        t = float(t)
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        if i >= 0 and self.times[i] == t:
            return float(self.mu[i]), float(self.var[i])
        if i == n - 1:
            A = spec.transition(self.times[-1], t)
            Q = spec.noise(self.times[-1], t)
            m = A @ self._sm[-1]
            P = A @ self._sP[-1] @ A.T + Q
            return float(h @ m), float(h @ P @ h)
        if i < 0:
            m_left, P_left = spec.initial(t)
        else:
            A1 = spec.transition(self.times[i], t)
            Q1 = spec.noise(self.times[i], t)
            m_left = A1 @ self._fm[i]
            P_left = A1 @ self._fP[i] @ A1.T + Q1
        r = i + 1
        A2 = spec.transition(t, self.times[r])
        Q2 = spec.noise(t, self.times[r])
        P_pred = A2 @ P_left @ A2.T + Q2
        G = P_left @ A2.T @ np.linalg.pinv(P_pred)
        m = m_left + G @ (self._sm[r] - A2 @ m_left)
        P = P_left + G @ (self._sP[r] - P_pred) @ G.T
        return float(h @ m), float(h @ P @ h)


def build_chain(spec: StateSpaceSpec, times, **kwargs) -> FeatureChain:
    """Construct a chain with vacuous pseudo-observations at the given times."""
    return FeatureChain(spec, times, **kwargs)


def batch_posterior(gram, alpha, beta):
    """Dense posterior given Gaussian pseudo-observations (cubic-cost oracle).

    Computes mean and covariance of  p(s) * prod_n N(s_n | mu_n, var_n) for
    s ~ N(0, gram), parametrized by alpha = mu/var and beta = 1/var, without
    forming gram^{-1}:

        cov = K - K D^{1/2} (I + D^{1/2} K D^{1/2})^{-1} D^{1/2} K,
        mean = cov @ alpha,       D = diag(beta).

    Entries with beta = 0 are vacuous pseudo-observations: they contribute
    nothing, and their alpha is ignored.
    """
    gram = np.asarray(gram, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = len(alpha)
    if gram.shape != (n, n):
        raise ValueError("gram shape does not match the pseudo-observations")
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    root = np.sqrt(beta)
    B = np.eye(n) + (root[:, None] * gram) * root[None, :]
    cf = cho_factor(B, lower=True)
    W = cho_solve(cf, root[:, None] * gram)
    cov = gram - (root[:, None] * gram).T @ W
    cov = 0.5 * (cov + cov.T)
    mean = cov @ np.where(beta > 0, alpha, 0.0)
    return mean, cov
