"""Covariance functions for latent skill curves.

Each kernel can be evaluated pointwise, assembled into a Gram matrix, or
converted into an equivalent Gauss-Markov state-space form (transition and
process-noise generators plus a measurement vector), which is what the
linear-time smoother consumes.  Kernels are immutable and can be combined
with ``+``.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "Kernel",
    "Constant",
    "PiecewiseConstant",
    "Wiener",
    "Matern12",
    "Matern32",
    "Linear",
    "Sum",
    "StateSpaceSpec",
    "kernel_from_json",
    "kernel_to_json",
]


def _check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ConfigError(f"{name} must be a positive finite number, got {value!r}")
    return value


class StateSpaceSpec:
    """Gauss-Markov reformulation of a kernel.

    A process with this spec satisfies  s_bar(t1) = A(t0, t1) s_bar(t0) + eps,
    eps ~ N(0, Q(t0, t1)), and the scalar skill value is read out through the
    measurement vector:  s(t) = h @ s_bar(t).

    Subclasses provide ``initial`` and ``link_matrices``; the generic
    ``transition``/``noise`` accessors are derived from the latter.
    """

    order: int
    measurement: np.ndarray

    def initial(self, t0: float) -> tuple[np.ndarray, np.ndarray]:
        """Mean vector and covariance matrix of the state at time ``t0``."""
        raise NotImplementedError

    def link_matrices(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stacked A and Q matrices for each consecutive pair of ``times``.

        Returns arrays of shape (len(times) - 1, K, K).
        """
        raise NotImplementedError

    def transition(self, t0: float, t1: float) -> np.ndarray:
        A, _ = self.link_matrices(np.array([t0, t1], dtype=float))
        return A[0]

    def noise(self, t0: float, t1: float) -> np.ndarray:
        _, Q = self.link_matrices(np.array([t0, t1], dtype=float))
        return Q[0]

    def prior_var(self, t: float) -> float:
        """Marginal prior variance of the scalar skill at time ``t``."""
        _, P0 = self.initial(t)
        h = self.measurement
        return float(h @ P0 @ h)


class _ScalarSpec(StateSpaceSpec):
    """Base for one-dimensional state-space forms (K = 1)."""

    order = 1
    measurement = np.array([1.0])

    def _scalar_links(self, times):
        raise NotImplementedError

    def link_matrices(self, times):
        a, q = self._scalar_links(np.asarray(times, dtype=float))
        return a.reshape(-1, 1, 1), q.reshape(-1, 1, 1)


class _ConstantSpec(_ScalarSpec):
    def __init__(self, var):
        self.var = var

    def initial(self, t0):
        return np.zeros(1), np.array([[self.var]])

    def _scalar_links(self, times):
        n = len(times) - 1
        return np.ones(n), np.zeros(n)


class _WienerSpec(_ScalarSpec):
    def __init__(self, var, epoch):
        self.var = var
        self.epoch = epoch

    def initial(self, t0):
        tau = t0 - self.epoch
        if tau < 0:
            raise ValueError(
                f"time {t0} predates the Wiener process origin {self.epoch}"
            )
        return np.zeros(1), np.array([[self.var * tau]])

    def _scalar_links(self, times):
        dt = np.diff(times)
        return np.ones(len(dt)), self.var * dt


class _Matern12Spec(_ScalarSpec):
    def __init__(self, var, lscale):
        self.var = var
        self.lscale = lscale

    def initial(self, t0):
        return np.zeros(1), np.array([[self.var]])

    def _scalar_links(self, times):
        a = np.exp(-np.diff(times) / self.lscale)
        return a, self.var * (1.0 - a * a)


class _PiecewiseConstantSpec(_ScalarSpec):
    def __init__(self, var, boundaries):
        self.var = var
        self.boundaries = boundaries

    def initial(self, t0):
        return np.zeros(1), np.array([[self.var]])

    def _scalar_links(self, times):
        seg = np.searchsorted(self.boundaries, times, side="right")
        crossed = seg[1:] != seg[:-1]
        a = np.where(crossed, 0.0, 1.0)
        q = np.where(crossed, self.var, 0.0)
        return a, q


class _Matern32Spec(StateSpaceSpec):
    order = 2
    measurement = np.array([1.0, 0.0])

    def __init__(self, var, lscale):
        self.var = var
        self.lam = np.sqrt(3.0) / lscale
        self.stationary_cov = np.diag([var, self.lam**2 * var])

    def initial(self, t0):
        return np.zeros(2), self.stationary_cov.copy()

    def link_matrices(self, times):
        dt = np.diff(np.asarray(times, dtype=float))
        lam = self.lam
        decay = np.exp(-lam * dt)
        n = len(dt)
        A = np.empty((n, 2, 2))
        A[:, 0, 0] = decay * (1.0 + lam * dt)
        A[:, 0, 1] = decay * dt
        A[:, 1, 0] = decay * (-(lam**2) * dt)
        A[:, 1, 1] = decay * (1.0 - lam * dt)
        # Q = P_inf - A P_inf A^T keeps the process stationary across each gap.
        P = self.stationary_cov
        APAt = np.einsum("nij,jk,nlk->nil", A, P, A)
        Q = P[None, :, :] - APAt
        Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
        return A, Q


class _LinearSpec(StateSpaceSpec):
    # State is (s(t), slope); the slope never changes, so Q = 0.
    order = 2
    measurement = np.array([1.0, 0.0])

    def __init__(self, var, epoch):
        self.var = var
        self.epoch = epoch

    def initial(self, t0):
        tau = t0 - self.epoch
        cov = self.var * np.array([[tau * tau, tau], [tau, 1.0]])
        return np.zeros(2), cov

    def link_matrices(self, times):
        dt = np.diff(np.asarray(times, dtype=float))
        n = len(dt)
        A = np.tile(np.eye(2), (n, 1, 1))
        A[:, 0, 1] = dt
        return A, np.zeros((n, 2, 2))


class _BlockSpec(StateSpaceSpec):
    """Block-diagonal concatenation of children specs (sum kernels)."""

    def __init__(self, parts: Sequence[StateSpaceSpec]):
        self.parts = list(parts)
        self.order = sum(p.order for p in self.parts)
        self.measurement = np.concatenate([p.measurement for p in self.parts])
        offs = np.cumsum([0] + [p.order for p in self.parts])
        self._slices = [slice(offs[i], offs[i + 1]) for i in range(len(self.parts))]

    def initial(self, t0):
        mean = np.zeros(self.order)
        cov = np.zeros((self.order, self.order))
        for part, sl in zip(self.parts, self._slices):
            m, P = part.initial(t0)
            mean[sl] = m
            cov[sl, sl] = P
        return mean, cov

    def link_matrices(self, times):
        n = len(times) - 1
        A = np.zeros((n, self.order, self.order))
        Q = np.zeros((n, self.order, self.order))
        for part, sl in zip(self.parts, self._slices):
            Ap, Qp = part.link_matrices(times)
            A[:, sl, sl] = Ap
            Q[:, sl, sl] = Qp
        return A, Q


class Kernel:
    """Base class for covariance functions k(t, t')."""

    def evaluate(self, t, tp, epoch: float = 0.0):
        """Evaluate k(t, t') elementwise (broadcasts).

        ``epoch`` shifts the time origin of the origin-dependent kernels
        (Wiener, Linear); stationary kernels ignore it.
        """
        raise NotImplementedError

    def __call__(self, t, tp):
        return self.evaluate(t, tp)

    def gram(self, times, epoch: float = 0.0) -> np.ndarray:
        """Covariance matrix [k(t_i, t_j)] over the given times."""
        t = np.asarray(times, dtype=float)
        return np.asarray(self.evaluate(t[:, None], t[None, :], epoch=epoch))

    def to_state_space(self, epoch: float = 0.0) -> StateSpaceSpec:
        """Equivalent Gauss-Markov form, with time origin at ``epoch``."""
        raise NotImplementedError

    @property
    def total_var(self) -> float:
        """Sum of the component variances (used for jitter scaling)."""
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError

    def __add__(self, other):
        if not isinstance(other, Kernel):
            return NotImplemented
        left = self.children if isinstance(self, Sum) else [self]
        right = other.children if isinstance(other, Sum) else [other]
        return Sum(left + right)

    def __mul__(self, other):
        raise NotImplementedError(
            "product composition of kernels is not supported: it has no exact "
            "block state-space form; use sums of kernels instead"
        )

    __rmul__ = __mul__

    def __repr__(self):
        return json.dumps(self.to_json())


class Constant(Kernel):
    """Flat covariance: a skill offset that never moves."""

    def __init__(self, var: float):
        self.var = _check_positive(var, "var")

    def evaluate(self, t, tp, epoch=0.0):
        return self.var * np.ones(np.broadcast(np.asarray(t), np.asarray(tp)).shape)

    def to_state_space(self, epoch=0.0):
        return _ConstantSpec(self.var)

    @property
    def total_var(self):
        return self.var

    def to_json(self):
        return {"type": "constant", "var": self.var}


class PiecewiseConstant(Kernel):
    """Constant within each interval of a partition, independent across them.

    ``boundaries`` split the real line into half-open intervals [b_i, b_{i+1});
    two times covary iff they fall in the same interval.
    """

    def __init__(self, var: float, boundaries: Sequence[float]):
        self.var = _check_positive(var, "var")
        b = np.asarray(boundaries, dtype=float)
        if b.ndim != 1 or len(b) == 0:
            raise ConfigError("boundaries must be a non-empty 1-D sequence")
        if not np.all(np.diff(b) > 0):
            raise ConfigError("boundaries must be strictly increasing")
        self.boundaries = b

    def _segment(self, t):
        return np.searchsorted(self.boundaries, np.asarray(t, dtype=float), side="right")

    def evaluate(self, t, tp, epoch=0.0):
        same = self._segment(t) == self._segment(tp)
        return np.where(same, self.var, 0.0)

    def to_state_space(self, epoch=0.0):
        return _PiecewiseConstantSpec(self.var, self.boundaries)

    @property
    def total_var(self):
        return self.var

    def to_json(self):
        return {
            "type": "piecewise_constant",
            "var": self.var,
            "boundaries": self.boundaries.tolist(),
        }


class Wiener(Kernel):
    """Brownian-motion covariance k(t, t') = var * min(t, t')."""

    def __init__(self, var: float):
        self.var = _check_positive(var, "var")

    def evaluate(self, t, tp, epoch=0.0):
        t = np.asarray(t, dtype=float) - epoch
        tp = np.asarray(tp, dtype=float) - epoch
        return self.var * np.minimum(t, tp)

    def to_state_space(self, epoch=0.0):
        return _WienerSpec(self.var, epoch)

    @property
    def total_var(self):
        return self.var

    def to_json(self):
        return {"type": "wiener", "var": self.var}


class Matern12(Kernel):
    """Exponential covariance: mean-reverting Brownian motion.

    k(t, t') = var * exp(-|t - t'| / lscale).
    """

    def __init__(self, var: float, lscale: float):
        self.var = _check_positive(var, "var")
        self.lscale = _check_positive(lscale, "lscale")

    def evaluate(self, t, tp, epoch=0.0):
        r = np.abs(np.asarray(t, dtype=float) - np.asarray(tp, dtype=float))
        return self.var * np.exp(-r / self.lscale)

    def to_state_space(self, epoch=0.0):
        return _Matern12Spec(self.var, self.lscale)

    @property
    def total_var(self):
        return self.var

    def to_json(self):
        return {"type": "matern12", "var": self.var, "lscale": self.lscale}


class Matern32(Kernel):
    """Once-differentiable Matern covariance.

    k(t, t') = var * (1 + sqrt(3) r / lscale) * exp(-sqrt(3) r / lscale),
    with r = |t - t'|.
    """

    def __init__(self, var: float, lscale: float):
        self.var = _check_positive(var, "var")
        self.lscale = _check_positive(lscale, "lscale")

    def evaluate(self, t, tp, epoch=0.0):
        r = np.abs(np.asarray(t, dtype=float) - np.asarray(tp, dtype=float))
        u = np.sqrt(3.0) * r / self.lscale
        return self.var * (1.0 + u) * np.exp(-u)

    def to_state_space(self, epoch=0.0):
        return _Matern32Spec(self.var, self.lscale)

    @property
    def total_var(self):
        return self.var

    def to_json(self):
        return {"type": "matern32", "var": self.var, "lscale": self.lscale}


class Linear(Kernel):
    """Linear-trend covariance k(t, t') = var * t * t' (slope ~ N(0, var))."""

    def __init__(self, var: float):
        self.var = _check_positive(var, "var")

    def evaluate(self, t, tp, epoch=0.0):
        t = np.asarray(t, dtype=float) - epoch
        tp = np.asarray(tp, dtype=float) - epoch
        return self.var * t * tp

    def to_state_space(self, epoch=0.0):
        return _LinearSpec(self.var, epoch)

    @property
    def total_var(self):
        return self.var

    def to_json(self):
        return {"type": "linear", "var": self.var}


class Sum(Kernel):
    """Additive composition: independent components added together."""

    def __init__(self, children: Sequence[Kernel]):
        children = list(children)
        if len(children) < 2:
            raise ConfigError("a sum kernel needs at least two children")
        for child in children:
            if not isinstance(child, Kernel):
                raise ConfigError(f"sum child is not a kernel: {child!r}")
        self.children = children

    def evaluate(self, t, tp, epoch=0.0):
        return sum(c.evaluate(t, tp, epoch=epoch) for c in self.children)

    def to_state_space(self, epoch=0.0):
        return _BlockSpec([c.to_state_space(epoch) for c in self.children])

    @property
    def total_var(self):
        return sum(c.total_var for c in self.children)

    def to_json(self):
        return {"type": "sum", "children": [c.to_json() for c in self.children]}


_KERNEL_FIELDS = {
    "constant": {"var"},
    "piecewise_constant": {"var", "boundaries"},
    "wiener": {"var"},
    "matern12": {"var", "lscale"},
    "matern32": {"var", "lscale"},
    "linear": {"var"},
    "sum": {"children"},
}


def kernel_from_json(obj) -> Kernel:
    """Build a kernel from its JSON description.

    Unknown kernel types and unknown fields are rejected.
    """
    if not isinstance(obj, dict):
        raise ConfigError(f"kernel description must be an object, got {type(obj).__name__}")
    ktype = obj.get("type")
    if ktype not in _KERNEL_FIELDS:
        raise ConfigError(
            f"unknown kernel type {ktype!r}; expected one of {sorted(_KERNEL_FIELDS)}"
        )
    extra = set(obj) - _KERNEL_FIELDS[ktype] - {"type"}
    if extra:
        raise ConfigError(f"unknown fields for kernel type {ktype!r}: {sorted(extra)}")
    missing = _KERNEL_FIELDS[ktype] - set(obj)
    if missing:
        raise ConfigError(f"missing fields for kernel type {ktype!r}: {sorted(missing)}")
    if ktype == "constant":
        return Constant(obj["var"])
    if ktype == "piecewise_constant":
        return PiecewiseConstant(obj["var"], obj["boundaries"])
    if ktype == "wiener":
        return Wiener(obj["var"])
    if ktype == "matern12":
        return Matern12(obj["var"], obj["lscale"])
    if ktype == "matern32":
        return Matern32(obj["var"], obj["lscale"])
    if ktype == "linear":
        return Linear(obj["var"])
    return Sum([kernel_from_json(c) for c in obj["children"]])


def kernel_to_json(kernel: Kernel) -> dict:
    return kernel.to_json()
