"""Public model: declare features, record comparisons, fit, predict.

An observation stores the folded coefficient vector of the two opponents
(x = x_i - x_j) as a sparse map from feature id to coefficient, so a plain
win of i over j is ``{i: +1, j: -1}`` and contextual effects (home
advantage, pair interactions) are extra entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import inference
from .errors import ConfigError, DataError, NotFittedError
from .kernels import Kernel, kernel_from_json
from .likelihoods import Likelihood, gauss_hermite, likelihood_from_json
from .statespace import FeatureChain

__all__ = ["Model", "Observation", "match_coeffs", "interaction_feature"]

SNAPSHOT_VERSION = 1


@dataclass
class Observation:
    coeffs: dict
    time: float
    outcome: float


@dataclass
class _Feature:
    index: int
    kernel: Kernel
    times: list = field(default_factory=list)
    chain: FeatureChain | None = None
    spec: object = None


def interaction_feature(i: str, j: str) -> tuple[str, float]:
    """Canonical pair-interaction feature id and its sign for opponents (i, j).

    The feature is shared by both orderings of the pair; the sign flips so
    the interaction enters the score difference antisymmetrically.
    """
    if i == j:
        raise ValueError("interaction feature needs two distinct opponents")
    lo, hi = sorted((i, j))
    return f"{lo}|{hi}", 1.0 if i == lo else -1.0


def match_coeffs(i: str, j: str, advantage: str | None = None,
                 interaction: bool = False) -> dict:
    """Folded coefficients for a match of ``i`` against ``j``.

    ``advantage`` names a feature added on i's side (home court, first
    move).  With ``interaction`` a canonical pair feature is included, so
    the score difference becomes s_i - s_j + s_ij.
    """
    coeffs = {i: 1.0, j: -1.0}
    if advantage is not None:
        coeffs[advantage] = coeffs.get(advantage, 0.0) + 1.0
    if interaction:
        fid, sign = interaction_feature(i, j)
        coeffs[fid] = coeffs.get(fid, 0.0) + sign
    return coeffs


def _fold(coeffs: dict) -> dict:
    folded = {}
    for fid, x in coeffs.items():
        x = float(x)
        if not np.isfinite(x):
            raise DataError(f"coefficient for {fid!r} is not finite")
        folded[fid] = folded.get(fid, 0.0) + x
    return {fid: x for fid, x in folded.items() if x != 0.0}


class Model:
    """Skill curves over declared features plus an outcome model.

    Observations must arrive in chronological order (use
    :meth:`observe_all` to sort a batch first).  Fitting is incremental:
    appending observations and refitting warm-starts from the previous
    pseudo-observation parameters.
    """

    def __init__(self, likelihood: Likelihood, epoch: float | None = None,
                 default_kernel: Kernel | None = None):
        self.likelihood = likelihood
        self.epoch = epoch
        self.default_kernel = default_kernel
        self.features: dict[str, _Feature] = {}
        self.observations: list[Observation] = []
        self._inc_feat: list[int] = []
        self._inc_coeff: list[float] = []
        self._inc_node: list[int] = []
        self._obs_ptr: list[int] = [0]
        self._prob = None
        self._compiled_nobs = -1
        self._report = None

    # -- construction ------------------------------------------------------

    def add_feature(self, fid: str, kernel: Kernel | None = None) -> None:
        if fid in self.features:
            raise ValueError(f"feature {fid!r} already declared")
        kernel = kernel if kernel is not None else self.default_kernel
        if kernel is None:
            raise ConfigError(f"no kernel given for feature {fid!r} "
                              "and the model has no default kernel")
        self.features[fid] = _Feature(index=len(self.features), kernel=kernel)

    def ensure_feature(self, fid: str) -> None:
        """Register ``fid`` with the default kernel if it is new."""
        if fid not in self.features:
            self.add_feature(fid)

    def observe(self, coeffs: dict, time: float, outcome) -> None:
        time = float(time)
        if not np.isfinite(time):
            raise DataError(f"observation time must be finite, got {time!r}")
        if self.observations and time < self.observations[-1].time:
            raise DataError(
                f"observation at {time} predates the last one at "
                f"{self.observations[-1].time}; feed data chronologically "
                "or use observe_all()")
        folded = _fold(coeffs)
        if not folded:
            raise DataError("observation touches no features after folding")
        for fid in folded:
            if fid not in self.features:
                raise KeyError(f"unknown feature {fid!r}")
        self.likelihood.validate_outcome(outcome)
        items = sorted(folded.items(), key=lambda kv: self.features[kv[0]].index)
        for fid, x in items:
            feat = self.features[fid]
            self._inc_feat.append(feat.index)
            self._inc_coeff.append(x)
            self._inc_node.append(len(feat.times))
            feat.times.append(time)
        self._obs_ptr.append(len(self._inc_feat))
        self.observations.append(Observation(folded, time, outcome))

    def observe_all(self, records) -> None:
        """Bulk insertion: sorts by time (stable), then observes each."""
        for coeffs, time, outcome in sorted(records, key=lambda r: r[1]):
            self.observe(coeffs, time, outcome)

    # -- fitting -----------------------------------------------------------

    def _resolved_epoch(self) -> float:
        if self.epoch is not None:
            return float(self.epoch)
        if self.observations:
            return self.observations[0].time
        return 0.0

    def _compile(self, gh_order=None) -> inference.PackedProblem:
        gh_order = gh_order or inference.DEFAULT_GH_ORDER
        if self._prob is not None and self._compiled_nobs == len(self.observations):
            if self._prob.gh_order != gh_order:
                self._prob.gh_order = gh_order
                x, wn = gauss_hermite(gh_order)
                self._prob.ghx, self._prob.ghwn = x, wn
                self._prob.ghlw = np.log(wn)
            return self._prob

        feats = sorted(self.features.values(), key=lambda f: f.index)
        counts = [len(f.times) for f in feats]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        nnz = int(offsets[-1])
        alpha = np.zeros(nnz)
        beta = np.zeros(nnz)
        mu = np.zeros(nnz)
        var = np.zeros(nnz)
        # warm start: carry over the sites of nodes that already existed
        # (covers both refits after new observations and loaded snapshots)
        for feat in feats:
            if feat.chain is not None:
                old = len(feat.chain.times)
                sl = slice(offsets[feat.index], offsets[feat.index] + old)
                alpha[sl] = feat.chain.alpha
                beta[sl] = feat.chain.beta

        epoch = self._resolved_epoch()
        chains = []
        for feat in feats:
            feat.spec = feat.kernel.to_state_space(epoch)
            sl = slice(offsets[feat.index], offsets[feat.index + 1])
            feat.chain = FeatureChain(
                feat.spec, np.asarray(feat.times, dtype=float),
                alpha=alpha[sl], beta=beta[sl],
                mu_out=mu[sl], var_out=var[sl])
            chains.append(feat.chain)

        inc_feat = np.asarray(self._inc_feat, dtype=np.int64)
        inc_node = offsets[inc_feat] + np.asarray(self._inc_node, dtype=np.int64)
        obs_ptr = np.asarray(self._obs_ptr, dtype=np.int64)
        maxw = int(np.max(np.diff(obs_ptr))) if len(self.observations) else 1
        y = np.asarray([o.outcome for o in self.observations], dtype=float)

        self._prob = inference.PackedProblem(
            obs_ptr=obs_ptr,
            inc_node=inc_node,
            inc_coeff=np.asarray(self._inc_coeff, dtype=float),
            y=y,
            alpha=alpha, beta=beta, mu=mu, var=var,
            chains=chains,
            lik_code=self.likelihood.nb_code,
            lik_param=float(self.likelihood.nb_param),
            maxw=maxw,
            gh_order=gh_order,
        )
        self._compiled_nobs = len(self.observations)
        return self._prob

    def fit(self, config: inference.FitConfig | None = None,
            **overrides) -> inference.FitReport:
        if overrides:
            base = config or inference.FitConfig()
            config = inference.FitConfig(**{**base.__dict__, **overrides})
        return inference.fit(self, config)

    def log_marginal(self) -> float:
        return inference.log_marginal(self)

    @property
    def report(self) -> inference.FitReport:
        if self._report is None:
            raise NotFittedError("model has not been fitted")
        return self._report

    # -- queries -----------------------------------------------------------

    def _feature_posterior(self, fid: str, t: float) -> tuple[float, float]:
        feat = self.features[fid]
        if feat.chain is not None:
            return feat.chain.posterior_at(t)
        if feat.spec is None:
            feat.spec = feat.kernel.to_state_space(self._resolved_epoch())
        return 0.0, feat.spec.prior_var(t)

    def score_marginal(self, coeffs: dict, at: float) -> tuple[float, float]:
        """Posterior mean and variance of the score difference at a time."""
        folded = _fold(coeffs)
        for fid in folded:
            if fid not in self.features:
                raise KeyError(f"unknown feature {fid!r}")
        mu = 0.0
        var = 0.0
        for fid, x in folded.items():
            m, v = self._feature_posterior(fid, float(at))
            mu += x * m
            var += x * x * v
        return mu, var

    def predict(self, coeffs: dict, at: float):
        """Outcome distribution for a matchup at a (possibly new) time."""
        mu, var = self.score_marginal(coeffs, at)
        return self.likelihood.predictive(mu, var)

    def trajectory(self, fid: str, grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Posterior skill curve on a time grid: (times, means, stds)."""
        if fid not in self.features:
            raise KeyError(f"unknown feature {fid!r}")
        grid = np.asarray(grid, dtype=float)
        means = np.empty(len(grid))
        stds = np.empty(len(grid))
        for i, t in enumerate(grid):
            m, v = self._feature_posterior(fid, float(t))
            means[i] = m
            stds[i] = np.sqrt(max(v, 0.0))
        return grid, means, stds

    # -- serialization -------------------------------------------------------

    _SPEC_FIELDS = {"likelihood", "features", "epoch", "default_kernel"}

    @classmethod
    def from_spec(cls, spec: dict) -> "Model":
        """Build an unfitted model from its JSON description."""
        if not isinstance(spec, dict):
            raise ConfigError("model spec must be an object")
        extra = set(spec) - cls._SPEC_FIELDS
        if extra:
            raise ConfigError(f"unknown model spec fields: {sorted(extra)}")
        if "likelihood" not in spec:
            raise ConfigError("model spec is missing 'likelihood'")
        likelihood = likelihood_from_json(spec["likelihood"])
        default = spec.get("default_kernel")
        model = cls(
            likelihood,
            epoch=spec.get("epoch"),
            default_kernel=kernel_from_json(default) if default else None,
        )
        for entry in spec.get("features", []):
            if not isinstance(entry, dict) or set(entry) - {"id", "kernel"}:
                raise ConfigError(f"bad feature entry: {entry!r}")
            if "id" not in entry:
                raise ConfigError("feature entry is missing 'id'")
            kern = kernel_from_json(entry["kernel"]) if "kernel" in entry else None
            model.add_feature(entry["id"], kern)
        return model

    def spec_json(self) -> dict:
        spec = {"likelihood": self.likelihood.to_json()}
        if self.epoch is not None:
            spec["epoch"] = self.epoch
        if self.default_kernel is not None:
            spec["default_kernel"] = self.default_kernel.to_json()
        spec["features"] = [
            {"id": fid, "kernel": feat.kernel.to_json()}
            for fid, feat in self.features.items()
        ]
        return spec

    def snapshot(self) -> dict:
        """Everything needed to re-smooth and predict deterministically."""
        self._compile()
        snap = {
            "format_version": SNAPSHOT_VERSION,
            "epoch": self._resolved_epoch(),
            "likelihood": self.likelihood.to_json(),
            "features": [],
        }
        for fid, feat in self.features.items():
            chain = feat.chain
            snap["features"].append({
                "id": fid,
                "kernel": feat.kernel.to_json(),
                "times": chain.times.tolist() if chain is not None else [],
                "alpha": chain.alpha.tolist() if chain is not None else [],
                "beta": chain.beta.tolist() if chain is not None else [],
            })
        return snap

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.snapshot(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Model":
        with open(path) as fh:
            snap = json.load(fh)
        if not isinstance(snap, dict) or snap.get("format_version") != SNAPSHOT_VERSION:
            raise ConfigError("unrecognized snapshot format")
        model = cls(likelihood_from_json(snap["likelihood"]),
                    epoch=snap.get("epoch"))
        for entry in snap["features"]:
            kernel = kernel_from_json(entry["kernel"])
            model.add_feature(entry["id"], kernel)
            feat = model.features[entry["id"]]
            feat.times = [float(t) for t in entry["times"]]
            feat.spec = kernel.to_state_space(model._resolved_epoch())
            feat.chain = FeatureChain(
                feat.spec, np.asarray(feat.times, dtype=float),
                alpha=np.asarray(entry["alpha"], dtype=float),
                beta=np.asarray(entry["beta"], dtype=float))
            feat.chain.smooth()
        return model
