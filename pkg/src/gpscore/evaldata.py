"""Dataset ingestion, the rolling evaluation protocol, baselines, tuning.

The evaluation protocol is chronological: the first fraction of the records
is the training set, and every test day is predicted using all records
(training and earlier test days) strictly before that day.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from scipy import special

from .errors import ConfigError, DataError
from .inference import FitConfig
from .kernels import kernel_from_json
from .likelihoods import (
    DiscretePrediction,
    GaussianPrediction,
    likelihood_from_json,
)
from .model import Model

__all__ = [
    "MatchRecord",
    "EvalResult",
    "PredictionRecord",
    "ModelTemplate",
    "parse_dataset",
    "chronological_split",
    "rolling_evaluate",
    "elo_baseline",
    "random_baseline",
    "random_search",
    "SECONDS_PER_YEAR",
    "SECONDS_PER_DAY",
]

SECONDS_PER_DAY = 86400.0
SECONDS_PER_YEAR = 365.25 * SECONDS_PER_DAY

_COLUMNS = ["t", "comp_i", "comp_j", "outcome", "points_i", "points_j", "home"]
_REQUIRED = ["t", "comp_i", "comp_j", "outcome"]


@dataclass
class MatchRecord:
    """One timestamped comparison, parsed from a dataset row."""

    time: float                # years
    day: int                   # integer day index (rolling granularity)
    comp_i: str
    comp_j: str
    outcome: int | None = None         # +1 / -1 / 0, from i's perspective
    points_i: int | None = None
    points_j: int | None = None
    home: bool = False
    line: int = 0

    def ordinal_outcome(self) -> int:
        if self.outcome is not None:
            return self.outcome
        if self.points_i is None or self.points_j is None:
            raise DataError(f"record at line {self.line} has neither outcome nor points")
        if self.points_i > self.points_j:
            return 1
        if self.points_i < self.points_j:
            return -1
        return 0


def _parse_time(text: str, line: int) -> float:
    """Timestamp in seconds since the epoch, from ISO-8601 or integer seconds."""
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise DataError(f"line {line}: unparseable timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def parse_dataset(path, schema: dict | None = None,
                  on_error: str = "fail") -> list[MatchRecord]:
    """Read the CSV dataset; returns records sorted by timestamp.

    The header must be ``t,comp_i,comp_j,outcome`` optionally followed by
    ``points_i,points_j,home``.  ``schema`` currently understands
    ``{"ties": false}`` to reject tie outcomes.  ``on_error`` is "fail" or
    "skip"; skipped rows are reported on stderr with their line numbers.
    """
    schema = schema or {}
    unknown = set(schema) - {"ties"}
    if unknown:
        raise ConfigError(f"unknown schema fields: {sorted(unknown)}")
    allow_ties = schema.get("ties", True)
    if on_error not in ("fail", "skip"):
        raise ConfigError("on_error must be 'fail' or 'skip'")

    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        header = [h.strip() for h in header]
        if header[:4] != _REQUIRED or any(h not in _COLUMNS for h in header):
            raise DataError(
                f"bad header {header!r}; expected t,comp_i,comp_j,outcome"
                "[,points_i,points_j,home]")
        idx = {name: i for i, name in enumerate(header)}

        def cell(row, name):
            i = idx.get(name)
            return row[i].strip() if i is not None and i < len(row) else ""

        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                seconds = _parse_time(cell(row, "t"), line)
                comp_i = cell(row, "comp_i")
                comp_j = cell(row, "comp_j")
                if not comp_i or not comp_j:
                    raise DataError(f"line {line}: missing competitor id")
                outcome_text = cell(row, "outcome")
                outcome = None
                if outcome_text:
                    if outcome_text not in ("1", "-1", "0", "+1"):
                        raise DataError(
                            f"line {line}: outcome must be 1, -1 or 0, "
                            f"got {outcome_text!r}")
                    outcome = int(outcome_text)
                    if outcome == 0 and not allow_ties:
                        raise DataError(
                            f"line {line}: tie outcome in a no-tie schema")
                pi_text, pj_text = cell(row, "points_i"), cell(row, "points_j")
                points_i = points_j = None
                if pi_text or pj_text:
                    try:
                        points_i = int(pi_text)
                        points_j = int(pj_text)
                    except ValueError as exc:
                        raise DataError(f"line {line}: bad points pair") from exc
                    if points_i < 0 or points_j < 0:
                        raise DataError(f"line {line}: negative points")
                if outcome is None and points_i is None:
                    raise DataError(f"line {line}: neither outcome nor points")
                if outcome is not None and points_i is not None:
                    implied = (points_i > points_j) - (points_i < points_j)
                    if implied != outcome:
                        raise DataError(
                            f"line {line}: outcome {outcome} contradicts "
                            f"points {points_i}-{points_j}")
                home_text = cell(row, "home")
                home = home_text in ("1", "true", "True")
                rec = MatchRecord(
                    time=seconds / SECONDS_PER_YEAR,
                    day=int(seconds // SECONDS_PER_DAY),
                    comp_i=comp_i, comp_j=comp_j,
                    outcome=outcome, points_i=points_i, points_j=points_j,
                    home=home, line=line)
                if rec.ordinal_outcome() == 0 and not allow_ties:
                    raise DataError(f"line {line}: tie outcome in a no-tie schema")
            except DataError:
                if on_error == "fail":
                    raise
                print(f"skipping malformed row at line {line}", file=sys.stderr)
                continue
            records.append(rec)
    records.sort(key=lambda r: r.time)
    return records


def chronological_split(records, fraction: float = 0.7):
    """First ceil(fraction * N) records for training, the rest for testing."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("fraction must lie in [0, 1]")
    cut = math.ceil(fraction * len(records))
    return records[:cut], records[cut:]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class PredictionRecord:
    index: int
    time: float
    observed: float
    log_loss: float
    correct: float
    probs: dict | None = None

    def to_row(self) -> dict:
        row = {"index": self.index, "time": self.time, "observed": self.observed,
               "log_loss": self.log_loss, "correct": self.correct}
        if self.probs is not None:
            for y, p in self.probs.items():
                row[f"p({y})"] = p
        return row


@dataclass
class EvalResult:
    log_loss: float
    accuracy: float
    n: int
    records: list = field(default_factory=list)

    @classmethod
    def from_records(cls, records) -> "EvalResult":
        n = len(records)
        if n == 0:
            return cls(log_loss=float("nan"), accuracy=float("nan"), n=0)
        ll = sum(r.log_loss for r in records) / n
        acc = sum(r.correct for r in records) / n
        return cls(log_loss=ll, accuracy=acc, n=n, records=list(records))

    def to_json(self) -> dict:
        return {"log_loss": self.log_loss, "accuracy": self.accuracy, "n": self.n}


def _score_discrete(probs: dict, observed) -> tuple[float, float]:
    """(log loss, accuracy credit) for a discrete outcome distribution.

    Exact probability ties at the argmax share the credit equally.
    """
    p = probs.get(observed, 0.0)
    log_loss = -math.log(p) if p > 0 else float("inf")
    best = max(probs.values())
    arg = [y for y, q in probs.items() if q == best]
    correct = (1.0 / len(arg)) if observed in arg else 0.0
    return log_loss, correct


# ---------------------------------------------------------------------------
# model template + rolling protocol
# ---------------------------------------------------------------------------

_TEMPLATE_FIELDS = {"likelihood", "default_kernel", "advantage_kernel",
                    "interaction_kernel", "epoch"}
ADVANTAGE_FEATURE = "advantage"


class ModelTemplate:
    """Recipe for building a model from match records.

    Features are created on demand: one per competitor (with the default
    kernel), optionally a shared advantage feature applied to the side
    flagged ``home``, and optionally a per-pair interaction feature.
    """

    def __init__(self, spec: dict):
        if not isinstance(spec, dict):
            raise ConfigError("model template must be an object")
        extra = set(spec) - _TEMPLATE_FIELDS
        if extra:
            raise ConfigError(f"unknown model template fields: {sorted(extra)}")
        if "likelihood" not in spec or "default_kernel" not in spec:
            raise ConfigError("model template needs 'likelihood' and 'default_kernel'")
        self.spec = spec
        # validate eagerly so config errors surface before any fitting
        likelihood_from_json(spec["likelihood"])
        kernel_from_json(spec["default_kernel"])
        for key in ("advantage_kernel", "interaction_kernel"):
            if spec.get(key) is not None:
                kernel_from_json(spec[key])

    @property
    def likelihood_name(self) -> str:
        return self.spec["likelihood"]["likelihood"]

    def build(self) -> Model:
        model = Model(
            likelihood_from_json(self.spec["likelihood"]),
            epoch=self.spec.get("epoch"),
            default_kernel=kernel_from_json(self.spec["default_kernel"]),
        )
        if self.spec.get("advantage_kernel") is not None:
            model.add_feature(ADVANTAGE_FEATURE,
                              kernel_from_json(self.spec["advantage_kernel"]))
        return model

    def _ensure_features(self, model: Model, rec: MatchRecord) -> None:
        model.ensure_feature(rec.comp_i)
        model.ensure_feature(rec.comp_j)
        if self.spec.get("interaction_kernel") is not None:
            from .model import interaction_feature
            fid, _ = interaction_feature(rec.comp_i, rec.comp_j)
            if fid not in model.features:
                model.add_feature(fid, kernel_from_json(self.spec["interaction_kernel"]))

    def _coeffs(self, rec: MatchRecord) -> dict:
        coeffs = {rec.comp_i: 1.0, rec.comp_j: -1.0}
        if self.spec.get("advantage_kernel") is not None and rec.home:
            coeffs[ADVANTAGE_FEATURE] = 1.0
        if self.spec.get("interaction_kernel") is not None:
            from .model import interaction_feature
            fid, sign = interaction_feature(rec.comp_i, rec.comp_j)
            coeffs[fid] = sign
        return coeffs

    def observations(self, model: Model, rec: MatchRecord):
        """(coeffs, time, outcome) tuples this record contributes."""
        self._ensure_features(model, rec)
        coeffs = self._coeffs(rec)
        name = self.likelihood_name
        if name in ("probit", "logit"):
            y = rec.ordinal_outcome()
            if y == 0:
                raise DataError(
                    f"line {rec.line}: tie outcome needs an ordinal likelihood")
            return [(coeffs, rec.time, y)]
        if name == "ordinal_probit":
            return [(coeffs, rec.time, rec.ordinal_outcome())]
        if rec.points_i is None or rec.points_j is None:
            raise DataError(
                f"line {rec.line}: likelihood {name!r} needs points columns")
        if name == "gaussian":
            return [(coeffs, rec.time, float(rec.points_i - rec.points_j))]
        # poisson: one count observation per side, with the sign flipped
        rev = {fid: -x for fid, x in coeffs.items()}
        return [(coeffs, rec.time, rec.points_i), (rev, rec.time, rec.points_j)]

    def predict_match(self, model: Model, rec: MatchRecord, ties: bool = True):
        """(probs dict, log loss, accuracy credit) for one upcoming match.

        ``ties`` controls whether the win/tie/loss summary of points-based
        likelihoods reserves mass for a tie.
        """
        self._ensure_features(model, rec)
        coeffs = self._coeffs(rec)
        name = self.likelihood_name
        if name in ("probit", "logit", "ordinal_probit"):
            pred = model.predict(coeffs, rec.time)
            probs = pred.probs
            ll, correct = _score_discrete(probs, rec.ordinal_outcome())
            return probs, ll, correct
        if name == "gaussian":
            pred = model.predict(coeffs, rec.time)
            y = float(rec.points_i - rec.points_j)
            ll = -pred.log_prob(y)
            probs = pred.ordinal_probs(ties=ties)
            _, correct = _score_discrete(probs, rec.ordinal_outcome())
            return probs, ll, correct
        # poisson: joint outcome from the two predictive count distributions
        pred_i = model.predict(coeffs, rec.time)
        rev = {fid: -x for fid, x in coeffs.items()}
        pred_j = model.predict(rev, rec.time)
        pi = pred_i.pmf(100)
        pj = pred_j.pmf(100)
        pi = pi / pi.sum()
        pj = pj / pj.sum()
        cum_j = np.cumsum(pj)
        p_win = float(np.sum(pi[1:] * cum_j[:-1]))
        p_tie = float(np.sum(pi * pj))
        probs = {1: p_win, 0: p_tie, -1: max(1.0 - p_win - p_tie, 0.0)}
        ll, correct = _score_discrete(probs, rec.ordinal_outcome())
        return probs, ll, correct


def rolling_evaluate(template: ModelTemplate, records,
                     train_fraction: float = 0.7,
                     granularity_days: int = 1,
                     fit_config: FitConfig | None = None) -> EvalResult:
    """Chronological rolling evaluation.

    Fits on the training fraction, then walks the test records one day
    bucket at a time: predict the bucket, record the metrics, fold the
    bucket into the model, refit (warm-started from the previous sites).
    """
    records = sorted(records, key=lambda r: r.time)
    fit_config = fit_config or FitConfig()
    train, test = chronological_split(records, train_fraction)
    has_ties = any(r.ordinal_outcome() == 0 for r in records)

    model = template.build()
    for rec in train:
        for coeffs, time, y in template.observations(model, rec):
            model.observe(coeffs, time, y)
    if model.observations:
        model.fit(fit_config)

    out = []
    i = 0
    while i < len(test):
        bucket = test[i].day // granularity_days
        j = i
        while j < len(test) and test[j].day // granularity_days == bucket:
            j += 1
        for n in range(i, j):
            rec = test[n]
            probs, ll, correct = template.predict_match(model, rec, ties=has_ties)
            out.append(PredictionRecord(
                index=len(train) + n, time=rec.time,
                observed=rec.ordinal_outcome() if template.likelihood_name != "gaussian"
                else float(rec.points_i - rec.points_j),
                log_loss=ll, correct=correct, probs=probs))
        for n in range(i, j):
            for coeffs, time, y in template.observations(model, test[n]):
                model.observe(coeffs, time, y)
        model.fit(fit_config)
        i = j
    return EvalResult.from_records(out)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _ordinal_probs(d: float, margin: float, base: str) -> dict:
    if base == "probit":
        p_win = float(special.ndtr(d - margin))
        p_loss = float(special.ndtr(-d - margin))
    else:
        p_win = float(special.expit(d - margin))
        p_loss = float(special.expit(-d - margin))
    if margin == 0.0:
        return {1: p_win, -1: p_loss}
    return {1: p_win, 0: max(1.0 - p_win - p_loss, 0.0), -1: p_loss}


def _ordinal_grad(y: int, d: float, margin: float, base: str) -> float:
    """d/dd log p(y | d) for the ordinal outcome model."""
    if base == "probit":
        if y != 0:
            z = y * d - margin
            return y * float(np.exp(-0.5 * z * z - 0.5 * math.log(2 * math.pi)
                                    - special.log_ndtr(z)))
        pa = float(special.ndtr(d - margin))
        pb = float(special.ndtr(-d - margin))
        p0 = max(1.0 - pa - pb, 1e-300)
        phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        return (phi(-d - margin) - phi(d - margin)) / p0
    if y != 0:
        return y * float(special.expit(-(y * d - margin)))
    sa = float(special.expit(d - margin))
    sb = float(special.expit(-d - margin))
    p0 = max(1.0 - sa - sb, 1e-300)
    return (sb * (1 - sb) - sa * (1 - sa)) / p0


def elo_baseline(records, learning_rate: float, base: str = "logit",
                 draw_margin: float = 0.0, train_fraction: float = 0.7,
                 evaluate_on: str = "test") -> EvalResult:
    """Online gradient ratings: before each match, predict; afterwards move
    both scores along the gradient of the outcome's log-probability.

    Metrics are collected over the chosen portion ("test", "train" or
    "all") but the single pass updates on every record.
    """
    if base not in ("logit", "probit"):
        raise ConfigError("elo base must be 'logit' or 'probit'")
    if evaluate_on not in ("test", "train", "all"):
        raise ConfigError("evaluate_on must be 'test', 'train' or 'all'")
    records = sorted(records, key=lambda r: r.time)
    has_ties = any(r.ordinal_outcome() == 0 for r in records)
    if has_ties and draw_margin <= 0.0:
        raise ConfigError("dataset has ties: a positive draw_margin is required")
    cut = math.ceil(train_fraction * len(records))
    scores: dict[str, float] = {}
    out = []
    for n, rec in enumerate(records):
        y = rec.ordinal_outcome()
        d = scores.get(rec.comp_i, 0.0) - scores.get(rec.comp_j, 0.0)
        in_scope = (evaluate_on == "all"
                    or (evaluate_on == "test" and n >= cut)
                    or (evaluate_on == "train" and n < cut))
        if in_scope:
            probs = _ordinal_probs(d, draw_margin, base)
            ll, correct = _score_discrete(probs, y)
            out.append(PredictionRecord(index=n, time=rec.time, observed=y,
                                        log_loss=ll, correct=correct, probs=probs))
        g = _ordinal_grad(y, d, draw_margin, base)
        scores[rec.comp_i] = scores.get(rec.comp_i, 0.0) + learning_rate * g
        scores[rec.comp_j] = scores.get(rec.comp_j, 0.0) - learning_rate * g
    return EvalResult.from_records(out)


def random_baseline(records, train_fraction: float = 0.7,
                    ties: bool | None = None) -> EvalResult:
    """Uniform predictor over the outcome space."""
    records = sorted(records, key=lambda r: r.time)
    if ties is None:
        ties = any(r.ordinal_outcome() == 0 for r in records)
    outcomes = (1, 0, -1) if ties else (1, -1)
    p = 1.0 / len(outcomes)
    probs = {y: p for y in outcomes}
    _, test = chronological_split(records, train_fraction)
    cut = len(records) - len(test)
    out = []
    for n, rec in enumerate(test):
        ll, correct = _score_discrete(probs, rec.ordinal_outcome())
        out.append(PredictionRecord(index=cut + n, time=rec.time,
                                    observed=rec.ordinal_outcome(),
                                    log_loss=ll, correct=correct, probs=probs))
    return EvalResult.from_records(out)


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------

def _resolve(node, rng):
    """Replace {'log_uniform': [lo, hi]} / {'uniform': [lo, hi]} leaves by
    draws, walking the structure in document order."""
    if isinstance(node, dict):
        if set(node) == {"log_uniform"} or set(node) == {"uniform"}:
            mode, bounds = next(iter(node.items()))
            lo, hi = map(float, bounds)
            if not hi > lo:
                raise ConfigError(f"bad sample range {bounds!r}")
            if mode == "log_uniform":
                if lo <= 0:
                    raise ConfigError("log_uniform range must be positive")
                return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            return float(rng.uniform(lo, hi))
        return {k: _resolve(v, rng) for k, v in node.items()}
    if isinstance(node, list):
        return [_resolve(v, rng) for v in node]
    return node


def random_search(space: dict, n_configs: int, seed: int, records,
                  fit_config: FitConfig | None = None) -> list[dict]:
    """Sample configurations, score each on the given (training) records,
    and return them ranked best first.

    Spaces describing a model (key "model") are scored by the log-marginal
    likelihood; Elo spaces (key "baseline": "elo") by the one-pass training
    log loss.  Individual failures are recorded in the result list rather
    than raised.
    """
    if not isinstance(space, dict) or ("model" not in space) == ("baseline" not in space):
        raise ConfigError("search space needs exactly one of 'model' or 'baseline'")
    fit_config = fit_config or FitConfig()
    rng = np.random.default_rng(seed)
    results = []
    for index in range(n_configs):
        config = _resolve(space, rng)
        entry = {"index": index, "config": config, "error": None}
        try:
            if "model" in space:
                template = ModelTemplate(config["model"])
                model = template.build()
                for rec in records:
                    for coeffs, time, y in template.observations(model, rec):
                        model.observe(coeffs, time, y)
                report = model.fit(fit_config)
                entry["metric"] = "log_marginal"
                entry["score"] = report.log_marginals[-1]
                entry["converged"] = report.converged
            else:
                if config["baseline"] != "elo":
                    raise ConfigError(f"unknown baseline {config['baseline']!r}")
                result = elo_baseline(
                    records,
                    learning_rate=config["learning_rate"],
                    base=config.get("base", "logit"),
                    draw_margin=config.get("draw_margin", 0.0),
                    evaluate_on="train")
                entry["metric"] = "train_log_loss"
                entry["score"] = -result.log_loss
                entry["converged"] = True
        except (ConfigError, DataError, FloatingPointError, ValueError) as exc:
            entry["error"] = str(exc)
            entry["metric"] = "failed"
            entry["score"] = -float("inf")
            entry["converged"] = False
        results.append(entry)
    results.sort(key=lambda e: (-e["score"], e["index"]))
    for rank, entry in enumerate(results, start=1):
        entry["rank"] = rank
    return results
