"""Synthetic match generators with known ground-truth skill curves.

Skills follow exact mean-reverting (exponential-covariance) paths plus an
optional constant offset; outcomes are drawn from the requested likelihood.
Useful for calibration tests, demos and benchmarks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import special

from .evaldata import SECONDS_PER_DAY, SECONDS_PER_YEAR, MatchRecord

__all__ = ["SimulatedMatches", "simulate_matches", "write_dataset_csv"]


@dataclass
class SimulatedMatches:
    records: list
    players: list
    probe_times: np.ndarray       # years
    true_skills: np.ndarray       # (len(probe_times), n_players)
    start_year: float


def _ou_step(rng, cur, dt, var, lscale):
    a = np.exp(-dt / lscale)
    return a * cur + rng.normal(0.0, np.sqrt(var * (1.0 - a * a)), size=cur.shape)


def simulate_matches(n_players: int, n_matches: int, *,
                     dyn_var: float = 0.7, lscale: float = 2.0,
                     const_var: float = 0.0,
                     span_years: float = 6.0,
                     likelihood: str = "probit",
                     draw_margin: float = 0.4,
                     obs_noise: float = 1.0,
                     points_base: int = 100,
                     seed: int = 0,
                     n_probes: int = 10,
                     start_year: float = 2000.0) -> SimulatedMatches:
    """Simulate a league with mean-reverting skills.

    Outcomes per ``likelihood``: "probit"/"logit" give win/loss, "ordinal"
    adds ties with the given margin, "gaussian" produces points whose
    difference is the score difference plus noise, "poisson" produces
    points with rates exp(+-d).
    """
    rng = np.random.default_rng(seed)
    players = [f"p{i:03d}" for i in range(n_players)]
    offsets = (rng.normal(0.0, np.sqrt(const_var), n_players)
               if const_var > 0 else np.zeros(n_players))

    rel_times = np.sort(rng.uniform(0.0, span_years, n_matches))
    probe_times = np.linspace(0.05 * span_years, 0.95 * span_years, n_probes)
    # simulate the dynamic component exactly on the merged time grid
    merged = np.concatenate([rel_times, probe_times])
    order = np.argsort(merged, kind="stable")
    cur = rng.normal(0.0, np.sqrt(dyn_var), n_players)
    tprev = 0.0
    skills_at = np.empty((len(merged), n_players))
    for pos in order:
        cur = _ou_step(rng, cur, merged[pos] - tprev, dyn_var, lscale)
        tprev = merged[pos]
        skills_at[pos] = cur + offsets

    start_seconds = start_year * SECONDS_PER_YEAR
    records = []
    for n in range(n_matches):
        i = int(rng.integers(n_players))
        j = int(rng.integers(n_players - 1))
        if j >= i:
            j += 1
        d = skills_at[n, i] - skills_at[n, j]
        seconds = start_seconds + rel_times[n] * SECONDS_PER_YEAR
        rec = MatchRecord(
            time=seconds / SECONDS_PER_YEAR,
            day=int(seconds // SECONDS_PER_DAY),
            comp_i=players[i], comp_j=players[j], line=n + 2)
        if likelihood in ("probit", "logit"):
            if likelihood == "probit":
                p = float(special.ndtr(d))
            else:
                p = float(special.expit(d))
            rec.outcome = 1 if rng.random() < p else -1
        elif likelihood == "ordinal":
            p_win = float(special.ndtr(d - draw_margin))
            p_loss = float(special.ndtr(-d - draw_margin))
            u = rng.random()
            rec.outcome = 1 if u < p_win else (-1 if u < p_win + p_loss else 0)
        elif likelihood == "gaussian":
            diff = int(round(d + rng.normal(0.0, np.sqrt(obs_noise))))
            base = int(points_base + rng.integers(-5, 6))
            rec.points_j = max(base, 0)
            rec.points_i = max(base + diff, 0)
            rec.outcome = (rec.points_i > rec.points_j) - (rec.points_i < rec.points_j)
        elif likelihood == "poisson":
            rec.points_i = int(rng.poisson(np.exp(d)))
            rec.points_j = int(rng.poisson(np.exp(-d)))
            rec.outcome = (rec.points_i > rec.points_j) - (rec.points_i < rec.points_j)
        else:
            raise ValueError(f"unknown likelihood {likelihood!r}")
        records.append(rec)

    probe_skills = skills_at[n_matches:]
    return SimulatedMatches(records=records, players=players,
                            probe_times=probe_times + start_year,
                            true_skills=probe_skills,
                            start_year=start_year)


def write_dataset_csv(records, path, points: bool = False) -> None:
    """Write records in the standard dataset layout."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["t", "comp_i", "comp_j", "outcome"]
        if points:
            header += ["points_i", "points_j", "home"]
        writer.writerow(header)
        for rec in records:
            seconds = int(round(rec.time * SECONDS_PER_YEAR))
            row = [seconds, rec.comp_i, rec.comp_j,
                   "" if rec.outcome is None else rec.outcome]
            if points:
                row += [rec.points_i if rec.points_i is not None else "",
                        rec.points_j if rec.points_j is not None else "",
                        int(rec.home)]
            writer.writerow(row)
