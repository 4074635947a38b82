"""Ensemble verification: CRPS, rank histograms, dispersion and bootstrap intervals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .ensemble import EnsembleForecast, EnsembleSet
from .exceptions import EmptyInput, EmptyLead

METRICS = ("mse", "variance", "crps")
_METRIC_CODES = {name: i for i, name in enumerate(METRICS)}


def crps_ensemble(members, obs):
    """CRPS of the empirical ensemble CDF against an observation.

    Uses the identity ``E|X - o| - 0.5 E|X - X'|`` with expectations over the
    ensemble members (all ordered pairs, self-pairs included), which equals the
    integral of ``(F(z) - H(z - o))**2`` for the empirical step CDF exactly.

    Parameters
    ----------
    members : array of shape (m,) or (n, m)
    obs : float or array of shape (n,)

    Returns
    -------
    float or ndarray of shape (n,)
    """
    x = np.asarray(members, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    o = np.asarray(obs, dtype=np.float64).reshape(-1)
    if o.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} ensembles but {o.shape[0]} observations")
    m = x.shape[1]
    if m < 1:
        raise ValueError("ensembles need at least one member")
    xs = np.sort(x, axis=1)
    abs_err = np.mean(np.abs(xs - o[:, None]), axis=1)
    coef = 2.0 * np.arange(1, m + 1) - m - 1
    spread = 2.0 * (xs @ coef) / (m * m)
    out = abs_err - 0.5 * spread
    return float(out[0]) if squeeze else out


def gaussian_crps(mean, std, obs):
    """Closed-form CRPS of a normal forecast distribution."""
    mean, std, obs = (np.asarray(a, dtype=np.float64) for a in (mean, std, obs))
    z = (obs - mean) / std
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return std * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - 1.0 / math.sqrt(math.pi))


def _as_arrays(forecasts):
    """Accept an EnsembleSet, a list of EnsembleForecast, or ``(members, obs)``."""
    if isinstance(forecasts, EnsembleSet):
        return forecasts.members, forecasts.observations
    if isinstance(forecasts, tuple) and len(forecasts) == 2:
        return np.atleast_2d(np.asarray(forecasts[0], float)), np.asarray(forecasts[1], float).reshape(-1)
    forecasts = list(forecasts)
    if forecasts and isinstance(forecasts[0], EnsembleForecast):
        ens = EnsembleSet.from_forecasts(forecasts)
        return ens.members, ens.observations
    raise TypeError("expected an EnsembleSet, a list of EnsembleForecast or (members, obs)")


def _scored(members, obs):
    return np.isfinite(obs) & np.all(np.isfinite(members), axis=1)


def observation_ranks(members, obs, rng):
    """1-based rank of each observation among its members, ties broken at random."""
    below = np.sum(members < obs[:, None], axis=1)
    ties = np.sum(members == obs[:, None], axis=1)
    return 1 + below + np.floor(rng.random(len(obs)) * (ties + 1)).astype(int)


def rank_histogram(forecasts, seed=0, return_skipped=False):
    """Counts of observation ranks over ``m + 1`` bins.

    Missing observations or ensembles are skipped; pass
    ``return_skipped=True`` to also get how many.
    """
    members, obs = _as_arrays(forecasts)
    m = members.shape[1]
    ok = _scored(members, obs)
    rng = np.random.default_rng(seed)
    ranks = observation_ranks(members[ok], obs[ok], rng)
    counts = np.bincount(ranks - 1, minlength=m + 1)
    if return_skipped:
        return counts, int(np.sum(~ok))
    return counts


def ensemble_variance(members):
    """Unbiased (ddof=1) variance of each ensemble."""
    return np.var(members, axis=1, ddof=1)


def dispersion(forecasts: EnsembleSet):
    """Per lead: ``(MSE of the ensemble mean, mean unbiased ensemble variance)``."""
    ok = _scored(forecasts.members, forecasts.observations)
    out = {}
    for lead in np.unique(forecasts.lead):
        sel = ok & (forecasts.lead == lead)
        if not np.any(sel):
            raise EmptyLead(f"no scored forecasts at lead {lead}")
        mem = forecasts.members[sel]
        err = mem.mean(axis=1) - forecasts.observations[sel]
        out[int(lead)] = (float(np.mean(err * err)), float(np.mean(ensemble_variance(mem))))
    return out


def bootstrap_ci(scores, resamples=1000, level=0.95, seed=0):
    """Percentile bootstrap interval for the mean of ``scores``.

    Returns ``(low, mean, high)`` where ``mean`` is the plain sample mean.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = scores.size
    if n == 0:
        raise EmptyInput("bootstrap_ci needs at least one score")
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    means = np.empty(resamples)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, resamples, chunk):
        k = min(chunk, resamples - start)
        idx = rng.integers(0, n, size=(k, n))
        means[start : start + k] = scores[idx].mean(axis=1)
    alpha = 1.0 - level
    low, high = np.quantile(means, [alpha / 2.0, 1.0 - alpha / 2.0])
    mean = float(scores.mean())
    # rounding in the resample means can nudge the bounds past a degenerate mean
    return min(float(low), mean), mean, max(float(high), mean)


@dataclass
class VerificationReport:
    """Per-lead bootstrap summaries plus a pooled rank histogram.

    ``metrics[name]`` is an array of shape (n_leads, 3) holding (low, mean, high)
    for each entry of ``leads``.
    """

    leads: np.ndarray
    metrics: dict
    rank_counts: np.ndarray
    n_scored: int
    n_skipped: int = 0
    method: str = ""
    resamples: int = 1000
    level: float = 0.95

    @property
    def m(self):
        return len(self.rank_counts) - 1

    @property
    def rank_frequencies(self):
        total = self.rank_counts.sum()
        return self.rank_counts / total if total else self.rank_counts.astype(float)

    def mean_over_leads(self, metric):
        """Average of the per-lead means, weighting every lead equally."""
        return float(np.mean(self.metrics[metric][:, 1]))

    def rows(self):
        for i, lead in enumerate(self.leads):
            for name in METRICS:
                low, mean, high = self.metrics[name][i]
                yield int(lead), name, low, mean, high


def build_report(forecasts: EnsembleSet, resamples=1000, seed=0, level=0.95) -> VerificationReport:
    """Aggregate verification per lead, pooling stations and days.

    Input order does not matter: rows are sorted canonically before scoring,
    and every (lead, metric) bootstrap draws from its own seeded stream.
    """
    if not isinstance(forecasts, EnsembleSet):
        forecasts = EnsembleSet.from_forecasts(forecasts)
    if len(forecasts) == 0:
        raise EmptyInput("no forecasts to verify")
    ens = forecasts.sorted()
    ok = _scored(ens.members, ens.observations)
    if not np.any(ok):
        raise EmptyInput("no forecast has both an ensemble and an observation")
    counts = rank_histogram(ens.take(ok), seed=np.random.SeedSequence([seed, 2**31]))
    leads = np.unique(ens.lead[ok])
    metrics = {name: np.empty((len(leads), 3)) for name in METRICS}
    crps = np.full(len(ens), np.nan)
    crps[ok] = crps_ensemble(ens.members[ok], ens.observations[ok])
    for i, lead in enumerate(leads):
        sel = ok & (ens.lead == lead)
        mem = ens.members[sel]
        err = mem.mean(axis=1) - ens.observations[sel]
        scores = {
            "mse": err * err,
            "variance": ensemble_variance(mem) if mem.shape[1] > 1 else np.zeros(len(mem)),
            "crps": crps[sel],
        }
        for name in METRICS:
            rng_seed = np.random.SeedSequence([seed, int(lead), _METRIC_CODES[name]])
            metrics[name][i] = bootstrap_ci(scores[name], resamples, level, np.random.default_rng(rng_seed))
    return VerificationReport(
        leads, metrics, counts, int(ok.sum()), int((~ok).sum()), ens.method, resamples, level
    )


def _fmt(x):
    return repr(float(x))


def write_report(report: VerificationReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lead", "metric", "low", "mean", "high"])
        for lead, name, low, mean, high in report.rows():
            w.writerow([lead, name, _fmt(low), _fmt(mean), _fmt(high)])
    return Path(path)


def write_rank_histogram(report: VerificationReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "count", "frequency"])
        for b, (c, f) in enumerate(zip(report.rank_counts, report.rank_frequencies), start=1):
            w.writerow([b, int(c), _fmt(f)])
    return Path(path)


def plot_report(report: VerificationReport, prefix):
    """SVG figures: dispersion and CRPS per lead, and the rank histogram."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    prefix = Path(prefix)
    meta = {"Date": None}
    paths = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    mse = report.metrics["mse"]
    ax.plot(report.leads, mse[:, 1], "-", label="MSE of ensemble mean")
    ax.fill_between(report.leads, mse[:, 0], mse[:, 2], color="tab:red", alpha=0.3)
    ax.plot(report.leads, report.metrics["variance"][:, 1], "--", label="mean ensemble variance")
    ax.set_xlabel("lead")
    ax.legend()
    paths.append(prefix.with_name(prefix.name + "_dispersion.svg"))
    fig.savefig(paths[-1], metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    crps = report.metrics["crps"]
    ax.plot(report.leads, crps[:, 1], "-", label="CRPS")
    ax.fill_between(report.leads, crps[:, 0], crps[:, 2], alpha=0.3)
    ax.set_xlabel("lead")
    ax.legend()
    paths.append(prefix.with_name(prefix.name + "_crps.svg"))
    fig.savefig(paths[-1], metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    bins = np.arange(1, report.m + 2)
    ax.bar(bins, report.rank_frequencies)
    ax.axhline(1.0 / (report.m + 1), color="k", lw=0.8)
    ax.set_xlabel("rank")
    paths.append(prefix.with_name(prefix.name + "_rank_histogram.svg"))
    fig.savefig(paths[-1], metadata=meta)
    plt.close(fig)
    return paths
