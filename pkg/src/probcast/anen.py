"""Analog Ensemble.

For each test forecast, every training day at the same station and lead time is
scored with the weighted analog metric

    d(F, A) = sum_i  w_i / sigma_i * sqrt( sum_{j=-k..k} (F_{i,t+j} - A_{i,t+j})**2 )

where ``sigma_i`` is the standard deviation of past forecasts of variable ``i``
at that station and lead. The ``m`` closest days donate their verifying
observations as ensemble members.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_archive, check_positive_int
from .dataset import TWO_PI, VARIABLES, ForecastArchive, population_moments
from .ensemble import EnsembleForecast, EnsembleSet
from .exceptions import AllVariancesZero, DimensionMismatch, NotEnoughCandidates

logger = logging.getLogger(__name__)

@dataclass(frozen=True)
class AnalogConfig:
    weights: tuple = (1.0, 1.0, 1.0, 1.0)
    window: int = 1
    m: int = 21
    predictand: str = "Ws"
    circular_direction: bool = False

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if any(not math.isfinite(x) or x < 0 for x in w) or sum(w) <= 0:
            raise ValueError(f"weights must be finite, >= 0 and not all zero: {self.weights}")
        object.__setattr__(self, "weights", w)
        check_positive_int(self.window, "window", minimum=0)
        check_positive_int(self.m, "m")


@dataclass(frozen=True, eq=False)
class ForecastStds:
    """Forecast standard deviations, shape (n_vars, n_stations, n_leads).

    Excluded leads hold NaN.
    """

    std: np.ndarray
    variables: tuple = VARIABLES


def forecast_stds(train: ForecastArchive) -> ForecastStds:
    """Population std of past forecasts per (variable, station, lead)."""
    train = check_archive(train)
    if train.n_days < 2:
        raise ValueError("forecast_stds needs at least 2 training days")
    _, std = population_moments(train.forecasts, axis=1)  # (S, L, V)
    std = np.transpose(std, (2, 0, 1)).copy()
    std[:, :, sorted(train.excluded_leads)] = np.nan
    return ForecastStds(std, train.variables)


def lead_window(lead, half_width, n_leads, excluded=()):
    """Lead indices entering the metric around ``lead``.

    Offsets falling outside the archive or on excluded leads are dropped. The
    same truncation applies to both windows being compared.
    """
    return np.array(
        [
            lead + j
            for j in range(-half_width, half_width + 1)
            if 0 <= lead + j < n_leads and (lead + j) not in excluded
        ],
        dtype=int,
    )


def _coefficients(cfg, stds, station, leads):
    """Weight / sigma per (lead, variable); zero where sigma is zero or weight is zero."""
    weights = np.asarray(cfg.weights)
    if len(weights) != stds.std.shape[0]:
        raise DimensionMismatch(f"{len(weights)} weights for {stds.std.shape[0]} variables")
    sigma = stds.std[:, station, leads].T  # (La, V)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where((sigma > 0) & (weights > 0), weights / sigma, 0.0)
    return coef


def analog_distance(test_window, candidate_window, cfg: AnalogConfig, stds: ForecastStds, station, lead):
    """Weighted analog metric between two aligned forecast windows.

    Parameters
    ----------
    test_window, candidate_window : array of shape (window_length, n_vars)
        Forecasts over the same lead offsets, already truncated identically.
    """
    a = np.atleast_2d(np.asarray(test_window, dtype=float))
    b = np.atleast_2d(np.asarray(candidate_window, dtype=float))
    if a.shape != b.shape:
        raise DimensionMismatch(f"window shapes differ: {a.shape} vs {b.shape}")
    coef = _coefficients(cfg, stds, station, [lead])[0]
    if not np.any(coef > 0):
        raise AllVariancesZero(f"every weighted variable has zero spread at station {station}, lead {lead}")
    diff = a - b
    if cfg.circular_direction and "Wd" in stds.variables:
        k = stds.variables.index("Wd")
        d = np.abs(diff[:, k])
        diff[:, k] = np.minimum(d, TWO_PI - d)
    used = coef > 0
    return float(np.sqrt(np.sum(diff[:, used] ** 2, axis=0)) @ coef[used])


def _windows(fc_station, leads, half_width, n_leads, excluded):
    """Gather forecast windows for several target leads.

    Returns values of shape (days, len(leads), 2k+1, V) with dropped offsets
    zero-filled, so they contribute nothing to either side of a difference.
    """
    offsets = np.arange(-half_width, half_width + 1)
    idx = leads[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < n_leads)
    if excluded:
        valid &= ~np.isin(idx, list(excluded))
    gathered = fc_station[:, np.clip(idx, 0, n_leads - 1), :]
    return np.where(valid[None, :, :, None], gathered, 0.0)


@njit(cache=True)
def _scan(test_win, cand_win, coef, valid, circ_k, m):
    """Linear scan of every candidate for every (test, lead).

    test_win (T, La, W, V); cand_win (La, D, W, V); coef (La, V); valid (La, D).
    Returns the ``m`` best candidate indices and distances per (test, lead),
    ordered by (distance, index), and the number of usable candidates.
    """
    T, La, W, V = test_win.shape
    D = cand_win.shape[1]
    order = np.full((T, La, m), -1, np.int64)
    best = np.full((T, La, m), np.inf)
    n_valid = np.zeros((T, La), np.int64)
    row = np.empty(D)
    for t in range(T):
        for l in range(La):
            count = 0
            for d in range(D):
                total = np.inf
                if valid[l, d]:
                    total = 0.0
                    for v in range(V):
                        c = coef[l, v]
                        if c == 0.0:
                            continue
                        ss = 0.0
                        for w in range(W):
                            diff = test_win[t, l, w, v] - cand_win[l, d, w, v]
                            if v == circ_k:
                                diff = abs(diff)
                                diff = min(diff, TWO_PI - diff)
                            ss += diff * diff
                        total += c * np.sqrt(ss)
                    if np.isfinite(total):
                        count += 1
                    else:
                        total = np.inf
                row[d] = total
            n_valid[t, l] = count
            k = min(m, D)
            thr = np.partition(row, k - 1)[k - 1]
            picked = np.empty(k, np.int64)
            n = 0
            for d in range(D):
                if row[d] < thr:
                    picked[n] = d
                    n += 1
            for d in range(D):
                if n >= k:
                    break
                if row[d] == thr:
                    picked[n] = d
                    n += 1
            # picked is ascending in index, so a stable sort keeps the tie rule
            sub = np.argsort(row[picked], kind="mergesort")
            for j in range(k):
                order[t, l, j] = picked[sub[j]]
                best[t, l, j] = row[picked[sub[j]]]
    return order, best, n_valid


def _search(test_fc, cand_fc, leads, cfg, coef, valid, n_leads, excluded, circ_k):
    """Window both sides and run the scan. ``test_fc`` (T, L, V), ``cand_fc`` (D, L, V)."""
    used = np.flatnonzero(np.any(coef > 0, axis=0))
    tw = _windows(test_fc, leads, cfg.window, n_leads, excluded)[..., used]
    cw = _windows(cand_fc, leads, cfg.window, n_leads, excluded)[..., used]
    cw = np.ascontiguousarray(np.transpose(cw, (1, 0, 2, 3)))
    circ = int(np.flatnonzero(used == circ_k)[0]) if circ_k is not None and circ_k in used else -1
    return _scan(
        np.ascontiguousarray(tw), cw, np.ascontiguousarray(coef[:, used]), np.ascontiguousarray(valid), circ, cfg.m
    )


def analog_indices(train: ForecastArchive, test_forecast, station, lead, cfg: AnalogConfig, stds: ForecastStds):
    """Training-day indices and distances of the ``cfg.m`` best analogs.

    ``test_forecast`` is the test day's full forecast row for the station,
    shape (n_leads, n_vars). Ties go to the earlier training day.
    """
    test_forecast = np.asarray(test_forecast, dtype=float)
    if test_forecast.shape != (train.n_leads, len(train.variables)):
        raise DimensionMismatch(f"test forecast shape {test_forecast.shape}")
    leads = np.array([lead])
    coef = _coefficients(cfg, stds, station, leads)
    if not np.any(coef > 0):
        raise AllVariancesZero(f"every weighted variable has zero spread at station {station}, lead {lead}")
    circ = train.var_index("Wd") if cfg.circular_direction and "Wd" in train.variables else None
    valid = np.isfinite(train.observations[station, :, lead, train.var_index(cfg.predictand)])[None, :]
    order, d, n_valid = _search(
        test_forecast[None], train.forecasts[station], leads, cfg, coef, valid, train.n_leads, train.excluded_leads, circ
    )
    if n_valid[0, 0] < cfg.m:
        raise NotEnoughCandidates(int(n_valid[0, 0]), cfg.m)
    order, d = order[0, 0], d[0, 0]
    return order, d


def select_analogs(train, test_forecast, station, lead, cfg: AnalogConfig, stds: ForecastStds, day=-1):
    """Ensemble of the verifying observations of the ``m`` best analogs, closest first."""
    order, _ = analog_indices(train, test_forecast, station, lead, cfg, stds)
    k = train.var_index(cfg.predictand)
    members = train.observations[station, order, lead, k]
    return EnsembleForecast(station, day, lead, cfg.predictand, members)


def anen_forecast(train: ForecastArchive, test: ForecastArchive, cfg: AnalogConfig, stds=None) -> EnsembleSet:
    """Analog ensembles for every (station, test day, non-excluded lead).

    Cells that cannot be forecast (too few candidates, no usable variance) come
    back as all-NaN members and are counted in a log message.
    """
    train = check_archive(train)
    test = check_archive(test)
    if test.variables != train.variables or test.n_leads != train.n_leads or test.n_stations != train.n_stations:
        raise DimensionMismatch("train and test archives must share stations, leads and variables")
    if stds is None:
        stds = forecast_stds(train)
    leads = test.active_leads
    k = train.var_index(cfg.predictand)
    circ = train.var_index("Wd") if cfg.circular_direction and "Wd" in train.variables else None
    excl = train.excluded_leads
    S, T, La = test.n_stations, test.n_days, len(leads)
    members = np.full((S, T, La, cfg.m), np.nan)
    partial_sigma = 0
    n_failed = 0
    for s in range(S):
        coef = _coefficients(cfg, stds, s, leads)
        ok_lead = np.any(coef > 0, axis=1)
        partial_sigma += int(np.sum(ok_lead & np.any((coef == 0) & (np.asarray(cfg.weights) > 0), axis=1)))
        if not np.any(ok_lead):
            n_failed += T * La
            continue
        valid = np.isfinite(train.observations[s][:, leads, k]).T & ok_lead[:, None]  # (La, D)
        order, _, n_valid = _search(
            test.forecasts[s], train.forecasts[s], leads, cfg, coef, valid, train.n_leads, excl, circ
        )
        obs = train.observations[s][:, leads, k].T  # (La, D)
        got = np.take_along_axis(np.broadcast_to(obs, (T,) + obs.shape), np.maximum(order, 0), axis=-1)
        good = n_valid >= cfg.m
        members[s][good] = got[good]
        n_failed += int(np.sum(~good))
    if partial_sigma:
        logger.info("%d (station, lead) slots ignored a zero-spread weighted variable", partial_sigma)
    if n_failed:
        logger.warning("%d analog ensembles missing (too few candidates or zero spread)", n_failed)
    station, day, lead = np.meshgrid(np.arange(S), np.arange(T), leads, indexing="ij")
    obs = test.observations[:, :, leads, k]
    return EnsembleSet(
        station.ravel(),
        day.ravel() + test.first_day,
        lead.ravel(),
        members.reshape(-1, cfg.m),
        obs.ravel(),
        cfg.predictand,
        "anen",
    )


class AnalogEnsemble(BaseEstimator):
    """Analog Ensemble post-processor.

    Parameters
    ----------
    weights : sequence of float, default (1, 1, 1, 1)
        Per-predictor weights, in the archive's variable order.
    window : int, default 1
        Half-width of the lead-time window entering the metric.
    n_members : int, default 21
        Ensemble size.
    predictand : str, default "Ws"
        Variable whose analog observations form the ensemble.
    circular_direction : bool, default False
        Use the circular difference min(|d|, 2*pi - |d|) for wind direction
        instead of the raw radian difference.

    Attributes
    ----------
    archive_ : ForecastArchive
        The search corpus (kept in memory in full).
    stds_ : ForecastStds
    """

    def __init__(self, weights=(1.0, 1.0, 1.0, 1.0), window=1, n_members=21, predictand="Ws", circular_direction=False):
        self.weights = weights
        self.window = window
        self.n_members = n_members
        self.predictand = predictand
        self.circular_direction = circular_direction

    def _config(self):
        return AnalogConfig(tuple(self.weights), self.window, self.n_members, self.predictand, self.circular_direction)

    def fit(self, X, y=None):
        X = check_archive(X)
        self.config_ = self._config()
        X.var_index(self.predictand)
        if len(self.config_.weights) != len(X.variables):
            raise DimensionMismatch(f"{len(self.config_.weights)} weights for variables {X.variables}")
        self.archive_ = X
        self.stds_ = forecast_stds(X)
        return self

    def predict(self, X) -> EnsembleSet:
        check_is_fitted(self, "archive_")
        return anen_forecast(self.archive_, check_archive(X), self.config_, self.stds_)

    @property
    def memory_bytes(self):
        check_is_fitted(self, "archive_")
        return self.archive_.nbytes
