"""Forecast/observation archives.

An archive pairs deterministic forecasts with their verifying observations on a
dense ``(station, day, lead_time, variable)`` grid. Observations may be missing
(NaN). A set of excluded lead times is carried along and never contributes to
any statistic computed downstream.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .exceptions import (
    DegenerateVariable,
    MalformedRecord,
    OverlappingRanges,
    RangeOutOfBounds,
    ShapeMismatch,
    UnitOutOfRange,
)

logger = logging.getLogger(__name__)

VARIABLES = ("Ws", "Wd", "T", "P")
UNITS = {"Ws": "m/s", "Wd": "rad", "T": "K", "P": "Pa"}
TWO_PI = 2.0 * math.pi

# Half-open [low, high) plausibility bounds used when loading files.
PHYSICAL_RANGES = {
    "Ws": (0.0, 150.0),
    "Wd": (0.0, TWO_PI),
    "T": (150.0, 350.0),
    "P": (3.0e4, 1.2e5),
}

DEFAULT_EXCLUDED_LEADS = (0, 1, 2, 3)
DEFAULT_TRAIN_DAYS = 365
DEFAULT_TEST_DAYS = 7

ARCHIVE_FORMAT = "probcast-archive"
ARCHIVE_VERSION = 1


def wrap_direction(values):
    """Map angles onto [0, 2*pi), guarding against ``mod`` rounding up to 2*pi."""
    out = np.mod(values, TWO_PI)
    return np.where(out >= TWO_PI, 0.0, out)


@dataclass(frozen=True, eq=False)
class ForecastArchive:
    """Paired forecasts and observations.

    Attributes
    ----------
    forecasts, observations : ndarray of shape (stations, days, lead_times, n_vars)
        Physical units. Missing observations are NaN.
    variables : tuple of str
        Column order of the last axis.
    excluded_leads : frozenset of int
        Lead indices dropped from every computation.
    first_day : int
        Absolute index of day 0, so that slices remember where they came from.
    """

    forecasts: np.ndarray
    observations: np.ndarray
    variables: tuple = VARIABLES
    excluded_leads: frozenset = field(default_factory=frozenset)
    first_day: int = 0

    def __post_init__(self):
        fc = np.array(self.forecasts, dtype=np.float64)
        ob = np.array(self.observations, dtype=np.float64)
        if fc.ndim != 4:
            raise ShapeMismatch("4-D forecast array", fc.shape)
        if fc.shape != ob.shape:
            raise ShapeMismatch(fc.shape, ob.shape)
        variables = tuple(self.variables)
        if len(variables) != fc.shape[3]:
            raise ShapeMismatch(len(variables), fc.shape[3])
        excluded = frozenset(int(i) for i in self.excluded_leads)
        bad = [i for i in excluded if not 0 <= i < fc.shape[2]]
        if bad:
            raise RangeOutOfBounds(f"excluded leads {sorted(bad)} outside [0, {fc.shape[2]})")
        if "Wd" in variables:
            k = variables.index("Wd")
            for arr in (fc, ob):
                vals = arr[..., k]
                vals = vals[np.isfinite(vals)]
                off = vals[(vals < 0.0) | (vals >= TWO_PI)]
                if off.size:
                    raise UnitOutOfRange("Wd", float(off[0]))
        fc.flags.writeable = False
        ob.flags.writeable = False
        object.__setattr__(self, "forecasts", fc)
        object.__setattr__(self, "observations", ob)
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "excluded_leads", excluded)

    @property
    def shape(self):
        return self.forecasts.shape

    @property
    def n_stations(self):
        return self.shape[0]

    @property
    def n_days(self):
        return self.shape[1]

    @property
    def n_leads(self):
        return self.shape[2]

    @property
    def active_leads(self):
        """Sorted lead indices that are not excluded."""
        return np.array([i for i in range(self.n_leads) if i not in self.excluded_leads], dtype=int)

    @property
    def nbytes(self):
        """Exact in-memory footprint of the paired arrays."""
        return self.forecasts.nbytes + self.observations.nbytes

    def var_index(self, name):
        try:
            return self.variables.index(name)
        except ValueError:
            raise KeyError(f"variable {name!r} not in archive {self.variables}") from None

    def direction_components(self, which="observations"):
        """Return ``(sin Wd, cos Wd)`` for the forecasts or observations."""
        arr = self.forecasts if which == "forecasts" else self.observations
        wd = arr[..., self.var_index("Wd")]
        return np.sin(wd), np.cos(wd)

    def replace(self, **changes):
        return replace(self, **changes)

    def equals(self, other):
        """Bit-exact comparison (NaNs in matching places compare equal)."""
        return (
            self.variables == other.variables
            and self.excluded_leads == other.excluded_leads
            and self.shape == other.shape
            and np.array_equal(self.forecasts, other.forecasts, equal_nan=True)
            and np.array_equal(self.observations, other.observations, equal_nan=True)
        )


# -- file I/O ------------------------------------------------------------------


@dataclass(frozen=True)
class ArchiveSchema:
    """Expected layout of an archive file, normally read from its sidecar."""

    stations: int
    days: int
    lead_times: int
    variables: tuple = VARIABLES
    excluded_leads: tuple = ()
    first_day: int = 0

    @property
    def n_rows(self):
        return self.stations * self.days * self.lead_times

    @property
    def columns(self):
        return (
            ["station", "day", "lead"]
            + [f"{v}_f" for v in self.variables]
            + [f"{v}_o" for v in self.variables]
        )


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".meta")


def read_metadata(path):
    """Parse a plain ``key=value`` text file."""
    meta = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MalformedRecord(n, f"expected key=value in {path}")
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


def write_metadata(path, meta: Mapping[str, object]):
    with open(path, "w") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={value}\n")


def _join(values):
    return ",".join(str(v) for v in values)


def _split_list(text, cast=str):
    text = text.strip()
    return tuple(cast(t) for t in text.split(",")) if text else ()


def schema_from_metadata(meta):
    try:
        if meta.get("format", ARCHIVE_FORMAT) != ARCHIVE_FORMAT:
            raise MalformedRecord(0, f"unknown format {meta['format']!r}")
        return ArchiveSchema(
            stations=int(meta["stations"]),
            days=int(meta["days"]),
            lead_times=int(meta["lead_times"]),
            variables=_split_list(meta.get("variables", _join(VARIABLES))),
            excluded_leads=_split_list(meta.get("excluded_leads", ""), int),
            first_day=int(meta.get("first_day", 0)),
        )
    except KeyError as exc:
        raise MalformedRecord(0, f"metadata missing key {exc.args[0]!r}") from None


def _fmt(x):
    return "" if math.isnan(x) else repr(float(x))


def write_archive(archive: ForecastArchive, path):
    """Write ``archive`` as headered CSV plus a ``.meta`` sidecar.

    Floats are written with ``repr`` so that reading the file back is bit-exact.
    """
    path = Path(path)
    schema = ArchiveSchema(
        stations=archive.n_stations,
        days=archive.n_days,
        lead_times=archive.n_leads,
        variables=archive.variables,
        excluded_leads=tuple(sorted(archive.excluded_leads)),
        first_day=archive.first_day,
    )
    fc, ob = archive.forecasts, archive.observations
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.columns)
        for s in range(schema.stations):
            for d in range(schema.days):
                for l in range(schema.lead_times):
                    row = [s, d, l]
                    row.extend(_fmt(x) for x in fc[s, d, l])
                    row.extend(_fmt(x) for x in ob[s, d, l])
                    writer.writerow(row)
    write_metadata(
        sidecar_path(path),
        {
            "format": ARCHIVE_FORMAT,
            "version": ARCHIVE_VERSION,
            "stations": schema.stations,
            "days": schema.days,
            "lead_times": schema.lead_times,
            "variables": _join(schema.variables),
            "units": _join(UNITS.get(v, "") for v in schema.variables),
            "excluded_leads": _join(schema.excluded_leads),
            "first_day": schema.first_day,
            "missing": "empty",
        },
    )
    return path


def load_archive(path, schema: ArchiveSchema | None = None) -> ForecastArchive:
    """Read an archive CSV.

    Parameters
    ----------
    path : path-like
        CSV file in the documented column layout.
    schema : ArchiveSchema, optional
        Expected layout; read from the ``.meta`` sidecar when omitted.

    Raises
    ------
    MalformedRecord
        Unparseable line, wrong header, index outside the schema, duplicate cell
        or a missing forecast value.
    ShapeMismatch
        Row count differs from ``stations * days * lead_times``.
    UnitOutOfRange
        A value outside its physical range (e.g. wind direction >= 2*pi).
    """
    path = Path(path)
    if schema is None:
        schema = schema_from_metadata(read_metadata(sidecar_path(path)))
    n_vars = len(schema.variables)
    shape = (schema.stations, schema.days, schema.lead_times, n_vars)
    fc = np.full(shape, np.nan)
    ob = np.full(shape, np.nan)
    seen = np.zeros(shape[:3], dtype=bool)
    ranges = [PHYSICAL_RANGES.get(v, (-math.inf, math.inf)) for v in schema.variables]
    n_rows = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != schema.columns:
            raise MalformedRecord(1, f"header {header} != {schema.columns}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + 2 * n_vars:
                raise MalformedRecord(lineno, f"{len(row)} fields, expected {3 + 2 * n_vars}")
            try:
                s, d, l = int(row[0]), int(row[1]), int(row[2])
                values = [float(x) if x.strip() else math.nan for x in row[3:]]
            except ValueError as exc:
                raise MalformedRecord(lineno, str(exc)) from None
            if not (0 <= s < shape[0] and 0 <= d < shape[1] and 0 <= l < shape[2]):
                raise MalformedRecord(lineno, f"cell ({s}, {d}, {l}) outside {shape[:3]}")
            if seen[s, d, l]:
                raise MalformedRecord(lineno, f"duplicate cell ({s}, {d}, {l})")
            for k, x in enumerate(values):
                name = schema.variables[k % n_vars]
                if math.isnan(x):
                    if k < n_vars:
                        raise MalformedRecord(lineno, f"missing forecast {name}")
                    continue
                low, high = ranges[k % n_vars]
                if not low <= x < high:
                    raise UnitOutOfRange(name, x)
            seen[s, d, l] = True
            fc[s, d, l] = values[:n_vars]
            ob[s, d, l] = values[n_vars:]
            n_rows += 1
    if n_rows != schema.n_rows:
        raise ShapeMismatch(schema.n_rows, n_rows)
    logger.debug("loaded archive %s with shape %s", path, shape)
    return ForecastArchive(
        fc, ob, schema.variables, frozenset(schema.excluded_leads), schema.first_day
    )


# -- normalization ---------------------------------------------------------


def population_moments(values, axis):
    """NaN-aware mean and divide-by-N standard deviation."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(values, axis=axis)
        std = np.nanstd(values, axis=axis, ddof=0)
    return mean, std


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    """Per (variable, station) moments of the training cells.

    ``*_std`` hold the raw population standard deviation, zeros included;
    ``*_scale`` substitutes 1 for zero so that scaling never divides by zero.
    All arrays have shape (n_vars, n_stations).
    """

    variables: tuple
    forecast_mean: np.ndarray
    forecast_std: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray

    @property
    def forecast_scale(self):
        return np.where(self.forecast_std > 0, self.forecast_std, 1.0)

    @property
    def obs_scale(self):
        return np.where(self.obs_std > 0, self.obs_std, 1.0)

    def _broadcast(self, arr):
        # (V, S) -> (S, 1, 1, V) to line up with archive arrays
        return arr.T[:, None, None, :]


def _training_cells(arr, archive, train_days):
    days = _as_range(train_days, archive.n_days)
    if len(days) == 0:
        raise RangeOutOfBounds("train_days is empty")
    return arr[:, days.start : days.stop][:, :, archive.active_leads]


def fit_normalization(archive: ForecastArchive, train_days=None, strict=False) -> NormalizationStats:
    """Compute per (variable, station) mean and population std over training cells.

    Only non-missing cells of non-excluded lead times count. A zero standard
    deviation is recorded as-is; with ``strict=True`` it raises
    :class:`DegenerateVariable` instead of emitting a warning.
    """
    if train_days is None:
        train_days = range(archive.n_days)
    stats = {}
    for name, arr in (("forecast", archive.forecasts), ("obs", archive.observations)):
        cells = _training_cells(arr, archive, train_days)
        mean, std = population_moments(cells, axis=(1, 2))  # (S, V)
        stats[name + "_mean"] = mean.T.copy()
        stats[name + "_std"] = std.T.copy()
    for key in ("forecast_std", "obs_std"):
        for v, s in zip(*np.nonzero(~(stats[key] > 0))):
            if strict:
                raise DegenerateVariable(archive.variables[v], int(s))
            warnings.warn(
                f"{archive.variables[v]} at station {s} has zero spread; using unit scale",
                RuntimeWarning,
                stacklevel=2,
            )
            if np.isnan(stats[key][v, s]):
                stats[key][v, s] = 0.0
                mean_key = key.replace("std", "mean")
                stats[mean_key][v, s] = np.nan_to_num(stats[mean_key][v, s])
    return NormalizationStats(archive.variables, **stats)


def apply_normalization(archive: ForecastArchive, stats: NormalizationStats) -> ForecastArchive:
    fc = (archive.forecasts - stats._broadcast(stats.forecast_mean)) / stats._broadcast(stats.forecast_scale)
    ob = (archive.observations - stats._broadcast(stats.obs_mean)) / stats._broadcast(stats.obs_scale)
    return _unchecked(archive, fc, ob)


def invert_normalization(archive: ForecastArchive, stats: NormalizationStats) -> ForecastArchive:
    fc = archive.forecasts * stats._broadcast(stats.forecast_scale) + stats._broadcast(stats.forecast_mean)
    ob = archive.observations * stats._broadcast(stats.obs_scale) + stats._broadcast(stats.obs_mean)
    return ForecastArchive(fc, ob, archive.variables, archive.excluded_leads, archive.first_day)


def _unchecked(archive, fc, ob, first_day=None):
    # Normalized values are not physical, so skip the Wd range check.
    out = object.__new__(ForecastArchive)
    fc = np.asarray(fc, dtype=np.float64)
    ob = np.asarray(ob, dtype=np.float64)
    fc.flags.writeable = False
    ob.flags.writeable = False
    for key, value in (
        ("forecasts", fc),
        ("observations", ob),
        ("variables", archive.variables),
        ("excluded_leads", archive.excluded_leads),
        ("first_day", archive.first_day if first_day is None else first_day),
    ):
        object.__setattr__(out, key, value)
    return out


# -- splitting ---------------------------------------------------------------


def _as_range(days, n_days):
    if isinstance(days, range):
        if days.step != 1:
            raise RangeOutOfBounds("day ranges must be contiguous")
        r = days
    else:
        start, stop = days
        r = range(int(start), int(stop))
    if r.start < 0 or r.stop > n_days or r.start > r.stop:
        raise RangeOutOfBounds(f"day range {r.start}..{r.stop} outside [0, {n_days})")
    return r


def select_days(archive: ForecastArchive, days) -> ForecastArchive:
    r = _as_range(days, archive.n_days)
    return _unchecked(
        archive,
        archive.forecasts[:, r.start : r.stop].copy(),
        archive.observations[:, r.start : r.stop].copy(),
        first_day=archive.first_day + r.start,
    )


def split(archive: ForecastArchive, train_days, test_days):
    """Slice an archive into disjoint train and test day ranges."""
    train = _as_range(train_days, archive.n_days)
    test = _as_range(test_days, archive.n_days)
    if len(train) == 0 or len(test) == 0:
        raise RangeOutOfBounds("train and test ranges must be non-empty")
    if max(train.start, test.start) < min(train.stop, test.stop):
        raise OverlappingRanges(f"train {train.start}..{train.stop} overlaps test {test.start}..{test.stop}")
    return select_days(archive, train), select_days(archive, test)


def default_split(archive, train_days=DEFAULT_TRAIN_DAYS, test_days=DEFAULT_TEST_DAYS):
    """Leading ``train_days`` for training, the following ``test_days`` for testing."""
    return split(archive, range(0, train_days), range(train_days, train_days + test_days))


# -- synthetic data ----------------------------------------------------------


@dataclass(frozen=True)
class VariableLaw:
    """Generative law of one variable.

    latent = base + diurnal_amplitude * sin(2 pi lead / period) + anomaly
    forecast = latent + forecast_noise * e1,  observation = latent + obs_noise * e2

    The anomaly has standard deviation ``latent_std``; a fraction of it (the
    ``shared_loading``) comes from a factor common to all variables. Along the
    lead axis the anomaly follows an AR(1) process with ``autocorr``.
    """

    base: float
    latent_std: float
    forecast_noise: float
    obs_noise: float
    diurnal_amplitude: float = 0.0
    autocorr: float = 0.0
    shared_loading: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.autocorr < 1.0:
            raise ValueError(f"autocorr must lie in [0, 1), got {self.autocorr}")
        if not -1.0 <= self.shared_loading <= 1.0:
            raise ValueError(f"shared_loading must lie in [-1, 1], got {self.shared_loading}")
        if min(self.latent_std, self.forecast_noise, self.obs_noise) < 0:
            raise ValueError("standard deviations must be non-negative")


def _default_laws():
    return (
        ("Ws", VariableLaw(10.0, 2.0, 1.0, 1.0, diurnal_amplitude=0.5, autocorr=0.9, shared_loading=0.95)),
        ("Wd", VariableLaw(math.pi, 0.6, 0.25, 0.25, autocorr=0.9, shared_loading=0.95)),
        ("T", VariableLaw(288.0, 3.0, 1.0, 1.0, diurnal_amplitude=4.0, autocorr=0.9, shared_loading=-0.95)),
        ("P", VariableLaw(101325.0, 600.0, 150.0, 150.0, diurnal_amplitude=40.0, autocorr=0.9, shared_loading=-0.95)),
    )


@dataclass(frozen=True)
class SyntheticLaw:
    """Per-variable laws plus the shared factor's lead autocorrelation.

    For every variable the pair (forecast, observation) at fixed lead is jointly
    Gaussian, which gives the closed-form conditional returned by
    :meth:`conditional`. Wind direction is wrapped onto [0, 2*pi) afterwards,
    so its closed form ignores the wrap.
    """

    laws: tuple = field(default_factory=_default_laws)
    shared_autocorr: float = 0.9
    diurnal_period: float = 24.0

    def __post_init__(self):
        if not 0.0 <= self.shared_autocorr < 1.0:
            raise ValueError("shared_autocorr must lie in [0, 1)")

    @property
    def variables(self):
        return tuple(name for name, _ in self.laws)

    def law(self, variable) -> VariableLaw:
        return dict(self.laws)[variable]

    def with_law(self, variable, **changes):
        laws = tuple((n, replace(l, **changes) if n == variable else l) for n, l in self.laws)
        return replace(self, laws=laws)

    def latent_mean(self, variable, lead):
        law = self.law(variable)
        return law.base + law.diurnal_amplitude * np.sin(TWO_PI * np.asarray(lead) / self.diurnal_period)

    def correlation(self, variable):
        """Correlation between forecast and observation of one variable."""
        law = self.law(variable)
        vs = law.latent_std**2
        denom = math.sqrt((vs + law.forecast_noise**2) * (vs + law.obs_noise**2))
        return vs / denom if denom > 0 else float("nan")

    def conditional(self, variable, forecast, lead):
        """Mean and variance of the observation given the same-variable forecast."""
        law = self.law(variable)
        vs = law.latent_std**2
        vf = vs + law.forecast_noise**2
        gain = vs / vf if vf > 0 else 0.0
        mu = self.latent_mean(variable, lead)
        mean = mu + gain * (np.asarray(forecast, dtype=float) - mu)
        var = vs + law.obs_noise**2 - gain * vs
        return mean, np.full(np.shape(mean), var)


def _ar1(rng, size, n_leads, rho):
    out = np.empty(size + (n_leads,))
    out[..., 0] = rng.standard_normal(size)
    innov = math.sqrt(1.0 - rho * rho)
    for l in range(1, n_leads):
        out[..., l] = rho * out[..., l - 1] + innov * rng.standard_normal(size)
    return out


def generate_synthetic(
    law: SyntheticLaw,
    shape: Sequence[int],
    seed: int,
    excluded_leads=DEFAULT_EXCLUDED_LEADS,
    missing_fraction: float = 0.0,
) -> ForecastArchive:
    """Draw an archive from ``law``.

    Deterministic in ``(law, shape, seed)``. Excluded leads beyond the lead
    count are dropped. ``missing_fraction`` blanks that share of observation
    cells at random.
    """
    stations, days, leads = (int(x) for x in shape)
    if min(stations, days, leads) < 1:
        raise ValueError(f"shape components must be >= 1, got {tuple(shape)}")
    rng = np.random.default_rng(seed)
    size = (stations, days)
    shared = _ar1(rng, size, leads, law.shared_autocorr)
    lead_idx = np.arange(leads)
    n_vars = len(law.laws)
    fc = np.empty((stations, days, leads, n_vars))
    ob = np.empty_like(fc)
    for k, (name, vl) in enumerate(law.laws):
        own = _ar1(rng, size, leads, vl.autocorr)
        lam = vl.shared_loading
        anomaly = vl.latent_std * (lam * shared + math.sqrt(1.0 - lam * lam) * own)
        latent = law.latent_mean(name, lead_idx) + anomaly
        fc[..., k] = latent + vl.forecast_noise * rng.standard_normal(latent.shape)
        ob[..., k] = latent + vl.obs_noise * rng.standard_normal(latent.shape)
        if name == "Wd":
            fc[..., k] = wrap_direction(fc[..., k])
            ob[..., k] = wrap_direction(ob[..., k])
    if missing_fraction > 0:
        holes = rng.random((stations, days, leads)) < missing_fraction
        ob[holes] = np.nan
    excluded = frozenset(i for i in excluded_leads if i < leads)
    return ForecastArchive(fc, ob, law.variables, excluded)
