"""Ensemble forecasts and their CSV representation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import ForecastArchive, read_metadata, sidecar_path, write_metadata
from .exceptions import MalformedRecord, MixedEnsembleSizes, ShapeMismatch

ENSEMBLE_FORMAT = "probcast-ensemble"


@dataclass(frozen=True)
class EnsembleForecast:
    """One probabilistic forecast: ``m`` members plus the verifying observation."""

    station: int
    day: int
    lead: int
    variable: str
    members: np.ndarray
    observation: float = math.nan

    @property
    def m(self):
        return len(self.members)


@dataclass(eq=False)
class EnsembleSet:
    """Array-backed collection of ensemble forecasts sharing one ensemble size.

    ``day`` holds absolute day indices. Rows whose members are all NaN are
    missing ensembles (the producing method could not forecast that cell).
    """

    station: np.ndarray
    day: np.ndarray
    lead: np.ndarray
    members: np.ndarray
    observations: np.ndarray
    variable: str = "Ws"
    method: str = ""

    def __post_init__(self):
        self.station = np.asarray(self.station, dtype=np.int64)
        self.day = np.asarray(self.day, dtype=np.int64)
        self.lead = np.asarray(self.lead, dtype=np.int64)
        self.members = np.asarray(self.members, dtype=np.float64)
        self.observations = np.asarray(self.observations, dtype=np.float64)
        n = len(self.station)
        if self.members.ndim != 2 or self.members.shape[0] != n:
            raise ShapeMismatch((n, "m"), self.members.shape)
        for name in ("day", "lead", "observations"):
            if len(getattr(self, name)) != n:
                raise ShapeMismatch(n, len(getattr(self, name)))

    def __len__(self):
        return len(self.station)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        return EnsembleForecast(
            int(self.station[i]),
            int(self.day[i]),
            int(self.lead[i]),
            self.variable,
            self.members[i].copy(),
            float(self.observations[i]),
        )

    @property
    def m(self):
        return self.members.shape[1]

    @property
    def missing(self):
        """Boolean mask of rows without a usable ensemble."""
        return ~np.all(np.isfinite(self.members), axis=1)

    @classmethod
    def from_forecasts(cls, forecasts, method=""):
        forecasts = list(forecasts)
        sizes = {f.m for f in forecasts}
        if len(sizes) > 1:
            raise MixedEnsembleSizes(f"ensemble sizes {sorted(sizes)}")
        variable = forecasts[0].variable if forecasts else "Ws"
        m = sizes.pop() if sizes else 0
        return cls(
            [f.station for f in forecasts],
            [f.day for f in forecasts],
            [f.lead for f in forecasts],
            np.array([f.members for f in forecasts]).reshape(len(forecasts), m),
            [f.observation for f in forecasts],
            variable,
            method,
        )

    def canonical_order(self):
        """Indices sorting rows by (station, day, lead)."""
        return np.lexsort((self.lead, self.day, self.station))

    def take(self, idx):
        return EnsembleSet(
            self.station[idx],
            self.day[idx],
            self.lead[idx],
            self.members[idx],
            self.observations[idx],
            self.variable,
            self.method,
        )

    def sorted(self):
        return self.take(self.canonical_order())

    def with_observations(self, archive: ForecastArchive):
        """Attach verifying observations of ``self.variable`` from ``archive``."""
        k = archive.var_index(self.variable)
        d = self.day - archive.first_day
        if np.any((d < 0) | (d >= archive.n_days)):
            raise ShapeMismatch(f"days within archive days {archive.first_day}..", "out-of-range day")
        obs = archive.observations[self.station, d, self.lead, k]
        return EnsembleSet(self.station, self.day, self.lead, self.members, obs, self.variable, self.method)


def _fmt(x):
    return "" if math.isnan(x) else repr(float(x))


def write_ensembles(ens: EnsembleSet, path, extra_meta=None):
    """Rows ``station, day, lead, member_index, value`` plus a ``.meta`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["station", "day", "lead", "member_index", "value"])
        for i in range(len(ens)):
            s, d, l = int(ens.station[i]), int(ens.day[i]), int(ens.lead[i])
            for j, x in enumerate(ens.members[i]):
                writer.writerow([s, d, l, j, _fmt(x)])
    meta = {
        "format": ENSEMBLE_FORMAT,
        "version": 1,
        "method": ens.method,
        "variable": ens.variable,
        "m": ens.m,
        "n_forecasts": len(ens),
        "n_missing": int(ens.missing.sum()),
    }
    meta.update(extra_meta or {})
    write_metadata(sidecar_path(path), meta)
    return path


def read_ensembles(path) -> EnsembleSet:
    path = Path(path)
    meta = read_metadata(sidecar_path(path))
    try:
        m = int(meta["m"])
        n = int(meta["n_forecasts"])
    except KeyError as exc:
        raise MalformedRecord(0, f"ensemble metadata missing {exc.args[0]!r}") from None
    station = np.empty(n, dtype=np.int64)
    day = np.empty(n, dtype=np.int64)
    lead = np.empty(n, dtype=np.int64)
    members = np.full((n, m), np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["station", "day", "lead", "member_index", "value"]:
            raise MalformedRecord(1, f"unexpected header {header}")
        rows = 0
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise MalformedRecord(lineno, "expected 5 fields")
            try:
                s, d, l, j = (int(x) for x in row[:4])
                value = float(row[4]) if row[4].strip() else math.nan
            except ValueError as exc:
                raise MalformedRecord(lineno, str(exc)) from None
            i, jj = divmod(rows, m)
            if i >= n or j != jj:
                raise MalformedRecord(lineno, "member rows out of order")
            station[i], day[i], lead[i] = s, d, l
            members[i, j] = value
            rows += 1
    if rows != n * m:
        raise ShapeMismatch(n * m, rows)
    return EnsembleSet(
        station, day, lead, members, np.full(n, np.nan), meta.get("variable", "Ws"), meta.get("method", "")
    )
