"""Reference forecasters used as yardsticks in verification."""

import numpy as np

from .dataset import ForecastArchive, SyntheticLaw
from .ensemble import EnsembleSet


def _grid(test, variable):
    leads = test.active_leads
    S, T = test.n_stations, test.n_days
    station, day, lead = np.meshgrid(np.arange(S), np.arange(T), leads, indexing="ij")
    k = test.var_index(variable)
    return station.ravel(), day.ravel(), lead.ravel(), k


def ideal_ensembles(law: SyntheticLaw, test: ForecastArchive, m=21, seed=0, variable="Ws") -> EnsembleSet:
    """Members drawn from the closed-form law of the observation given its forecast."""
    station, day, lead, k = _grid(test, variable)
    fc = test.forecasts[station, day, lead, k]
    mean, var = law.conditional(variable, fc, lead)
    rng = np.random.default_rng(seed)
    members = mean[:, None] + np.sqrt(var)[:, None] * rng.standard_normal((len(fc), m))
    obs = test.observations[station, day, lead, k]
    return EnsembleSet(station, day + test.first_day, lead, members, obs, variable, "ideal")


def ideal_moments(law: SyntheticLaw, ens: EnsembleSet, test: ForecastArchive):
    """Closed-form conditional mean and std for the rows of ``ens``."""
    k = test.var_index(ens.variable)
    fc = test.forecasts[ens.station, ens.day - test.first_day, ens.lead, k]
    mean, var = law.conditional(ens.variable, fc, ens.lead)
    return mean, np.sqrt(var)


def climatology_ensembles(train: ForecastArchive, test: ForecastArchive, m=21, seed=0, variable="Ws") -> EnsembleSet:
    """Members drawn at random from past observations at the same station and lead."""
    station, day, lead, k = _grid(test, variable)
    rng = np.random.default_rng(seed)
    members = np.empty((len(station), m))
    for i, (s, l) in enumerate(zip(station, lead)):
        pool = train.observations[s, :, l, k]
        pool = pool[np.isfinite(pool)]
        members[i] = rng.choice(pool, size=m, replace=len(pool) < m)
    obs = test.observations[station, day, lead, k]
    return EnsembleSet(station, day + test.first_day, lead, members, obs, variable, "climatology")
