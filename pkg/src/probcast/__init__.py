"""Probabilistic forecasting with analog ensembles and conditional VAEs."""

from .anen import AnalogConfig, AnalogEnsemble, anen_forecast, forecast_stds, select_analogs
from .cvae import BetaSchedule, ConditionalVAE, CvaeHyper, generate_ensemble, load_model, save_model, train
from .dataset import (
    ForecastArchive,
    SyntheticLaw,
    VariableLaw,
    generate_synthetic,
    load_archive,
    split,
    write_archive,
)
from .ensemble import EnsembleForecast, EnsembleSet
from .verify import build_report, crps_ensemble, rank_histogram

__version__ = "0.1.0"

__all__ = [
    "AnalogConfig",
    "AnalogEnsemble",
    "BetaSchedule",
    "ConditionalVAE",
    "CvaeHyper",
    "EnsembleForecast",
    "EnsembleSet",
    "ForecastArchive",
    "SyntheticLaw",
    "VariableLaw",
    "anen_forecast",
    "build_report",
    "crps_ensemble",
    "forecast_stds",
    "generate_ensemble",
    "generate_synthetic",
    "load_archive",
    "load_model",
    "rank_histogram",
    "save_model",
    "select_analogs",
    "split",
    "train",
    "write_archive",
]
