"""Memory and runtime comparison of AnEn and CVAE across archive sizes.

One synthetic "year" is 365 days x 5 stations x 16 leads. At scale ``k`` the
training archive holds ``365 * k`` days; the test set is fixed. Memory is
accounted analytically: AnEn must keep the paired forecast and observation
arrays, the CVAE only its serialized weights. Timings use a monotonic clock,
discard one warm-up pass and report the median of the repetitions. Archive
generation and model training are excluded from the prediction timings.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_positive_int
from .anen import AnalogConfig, anen_forecast, forecast_stds
from .cvae import BetaSchedule, ConditionalVAE, CvaeHyper
from .dataset import SyntheticLaw, generate_synthetic

logger = logging.getLogger(__name__)

YEAR_DAYS = 365
N_STATIONS = 5
N_LEADS = 16
DEFAULT_SCALES = (1, 10, 30)
# Training is informational in the bench; one epoch is enough to get a model
# file of the final size and a network of the final shape.
BENCH_SCHEDULE = BetaSchedule.parse("1:1")
CSV_COLUMNS = ("method", "scale", "bytes_data", "bytes_model", "time_total", "time_per_forecast")


@dataclass(frozen=True)
class BenchResult:
    method: str
    scale: float
    bytes_data: int
    bytes_model: int
    time_total: float = float("nan")
    time_per_forecast: float = float("nan")
    n_forecasts: int = 0
    train_time: float = float("nan")

    def __post_init__(self):
        if self.method not in ("anen", "cvae"):
            raise ValueError(f"unknown method {self.method!r}")
        for name in ("scale", "bytes_data", "bytes_model", "time_total", "time_per_forecast"):
            value = getattr(self, name)
            if value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")


def archive_bytes(shape):
    """Bytes of a float64 forecast array plus its paired observation array."""
    return int(np.prod(shape)) * 8 * 2


def _archive(scale, seed, law):
    days = int(round(YEAR_DAYS * scale))
    return generate_synthetic(law, (N_STATIONS, days, N_LEADS), seed=seed)


def _test_archive(n_test_days, seed, law):
    return generate_synthetic(law, (N_STATIONS, n_test_days, N_LEADS), seed=seed)


def _fit_cvae(train, m, seed, schedule, hyper):
    hyper = hyper or CvaeHyper()
    est = ConditionalVAE(
        latent_dim=hyper.latent_dim,
        hidden_layer_sizes=hyper.hidden,
        batch_size=hyper.batch_size,
        learning_rate=hyper.learning_rate,
        recon_weight=hyper.recon_weight,
        schedule=schedule,
        n_members=m,
        random_state=seed,
    )
    t0 = time.perf_counter()
    est.fit(train)
    return est, time.perf_counter() - t0


def measure_memory(scale, seed=0, law=None, schedule=BENCH_SCHEDULE, hyper=None, m=21):
    """``(anen, cvae)`` results carrying only the byte counts."""
    law = law or SyntheticLaw()
    train = _archive(scale, seed, law)
    est, train_time = _fit_cvae(train, m, seed, schedule, hyper)
    anen = BenchResult("anen", scale, archive_bytes(train.shape), 0)
    cvae = BenchResult("cvae", scale, 0, est.model_bytes, train_time=train_time)
    return anen, cvae


def _sample_size(fn, min_sample):
    """Calls per timing sample, sized from one discarded warm-up call."""
    t0 = time.perf_counter()
    fn()
    warm = time.perf_counter() - t0
    return max(1, math.ceil(min_sample / max(warm, 1e-9)))


def _time_once(fn, number):
    t0 = time.perf_counter()
    for _ in range(number):
        fn()
    return (time.perf_counter() - t0) / number


def _interleaved_medians(fns, repeats, min_sample=0.05):
    """Median seconds per call for each of ``fns``.

    Each function gets a warm-up call that also sizes its samples so that a
    sample spans at least ``min_sample`` seconds. Repetitions then cycle
    through all functions, so slow drift in machine speed hits every
    function alike instead of biasing whichever ran last.
    """
    numbers = [_sample_size(fn, min_sample) for fn in fns]
    times = [[] for _ in fns]
    for _ in range(repeats):
        for fn, number, acc in zip(fns, numbers, times):
            acc.append(_time_once(fn, number))
    return [float(np.median(t)) for t in times]


class _Case:
    """Everything needed to time both methods at one scale."""

    def __init__(self, scale, n_test_days, m, seed, law, schedule, hyper, anen_cfg=None):
        self.scale = scale
        self.train = _archive(scale, seed, law)
        self.test = _test_archive(n_test_days, seed + 1_000_003, law)
        self.cfg = anen_cfg or AnalogConfig(m=m)
        self.stds = forecast_stds(self.train)
        self.n = self.test.n_stations * self.test.n_days * len(self.test.active_leads)
        self.est, self.train_time = _fit_cvae(self.train, m, seed, schedule, hyper)

    def anen(self):
        return anen_forecast(self.train, self.test, self.cfg, self.stds)

    def cvae(self):
        return self.est.predict(self.test)

    def results(self, t_anen, t_cvae):
        logger.info("scale %g: anen %.3g s, cvae %.3g s for %d forecasts", self.scale, t_anen, t_cvae, self.n)
        return (
            BenchResult("anen", self.scale, archive_bytes(self.train.shape), 0, t_anen, t_anen / self.n, self.n),
            BenchResult("cvae", self.scale, 0, self.est.model_bytes, t_cvae, t_cvae / self.n, self.n, self.train_time),
        )


def measure_runtime(
    scale,
    n_test_days=7,
    m=21,
    repeats=5,
    seed=0,
    law=None,
    schedule=BENCH_SCHEDULE,
    hyper=None,
    anen_cfg=None,
):
    """Time AnEn and CVAE prediction of the same test set against a ``scale``-year archive.

    Returns ``(anen, cvae)`` results with memory and timings filled in.
    """
    check_positive_int(repeats, "repeats")
    case = _Case(scale, n_test_days, m, seed, law or SyntheticLaw(), schedule, hyper, anen_cfg)
    return case.results(*_interleaved_medians([case.anen, case.cvae], repeats))


def run_bench(scales=DEFAULT_SCALES, n_test_days=7, m=21, repeats=5, seed=0, law=None, schedule=BENCH_SCHEDULE, hyper=None):
    """Runtime and memory results for every scale, AnEn then CVAE per scale.

    All scales are prepared first and timed in interleaved repetitions.
    """
    check_positive_int(repeats, "repeats")
    law = law or SyntheticLaw()
    cases = [_Case(scale, n_test_days, m, seed, law, schedule, hyper) for scale in scales]
    fns = [fn for case in cases for fn in (case.anen, case.cvae)]
    medians = _interleaved_medians(fns, repeats)
    results = []
    for i, case in enumerate(cases):
        results.extend(case.results(medians[2 * i], medians[2 * i + 1]))
    return results


def _by_method(results, method):
    rows = sorted((r for r in results if r.method == method), key=lambda r: r.scale)
    return np.array([r.scale for r in rows]), np.array([r.time_per_forecast for r in rows])


def crossover_scale(results):
    """Archive scale at which AnEn prediction becomes slower than CVAE.

    AnEn cost is fitted as proportional to scale (least squares through the
    origin) and CVAE cost as a constant, and the two lines are intersected.
    Returns NaN when there is nothing to fit.
    """
    sa, ta = _by_method(results, "anen")
    _, tc = _by_method(results, "cvae")
    if len(sa) == 0 or len(tc) == 0:
        return float("nan")
    slope = float(sa @ ta / (sa @ sa))
    return float(np.mean(tc) / slope) if slope > 0 else float("inf")


def scaling_ratios(results):
    """Per-method ratios of memory and per-forecast time between consecutive scales."""
    out = {}
    for method in ("anen", "cvae"):
        rows = sorted((r for r in results if r.method == method), key=lambda r: r.scale)
        out[method] = [
            {
                "from": a.scale,
                "to": b.scale,
                "memory": (b.bytes_data + b.bytes_model) / (a.bytes_data + a.bytes_model),
                "time": b.time_per_forecast / a.time_per_forecast,
            }
            for a, b in zip(rows, rows[1:])
        ]
    return out


def write_bench(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in results:
            w.writerow([r.method, repr(float(r.scale)), r.bytes_data, r.bytes_model, repr(r.time_total), repr(r.time_per_forecast)])
    return Path(path)


def read_bench(path):
    with open(path, newline="") as fh:
        return [
            BenchResult(
                row["method"],
                float(row["scale"]),
                int(row["bytes_data"]),
                int(row["bytes_model"]),
                float(row["time_total"]),
                float(row["time_per_forecast"]),
            )
            for row in csv.DictReader(fh)
        ]


def plot_bench(results, prefix):
    """SVG plots of memory and per-forecast time against archive scale."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    prefix = Path(prefix)
    paths = []
    for what, label in (("memory", "bytes"), ("runtime", "seconds per forecast")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method in ("anen", "cvae"):
            rows = sorted((r for r in results if r.method == method), key=lambda r: r.scale)
            x = [r.scale for r in rows]
            y = [r.bytes_data + r.bytes_model if what == "memory" else r.time_per_forecast for r in rows]
            ax.plot(x, y, "o-", label=method.upper() if method == "cvae" else "AnEn")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("archive size (synthetic years)")
        ax.set_ylabel(label)
        ax.legend()
        paths.append(prefix.with_name(f"{prefix.name}_{what}.svg"))
        fig.savefig(paths[-1], metadata={"Date": None})
        plt.close(fig)
    return paths


__all__ = [
    "BenchResult",
    "archive_bytes",
    "crossover_scale",
    "measure_memory",
    "measure_runtime",
    "plot_bench",
    "read_bench",
    "run_bench",
    "scaling_ratios",
    "write_bench",
]
