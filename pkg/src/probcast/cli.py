"""Command-line front end.

Usage: ``probcast <subcommand> [--config FILE] [--set key=value ...] [--seed N]``.
Results go to files under ``out_dir``; progress goes to stderr. On failure a
single JSON object describing the error is written to stderr and the exit
status is 2 (config), 3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .anen import AnalogConfig, anen_forecast, forecast_stds
from .bench import crossover_scale, plot_bench, run_bench, scaling_ratios, write_bench
from .config import RunConfig, describe_keys, parse_pairs
from .cvae import BetaSchedule, ConditionalVAE, CvaeHyper, load_model, model_to_bytes, save_model, train
from .dataset import ForecastArchive, SyntheticLaw, generate_synthetic, load_archive, split, write_archive
from .ensemble import EnsembleSet, read_ensembles, write_ensembles
from .exceptions import ConfigError, DataError, ModelNotFound, ProbcastError
from .verify import build_report, dispersion, plot_report, write_rank_histogram, write_report

logger = logging.getLogger("probcast")

SUBCOMMANDS = ("synth", "train", "predict-anen", "predict-cvae", "verify", "bench", "demo")
SEED_ENV = "PROBCAST_SEED"
_STAGES = {"synth": 1, "train": 2, "predict": 3, "verify": 4, "bench": 5}


def stage_seed(seed, stage):
    """Independent 32-bit seed for one pipeline stage."""
    return int(np.random.SeedSequence([int(seed), _STAGES[stage]]).generate_state(1)[0])


# -- config plumbing -----------------------------------------------------------


def _overrides(args):
    raw = {}
    problems = []
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            problems.append(f"--set expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and env_seed.strip():
        raw["seed"] = env_seed.strip()
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if args.out_dir is not None:
        raw["out_dir"] = args.out_dir
    for flag, key in (("archive", "paths.archive"), ("models", "paths.models"), ("ensembles", "paths.ensembles")):
        if getattr(args, flag, None):
            raw[key] = getattr(args, flag)
    if problems:
        raise ConfigError(problems)
    return raw


def load_config(args) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError([f"config file {str(path)!r} not found"])
        raw = parse_pairs(path.read_text(), ignore_prefix="manifest.")
    raw.update(_overrides(args))
    return RunConfig.from_mapping(raw)


def _versions():
    import matplotlib
    import numba
    import scipy
    import sklearn

    return {
        "probcast": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "numba": numba.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_manifest(cfg: RunConfig, subcommand, path=None):
    """Config plus ``manifest.*`` provenance keys; re-parses to the same RunConfig."""
    path = Path(path) if path else cfg.out_dir / f"manifest-{subcommand}.txt"
    lines = [f"manifest.subcommand={subcommand}", f"manifest.config_hash={cfg.digest()}"]
    lines += [f"manifest.seed.{stage}={stage_seed(cfg['seed'], stage)}" for stage in _STAGES]
    lines += [f"manifest.version.{k}={v}" for k, v in _versions().items()]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n" + cfg.to_text())
    return path


# -- pipeline steps ------------------------------------------------------------


def _read_archive(cfg: RunConfig) -> ForecastArchive:
    path = cfg.archive_path
    if not path.is_file():
        raise DataError(f"archive {str(path)!r} not found; run 'probcast synth' first")
    archive = load_archive(path)
    excluded = frozenset(e for e in cfg["data.excluded_leads"] if e < archive.n_leads)
    if excluded != archive.excluded_leads:
        archive = archive.replace(excluded_leads=excluded)
    return archive


def _split(cfg: RunConfig, archive):
    n_train, n_test = cfg["data.train_days"], cfg["data.test_days"]
    if n_train + n_test > archive.n_days:
        raise DataError(f"archive has {archive.n_days} days, config needs {n_train} + {n_test}")
    return split(archive, range(0, n_train), range(n_train, n_train + n_test))


def _hyper(cfg: RunConfig):
    return CvaeHyper(
        cfg["cvae.latent_dim"],
        tuple(cfg["cvae.hidden"]),
        cfg["cvae.batch_size"],
        cfg["cvae.learning_rate"],
        cfg["cvae.recon_weight"],
    )


def _model_path(models_dir, station):
    return Path(models_dir) / f"station_{station:03d}.cvae"


def step_synth(cfg: RunConfig):
    days = cfg["data.train_days"] + cfg["data.test_days"]
    archive = generate_synthetic(
        SyntheticLaw(),
        (cfg["data.stations"], days, cfg["data.leads"]),
        seed=stage_seed(cfg["seed"], "synth"),
        excluded_leads=cfg["data.excluded_leads"],
        missing_fraction=cfg["data.missing_fraction"],
    )
    cfg.archive_path.parent.mkdir(parents=True, exist_ok=True)
    write_archive(archive, cfg.archive_path)
    logger.info("wrote %s (%d stations, %d days, %d leads)", cfg.archive_path, *archive.shape[:3])
    return archive


def _train_station(args):
    archive, station, hyper, schedule, seed_seq = args
    return train(archive, station, hyper, schedule, np.random.default_rng(seed_seq))


def step_train(cfg: RunConfig, archive=None):
    archive = archive if archive is not None else _read_archive(cfg)
    train_set, _ = _split(cfg, archive)
    hyper, schedule = _hyper(cfg), cfg.schedule
    # same per-station streams as ConditionalVAE.fit, whatever the worker count
    seeds = np.random.SeedSequence(stage_seed(cfg["seed"], "train")).spawn(train_set.n_stations)
    jobs = [(train_set, s, hyper, schedule, seeds[s]) for s in range(train_set.n_stations)]
    if cfg["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            results = list(pool.map(_train_station, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_train_station(job))
            logger.info("trained station %d of %d", job[1] + 1, len(jobs))
    models_dir = cfg.models_dir
    models_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.out_dir / "train_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station", "epoch", "beta", "reconstruction", "kl", "mse"])
        for s, (model, history) in enumerate(results):
            save_model(model, _model_path(models_dir, s))
            for e, h in enumerate(history):
                w.writerow([s, e, repr(h.beta), repr(h.reconstruction), repr(h.kl), repr(h.mse)])
    return [model for model, _ in results]


def _anen_config(cfg: RunConfig):
    return AnalogConfig(
        cfg["anen.weights"], cfg["anen.window"], cfg["ensemble.m"], cfg["anen.predictand"], cfg["anen.circular_direction"]
    )


def step_predict_anen(cfg: RunConfig, archive=None) -> EnsembleSet:
    archive = archive if archive is not None else _read_archive(cfg)
    train_set, test_set = _split(cfg, archive)
    ens = anen_forecast(train_set, test_set, _anen_config(cfg), forecast_stds(train_set))
    write_ensembles(ens, cfg.out_dir / "anen_ensembles.csv")
    return ens


def load_models(models_dir, n_stations):
    models = []
    for s in range(n_stations):
        path = _model_path(models_dir, s)
        if not path.is_file():
            raise ModelNotFound(f"no trained model for station {s} at {str(path)!r}; run 'probcast train' first")
        models.append(load_model(path))
    return models


def step_predict_cvae(cfg: RunConfig, archive=None) -> EnsembleSet:
    archive = archive if archive is not None else _read_archive(cfg)
    _, test_set = _split(cfg, archive)
    models = load_models(cfg.models_dir, test_set.n_stations)
    est = ConditionalVAE.from_models(models, n_members=cfg["ensemble.m"], random_state=stage_seed(cfg["seed"], "predict"))
    ens = est.predict(test_set)
    write_ensembles(ens, cfg.out_dir / "cvae_ensembles.csv")
    return ens


def _ensemble_inputs(cfg: RunConfig):
    if cfg["paths.ensembles"]:
        return [Path(p) for p in cfg["paths.ensembles"].split(",")]
    found = [cfg.out_dir / f"{m}_ensembles.csv" for m in ("anen", "cvae")]
    found = [p for p in found if p.is_file()]
    if not found:
        raise DataError(f"no ensemble files in {str(cfg.out_dir)!r}; run a predict subcommand first")
    return found


def step_verify(cfg: RunConfig, archive=None, ensembles=None):
    """Reports keyed by method name."""
    archive = archive if archive is not None else _read_archive(cfg)
    if ensembles is None:
        ensembles = []
        for path in _ensemble_inputs(cfg):
            if not path.is_file():
                raise DataError(f"ensemble file {str(path)!r} not found")
            ensembles.append(read_ensembles(path))
    reports = {}
    for ens in ensembles:
        ens = ens.with_observations(archive)
        name = ens.method or "ensemble"
        report = build_report(ens, cfg["verify.resamples"], stage_seed(cfg["seed"], "verify"), cfg["verify.level"])
        write_report(report, cfg.out_dir / f"{name}_report.csv")
        write_rank_histogram(report, cfg.out_dir / f"{name}_rank_histogram.csv")
        if cfg["verify.plots"]:
            plot_report(report, cfg.out_dir / name)
        reports[name] = (report, dispersion(ens))
        logger.info("%s: mean CRPS %.4f over %d forecasts", name, report.mean_over_leads("crps"), report.n_scored)
    return reports


def step_bench(cfg: RunConfig):
    results = run_bench(
        cfg["bench.scales"],
        cfg["bench.test_days"],
        cfg["ensemble.m"],
        cfg["bench.repeats"],
        stage_seed(cfg["seed"], "bench"),
        schedule=BetaSchedule.parse(cfg["bench.schedule"]),
        hyper=_hyper(cfg),
    )
    write_bench(results, cfg.out_dir / "bench.csv")
    if cfg["verify.plots"]:
        plot_bench(results, cfg.out_dir / "bench")
    (cfg.out_dir / "bench_summary.txt").write_text(_bench_text(results))
    return results


def _bench_text(results):
    lines = ["scale  method  memory_bytes  us_per_forecast"]
    for r in sorted(results, key=lambda r: (r.scale, r.method)):
        lines.append(f"{r.scale:5g}  {r.method:6s}  {r.bytes_data + r.bytes_model:12d}  {r.time_per_forecast * 1e6:10.2f}")
    for method, steps in scaling_ratios(results).items():
        for st in steps:
            lines.append(f"{method} {st['from']:g}x -> {st['to']:g}x: memory x{st['memory']:.2f}, time x{st['time']:.2f}")
    lines.append(f"crossover (AnEn slower than CVAE beyond): {crossover_scale(results):.3g} years")
    return "\n".join(lines) + "\n"


def _summary_rows(reports, memory):
    rows = []
    methods = list(reports)
    for metric in ("crps", "mse", "variance"):
        rows.append((f"mean_{metric}", [reports[m][0].mean_over_leads(metric) for m in methods]))
    ratio = []
    for m in methods:
        disp = reports[m][1]
        ratio.append(float(np.mean([mse / var for mse, var in disp.values()])))
    rows.append(("dispersion_ratio", ratio))
    for name, fn in (("rank_freq_min_ratio", np.min), ("rank_freq_max_ratio", np.max)):
        vals = []
        for m in methods:
            rep = reports[m][0]
            vals.append(float(fn(rep.rank_frequencies) * (rep.m + 1)))
        rows.append((name, vals))
    rows.append(("n_scored", [reports[m][0].n_scored for m in methods]))
    rows.append(("resident_bytes", [memory.get(m, 0) for m in methods]))
    return methods, rows


def step_demo(cfg: RunConfig):
    archive = step_synth(cfg)
    archive = _read_archive(cfg)  # exercise the file round trip
    train_set, _ = _split(cfg, archive)
    models = step_train(cfg, archive)
    anen = step_predict_anen(cfg, archive)
    cvae = step_predict_cvae(cfg, archive)
    reports = step_verify(cfg, archive, [anen, cvae])
    memory = {"anen": train_set.nbytes, "cvae": sum(len(model_to_bytes(m)) for m in models)}
    methods, rows = _summary_rows(reports, memory)
    with open(cfg.out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity"] + methods)
        for name, vals in rows:
            w.writerow([name] + [repr(v) if isinstance(v, float) else v for v in vals])
    bench = step_bench(cfg)
    text = ["quantity".ljust(22) + "".join(m.rjust(14) for m in methods)]
    for name, vals in rows:
        text.append(name.ljust(22) + "".join((f"{v:14.4f}" if isinstance(v, float) else f"{v:14d}") for v in vals))
    better = "AnEn" if rows[0][1][0] <= rows[0][1][1] else "CVAE"
    text.append(f"lower mean CRPS: {better}")
    text.append("")
    text.append(_bench_text(bench))
    (cfg.out_dir / "summary.txt").write_text("\n".join(text))
    print("\n".join(text), file=sys.stderr)
    return reports, bench


STEPS = {
    "synth": step_synth,
    "train": step_train,
    "predict-anen": step_predict_anen,
    "predict-cvae": step_predict_cvae,
    "verify": step_verify,
    "bench": step_bench,
    "demo": step_demo,
}


# -- entry point -------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help=f"master seed (overrides ${SEED_ENV} and the config)")
    common.add_argument("--out-dir", help="artifact directory")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    parser = argparse.ArgumentParser(prog="probcast", description="AnEn and CVAE probabilistic forecasting.")
    parser.add_argument("--version", action="version", version=f"probcast {__version__}")
    parser.add_argument("--list-keys", action="store_true", help="print every config key with its default")
    sub = parser.add_subparsers(dest="command")
    helps = {
        "synth": "generate a synthetic archive",
        "train": "train one CVAE per station",
        "predict-anen": "analog ensembles for the test days",
        "predict-cvae": "CVAE ensembles for the test days",
        "verify": "CRPS, dispersion and rank histograms of ensemble files",
        "bench": "memory and runtime scaling of both methods",
        "demo": "synth, train, predict, verify and bench in one go",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("train", "predict-anen", "predict-cvae", "verify", "demo"):
            p.add_argument("--archive", help="archive CSV")
        if name in ("train", "predict-cvae", "demo"):
            p.add_argument("--models", help="model directory")
        if name == "verify":
            p.add_argument("--ensembles", help="comma-separated ensemble CSV files")
    return parser


def _error_payload(exc):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": getattr(exc, "exit_code", 1)}
    if isinstance(exc, ConfigError):
        payload["problems"] = exc.problems
    return payload


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_keys:
        sys.stdout.write(describe_keys())
        return 0
    if not args.command:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        cfg = load_config(args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(cfg, args.command)
        STEPS[args.command](cfg)
    except ProbcastError as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        # malformed inputs that escaped the typed errors are data problems
        payload = _error_payload(exc)
        payload["exit_code"] = DataError.exit_code
        print(json.dumps(payload), file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
