"""Run configuration: flat ``key=value`` text with dotted sections.

Blank lines and lines starting with ``#`` are ignored. Lists are comma
separated. Every key has a default, so an empty file is a valid config.
Validation reports every problem at once through :class:`ConfigError`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType

from .cvae import BetaSchedule
from .dataset import VARIABLES
from .exceptions import ConfigError

_BOOLS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(text):
    try:
        return _BOOLS[text.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}") from None


def _parse_list(cast):
    def parse(text):
        text = text.strip()
        return tuple(cast(x) for x in text.split(",")) if text else ()

    return parse


def _fmt_float(x):
    return repr(float(x))


def _fmt_list(fmt):
    return lambda xs: ",".join(fmt(x) for x in xs)


@dataclass(frozen=True)
class _Key:
    name: str
    parse: object
    fmt: object
    default: object
    doc: str = ""


def _key(name, kind, default, doc=""):
    parse, fmt = {
        "int": (int, str),
        "float": (float, _fmt_float),
        "str": (str.strip, str),
        "bool": (_parse_bool, lambda b: "true" if b else "false"),
        "ints": (_parse_list(int), _fmt_list(str)),
        "floats": (_parse_list(float), _fmt_list(_fmt_float)),
    }[kind]
    return _Key(name, parse, fmt, default, doc)


KEYS = (
    _key("seed", "int", 0, "master seed; every stage derives its own stream from it"),
    _key("workers", "int", 1, "processes used to train or predict stations in parallel"),
    _key("out_dir", "str", "run", "directory receiving artifacts"),
    _key("paths.archive", "str", "", "archive CSV (default <out_dir>/archive.csv)"),
    _key("paths.models", "str", "", "directory of per-station model files (default <out_dir>/models)"),
    _key("paths.ensembles", "str", "", "ensemble CSV read by verify (default: both method outputs)"),
    _key("data.stations", "int", 5),
    _key("data.leads", "int", 53),
    _key("data.train_days", "int", 365),
    _key("data.test_days", "int", 7),
    _key("data.excluded_leads", "ints", (0, 1, 2, 3)),
    _key("data.missing_fraction", "float", 0.0),
    _key("ensemble.m", "int", 21, "members per ensemble, both methods"),
    _key("anen.weights", "floats", (1.0, 1.0, 1.0, 1.0), "Ws, Wd, T, P"),
    _key("anen.window", "int", 1, "lead-window half width"),
    _key("anen.predictand", "str", "Ws"),
    _key("anen.circular_direction", "bool", False),
    _key("cvae.latent_dim", "int", 4),
    _key("cvae.hidden", "ints", (32, 32)),
    _key("cvae.batch_size", "int", 64),
    _key("cvae.learning_rate", "float", 1e-3),
    _key("cvae.recon_weight", "float", 300.0),
    _key("cvae.schedule", "str", BetaSchedule().format(), "beta:epochs segments"),
    _key("cvae.repeat", "int", 1, "number of passes through the schedule"),
    _key("cvae.epochs", "int", 152, "must equal the schedule total"),
    _key("verify.resamples", "int", 1000),
    _key("verify.level", "float", 0.95),
    _key("verify.plots", "bool", True),
    _key("bench.scales", "floats", (1.0, 10.0, 30.0), "archive sizes in synthetic years"),
    _key("bench.test_days", "int", 7),
    _key("bench.repeats", "int", 5),
    _key("bench.schedule", "str", "1:1", "short schedule used to train bench models"),
)
_BY_NAME = {k.name: k for k in KEYS}


def _validate(values):
    problems = []

    def need(cond, msg):
        if not cond:
            problems.append(msg)

    v = values
    need(v["workers"] >= 1, "workers must be >= 1")
    need(bool(v["out_dir"]), "out_dir must not be empty")
    need(v["data.stations"] >= 1, "data.stations must be >= 1")
    need(v["data.leads"] >= 1, "data.leads must be >= 1")
    need(v["data.train_days"] >= 2, "data.train_days must be >= 2")
    need(v["data.test_days"] >= 1, "data.test_days must be >= 1")
    excl = v["data.excluded_leads"]
    need(all(0 <= e < v["data.leads"] for e in excl), "data.excluded_leads must lie in [0, data.leads)")
    need(len(set(excl)) < v["data.leads"], "data.excluded_leads leaves no lead to forecast")
    need(0.0 <= v["data.missing_fraction"] < 1.0, "data.missing_fraction must be in [0, 1)")
    m = v["ensemble.m"]
    need(m >= 1, "ensemble.m must be >= 1")
    need(m <= v["data.train_days"], "ensemble.m exceeds the number of training days")
    w = v["anen.weights"]
    need(len(w) == len(VARIABLES), f"anen.weights needs {len(VARIABLES)} values")
    need(all(math.isfinite(x) and x >= 0 for x in w) and sum(w) > 0, "anen.weights must be >= 0 and not all zero")
    need(v["anen.window"] >= 0, "anen.window must be >= 0")
    need(v["anen.predictand"] in VARIABLES, f"anen.predictand must be one of {','.join(VARIABLES)}")
    need(v["cvae.latent_dim"] >= 1, "cvae.latent_dim must be >= 1")
    need(len(v["cvae.hidden"]) >= 1 and all(h >= 1 for h in v["cvae.hidden"]), "cvae.hidden needs positive widths")
    need(v["cvae.batch_size"] >= 1, "cvae.batch_size must be >= 1")
    need(v["cvae.learning_rate"] > 0, "cvae.learning_rate must be > 0")
    need(v["cvae.recon_weight"] > 0, "cvae.recon_weight must be > 0")
    need(v["cvae.repeat"] >= 1, "cvae.repeat must be >= 1")
    for name in ("cvae.schedule", "bench.schedule"):
        try:
            sched = BetaSchedule.parse(v[name], repeat=max(1, v["cvae.repeat"]) if name == "cvae.schedule" else 1)
        except (ValueError, TypeError) as exc:
            problems.append(f"{name}: {exc}")
            continue
        if name == "cvae.schedule" and sched.total_epochs != v["cvae.epochs"]:
            problems.append(f"cvae.schedule covers {sched.total_epochs} epochs but cvae.epochs={v['cvae.epochs']}")
    need(v["verify.resamples"] >= 1, "verify.resamples must be >= 1")
    need(0.0 < v["verify.level"] < 1.0, "verify.level must be in (0, 1)")
    need(len(v["bench.scales"]) >= 1 and all(s > 0 for s in v["bench.scales"]), "bench.scales must be positive")
    need(v["bench.test_days"] >= 1, "bench.test_days must be >= 1")
    need(v["bench.repeats"] >= 1, "bench.repeats must be >= 1")
    return problems


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Validated, immutable mapping of every config key to a typed value."""

    values: MappingProxyType

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and dict(self.values) == dict(other.values)

    def __hash__(self):
        return hash(self.to_text())

    @classmethod
    def from_mapping(cls, raw=None):
        """Build from ``{key: text or value}``; unknown keys and bad values are all reported."""
        values = {k.name: k.default for k in KEYS}
        problems = []
        for key, value in (raw or {}).items():
            spec = _BY_NAME.get(key)
            if spec is None:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                values[key] = spec.parse(value) if isinstance(value, str) else spec.parse(spec.fmt(value))
            except (ValueError, TypeError):
                problems.append(f"{key}: cannot parse {value!r}")
        # keys that failed to parse keep their defaults, so validation of the
        # rest still runs and every problem is reported in one go
        problems += _validate(values)
        if problems:
            raise ConfigError(problems)
        return cls(MappingProxyType(values))

    @classmethod
    def from_text(cls, text, overrides=None, ignore_prefix="manifest."):
        raw = parse_pairs(text, ignore_prefix)
        raw.update(overrides or {})
        return cls.from_mapping(raw)

    @classmethod
    def from_file(cls, path, overrides=None):
        return cls.from_text(Path(path).read_text(), overrides)

    def replace(self, **changes):
        """Copy with dotted keys given as ``section__name`` keyword arguments."""
        raw = dict(self.values)
        raw.update({k.replace("__", "."): v for k, v in changes.items()})
        return RunConfig.from_mapping(raw)

    def to_text(self):
        return "".join(f"{k.name}={k.fmt(self.values[k.name])}\n" for k in KEYS)

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    # paths with defaults under out_dir
    @property
    def out_dir(self):
        return Path(self["out_dir"])

    @property
    def archive_path(self):
        return Path(self["paths.archive"]) if self["paths.archive"] else self.out_dir / "archive.csv"

    @property
    def models_dir(self):
        return Path(self["paths.models"]) if self["paths.models"] else self.out_dir / "models"

    @property
    def schedule(self):
        return BetaSchedule.parse(self["cvae.schedule"], repeat=self["cvae.repeat"])


def parse_pairs(text, ignore_prefix=None):
    """``key=value`` lines to a dict; malformed lines raise ConfigError together."""
    raw, problems = {}, []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            problems.append(f"line {n}: expected key=value, got {line!r}")
            continue
        if ignore_prefix and key.startswith(ignore_prefix):
            continue
        raw[key] = value.strip()
    if problems:
        raise ConfigError(problems)
    return raw


def describe_keys():
    """Reference text listing every key with its default."""
    lines = []
    for k in KEYS:
        doc = f"  # {k.doc}" if k.doc else ""
        lines.append(f"{k.name}={k.fmt(k.default)}{doc}")
    return "\n".join(lines) + "\n"
