"""Conditional variational autoencoder for forecast post-processing.

The encoder maps an observation vector ``x`` and the forecast condition ``c``
to the mean and log-variance of a diagonal Gaussian over the latent ``z``; the
decoder maps ``(z, c)`` back to ``x``. Generation draws ``z ~ N(0, I)`` and
decodes, so predicting needs only the decoder weights and not the archive.

Observation features, in order: wind speed, sin and cos of wind direction,
temperature, pressure. The condition is the forecast wind speed. Features and
condition are standardized with statistics stored in the model.
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_archive, check_positive_int, check_seed
from .dataset import ForecastArchive, population_moments, wrap_direction
from .ensemble import EnsembleForecast, EnsembleSet
from .exceptions import (
    CorruptFile,
    DimensionMismatch,
    EpochOutOfRange,
    NonFiniteLoss,
    VersionMismatch,
)
from .neural import AdamState, Dense, Mlp, adam_step, backward, forward

logger = logging.getLogger(__name__)

FEATURES = ("Ws", "sinWd", "cosWd", "T", "P")
CONDITION = "Ws"
STAIRCASE_SEGMENTS = ((0.0, 1), (0.5, 1), (1.0, 50), (2.0, 50), (4.0, 50))


# -- loss terms --------------------------------------------------------------


def kl_loss(mu, logvar):
    """KL divergence from N(mu, diag(exp(logvar))) to N(0, I).

    ``-0.5 * sum(1 + logvar - mu**2 - exp(logvar))`` over the last axis; a
    batch of shape (n, J) gives n values.
    """
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    kl = -0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar), axis=-1)
    # exact zero at the prior; clip rounding noise below zero
    return np.maximum(kl, 0.0) + 0.0 if np.ndim(kl) else max(float(kl), 0.0) + 0.0


def reparameterize(mu, logvar, eps):
    return np.asarray(mu) + np.exp(0.5 * np.asarray(logvar)) * np.asarray(eps)


def reconstruction_loss(x, x_hat):
    """Mean squared error over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DimensionMismatch(f"{x.shape} vs {x_hat.shape}")
    d = x_hat - x
    out = np.mean(d * d, axis=-1)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class LossBreakdown:
    """One loss evaluation. ``total = reconstruction + beta * kl``.

    ``reconstruction`` is the weighted term entering the objective;
    ``mse`` is the plain mean squared error behind it.
    """

    reconstruction: float
    kl: float
    beta: float
    mse: float

    @property
    def total(self):
        return self.reconstruction + self.beta * self.kl


# -- beta schedule -----------------------------------------------------------


@dataclass(frozen=True)
class BetaSchedule:
    """Piecewise-constant KL weight: ``segments`` of ``(beta, n_epochs)``.

    The default staircase is 0, 0.5 (one epoch each), then 1, 2 and 4 (fifty
    epochs each). ``repeat > 1`` cycles the staircase.
    """

    segments: tuple = STAIRCASE_SEGMENTS
    repeat: int = 1

    def __post_init__(self):
        segs = tuple((float(b), int(n)) for b, n in self.segments)
        if not segs:
            raise ValueError("a schedule needs at least one segment")
        for b, n in segs:
            if b < 0 or not math.isfinite(b):
                raise ValueError(f"beta must be finite and >= 0, got {b}")
            if n < 1:
                raise ValueError(f"segment epoch counts must be >= 1, got {n}")
        check_positive_int(self.repeat, "repeat")
        object.__setattr__(self, "segments", segs)

    @property
    def total_epochs(self):
        return self.repeat * sum(n for _, n in self.segments)

    def betas(self):
        return [b for _ in range(self.repeat) for b, n in self.segments for _ in range(n)]

    @classmethod
    def parse(cls, text, repeat=1):
        """Parse ``"0:1,0.5:1,1:50"`` style text."""
        segs = []
        for part in text.split(","):
            b, n = part.split(":")
            segs.append((float(b), int(n)))
        return cls(tuple(segs), repeat)

    def format(self):
        return ",".join(f"{b:g}:{n}" for b, n in self.segments)


DEFAULT_SCHEDULE = BetaSchedule()


def beta_at(schedule: BetaSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    epoch %= schedule.total_epochs // schedule.repeat
    for beta, n in schedule.segments:
        if epoch < n:
            return beta
        epoch -= n
    raise AssertionError("unreachable")


# -- model ---------------------------------------------------------------------


@dataclass
class CvaeHyper:
    latent_dim: int = 4
    hidden: tuple = (32, 32)
    batch_size: int = 64
    learning_rate: float = 1e-3
    recon_weight: float = 300.0
    activation: str = "tanh"

    def __post_init__(self):
        check_positive_int(self.latent_dim, "latent_dim")
        check_positive_int(self.batch_size, "batch_size")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.learning_rate <= 0 or self.recon_weight <= 0:
            raise ValueError("learning_rate and recon_weight must be positive")


@dataclass(eq=False)
class CvaeModel:
    """Trained per-station encoder/decoder pair plus standardization statistics."""

    encoder: Mlp
    decoder: Mlp
    latent_dim: int
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    condition_mean: float
    condition_scale: float
    station: int = 0
    features: tuple = FEATURES
    condition: str = CONDITION

    def __post_init__(self):
        J = self.latent_dim
        nf = len(self.features)
        if self.encoder.in_dim != nf + 1 or self.encoder.out_dim != 2 * J:
            raise DimensionMismatch(f"encoder {self.encoder} does not map {nf}+1 -> 2*{J}")
        if self.decoder.in_dim != J + 1 or self.decoder.out_dim != nf:
            raise DimensionMismatch(f"decoder {self.decoder} does not map {J}+1 -> {nf}")
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64)

    @property
    def n_parameters(self):
        return self.encoder.n_parameters + self.decoder.n_parameters

    def normalize_condition(self, c):
        return (np.asarray(c, dtype=np.float64) - self.condition_mean) / self.condition_scale

    def decode(self, z, c_norm):
        """Decoder output in normalized feature space; ``z`` (n, J), ``c_norm`` (n,)."""
        inp = np.column_stack([z, np.asarray(c_norm).reshape(-1)])
        out, _ = forward(self.decoder, inp)
        return out

    def to_physical(self, features_norm):
        """Normalized features (..., 5) to archive variables (..., 4): Ws, Wd, T, P."""
        f = features_norm * self.feature_scale + self.feature_mean
        wd = wrap_direction(np.arctan2(f[..., 1], f[..., 2]))
        return np.stack([f[..., 0], wd, f[..., 3], f[..., 4]], axis=-1)


def _scale(std):
    return np.where(std > 0, std, 1.0)


def training_pairs(archive: ForecastArchive, station: int):
    """Observation features (n, 5) and forecast wind speed (n,) of usable cells."""
    leads = archive.active_leads
    ob = archive.observations[station][:, leads]  # (D, La, V)
    fc = archive.forecasts[station][:, leads]
    wd = ob[..., archive.var_index("Wd")]
    x = np.stack(
        [
            ob[..., archive.var_index("Ws")],
            np.sin(wd),
            np.cos(wd),
            ob[..., archive.var_index("T")],
            ob[..., archive.var_index("P")],
        ],
        axis=-1,
    ).reshape(-1, len(FEATURES))
    c = fc[..., archive.var_index(CONDITION)].reshape(-1)
    keep = np.all(np.isfinite(x), axis=1) & np.isfinite(c)
    return x[keep], c[keep]


def loss_and_gradients(model: CvaeModel, x, c, eps, beta, recon_weight):
    """Batch loss and exact gradients through the reparameterized sample.

    ``x`` (n, 5) and ``c`` (n,) are normalized; ``eps`` (n, J) are the standard
    normal draws. Returns ``(LossBreakdown, encoder_tape, decoder_tape)``.
    """
    n = x.shape[0]
    J = model.latent_dim
    c = np.asarray(c).reshape(n, 1)
    enc_out, enc_cache = forward(model.encoder, np.hstack([x, c]))
    mu, logvar = enc_out[:, :J], enc_out[:, J:]
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    x_hat, dec_cache = forward(model.decoder, np.hstack([z, c]))

    resid = x_hat - x
    mse = float(np.mean(resid * resid))
    kl = float(np.mean(-0.5 * np.sum(1.0 + logvar - mu * mu - sigma * sigma, axis=1)))
    loss = LossBreakdown(recon_weight * mse, kl, float(beta), mse)

    d_xhat = recon_weight * 2.0 * resid / resid.size
    dec_tape = backward(model.decoder, dec_cache, d_xhat)
    dz = dec_tape.input_grad[:, :J]
    d_mu = dz + beta * mu / n
    d_logvar = dz * eps * 0.5 * sigma + beta * 0.5 * (sigma * sigma - 1.0) / n
    enc_tape = backward(model.encoder, enc_cache, np.hstack([d_mu, d_logvar]))
    return loss, enc_tape, dec_tape


def init_model(hyper: CvaeHyper, rng, station=0, feature_mean=None, feature_scale=None, condition_mean=0.0, condition_scale=1.0):
    nf = len(FEATURES)
    J = hyper.latent_dim
    enc = Mlp.init([nf + 1, *hyper.hidden, 2 * J], rng, hyper.activation)
    dec = Mlp.init([J + 1, *hyper.hidden, nf], rng, hyper.activation)
    return CvaeModel(
        enc,
        dec,
        J,
        np.zeros(nf) if feature_mean is None else feature_mean,
        np.ones(nf) if feature_scale is None else feature_scale,
        float(condition_mean),
        float(condition_scale),
        int(station),
    )


def train(archive: ForecastArchive, station=0, hyper=None, schedule: BetaSchedule = DEFAULT_SCHEDULE, seed=0):
    """Fit one station's CVAE.

    Weight initialization, minibatch shuffling and latent noise all draw from
    one generator seeded by ``seed``. The optimizer state carries across
    schedule segments.

    Returns
    -------
    model : CvaeModel
    history : list of LossBreakdown
        Batch-size-weighted epoch averages.
    """
    archive = check_archive(archive)
    hyper = hyper or CvaeHyper()
    rng = check_seed(seed)
    x_raw, c_raw = training_pairs(archive, station)
    if len(c_raw) == 0:
        raise ValueError(f"station {station} has no usable training cells")
    f_mean, f_std = population_moments(x_raw, axis=0)
    c_mean, c_std = population_moments(c_raw, axis=0)
    model = init_model(hyper, rng, station, f_mean, _scale(f_std), c_mean, float(_scale(c_std)))
    x = (x_raw - model.feature_mean) / model.feature_scale
    c = model.normalize_condition(c_raw)

    opt = dict(learning_rate=hyper.learning_rate)
    enc_state = AdamState.for_network(model.encoder, **opt)
    dec_state = AdamState.for_network(model.decoder, **opt)
    n, J, bs = len(c), hyper.latent_dim, hyper.batch_size
    history = []
    for epoch, beta in enumerate(schedule.betas()):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, bs)):
            idx = perm[start : start + bs]
            eps = rng.standard_normal((len(idx), J))
            loss, enc_tape, dec_tape = loss_and_gradients(model, x[idx], c[idx], eps, beta, hyper.recon_weight)
            if not math.isfinite(loss.total):
                raise NonFiniteLoss(epoch, b, f"(reconstruction={loss.reconstruction}, kl={loss.kl})")
            adam_step(model.encoder, enc_tape, enc_state)
            adam_step(model.decoder, dec_tape, dec_state)
            sums += len(idx) * np.array([loss.reconstruction, loss.kl, loss.mse])
        r, k, m = sums / n
        history.append(LossBreakdown(r, k, beta, m))
        logger.debug("station %d epoch %d beta=%g R=%.4f KL=%.4f", station, epoch, beta, r, k)
    return model, history


def sample_features(model: CvaeModel, conditions, m, rng):
    """Decoded members for each condition: array (n, m, 4) of Ws, Wd, T, P."""
    rng = check_seed(rng)
    conditions = np.asarray(conditions, dtype=np.float64).reshape(-1)
    n = len(conditions)
    z = rng.standard_normal((n * m, model.latent_dim))
    c = np.repeat(model.normalize_condition(conditions), m)
    out = model.decode(z, c)
    return model.to_physical(out).reshape(n, m, 4)


def generate_ensemble(model: CvaeModel, condition, m=21, seed=0, station=None, day=-1, lead=-1):
    """``m`` members for one forecast wind speed, each from a fresh ``z ~ N(0, I)``."""
    check_positive_int(m, "m")
    members = sample_features(model, [condition], m, seed)[0, :, 0]
    return EnsembleForecast(model.station if station is None else station, day, lead, CONDITION, members)


# -- persistence ----------------------------------------------------------------

MAGIC = b"PRBCVAE\x00"
FORMAT_VERSION = 1
_ACT_CODES = {"identity": 0, "tanh": 1, "relu": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def model_to_bytes(model: CvaeModel) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<IIi", FORMAT_VERSION, model.latent_dim, model.station),
        struct.pack("<I", len(model.features)),
        *(_pack_str(f) for f in model.features),
        _pack_str(model.condition),
    ]
    for net in (model.encoder, model.decoder):
        parts.append(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            parts.append(struct.pack("<IIB", layer.out_dim, layer.in_dim, _ACT_CODES[layer.activation]))
    parts.append(model.feature_mean.astype("<f8").tobytes())
    parts.append(model.feature_scale.astype("<f8").tobytes())
    parts.append(struct.pack("<dd", model.condition_mean, model.condition_scale))
    for net in (model.encoder, model.decoder):
        for layer in net.layers:
            parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptFile(self.pos, "unexpected end of file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFile(self.pos - n, "invalid UTF-8 name") from None

    def floats(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def model_from_bytes(data: bytes) -> CvaeModel:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptFile(0, "bad magic")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, expected {FORMAT_VERSION}")
    latent_dim, station = r.unpack("<Ii")
    (nf,) = r.unpack("<I")
    features = tuple(r.string() for _ in range(nf))
    condition = r.string()
    shapes = []
    for _ in range(2):
        (n_layers,) = r.unpack("<I")
        layers = []
        for _ in range(n_layers):
            at = r.pos
            out_dim, in_dim, code = r.unpack("<IIB")
            if code not in _ACT_NAMES:
                raise CorruptFile(at, f"unknown activation code {code}")
            layers.append((out_dim, in_dim, _ACT_NAMES[code]))
        shapes.append(layers)
    f_mean = r.floats(nf)
    f_scale = r.floats(nf)
    c_mean, c_scale = r.unpack("<dd")
    nets = []
    for layers in shapes:
        dense = []
        for out_dim, in_dim, act in layers:
            w = r.floats(out_dim * in_dim).reshape(out_dim, in_dim)
            b = r.floats(out_dim)
            dense.append((w, b, act))
        nets.append(dense)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CorruptFile(r.pos, "trailing bytes")
    if zlib.crc32(data[:body_end]) != crc:
        raise CorruptFile(body_end, "checksum mismatch")
    try:
        enc, dec = (Mlp([Dense(w, b, a) for w, b, a in dense]) for dense in nets)
        return CvaeModel(enc, dec, latent_dim, f_mean, f_scale, c_mean, c_scale, station, features, condition)
    except DimensionMismatch as exc:
        raise CorruptFile(0, str(exc)) from None


def save_model(model: CvaeModel, path):
    data = model_to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path) -> CvaeModel:
    return model_from_bytes(Path(path).read_bytes())


# -- estimator ---------------------------------------------------------------


class ConditionalVAE(BaseEstimator):
    """One CVAE per station, conditioned on the forecast wind speed.

    Parameters
    ----------
    latent_dim : int, default 4
    hidden_layer_sizes : tuple of int, default (32, 32)
        Widths of both encoder and decoder hidden layers.
    batch_size : int, default 64
    learning_rate : float, default 1e-3
    schedule : BetaSchedule, default the 152-epoch staircase
    recon_weight : float, default 300
        Multiplier on the mean squared error in the objective. Sets the
        trade-off against the KL term (see README).
    n_members : int, default 21
    random_state : int, default 0
    """

    def __init__(
        self,
        latent_dim=4,
        hidden_layer_sizes=(32, 32),
        batch_size=64,
        learning_rate=1e-3,
        schedule=DEFAULT_SCHEDULE,
        recon_weight=300.0,
        n_members=21,
        random_state=0,
    ):
        self.latent_dim = latent_dim
        self.hidden_layer_sizes = hidden_layer_sizes
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.recon_weight = recon_weight
        self.n_members = n_members
        self.random_state = random_state

    def _hyper(self):
        return CvaeHyper(self.latent_dim, tuple(self.hidden_layer_sizes), self.batch_size, self.learning_rate, self.recon_weight)

    def fit(self, X, y=None):
        X = check_archive(X)
        hyper = self._hyper()
        seeds = np.random.SeedSequence(self.random_state).spawn(X.n_stations)
        self.models_, self.history_ = [], []
        for s in range(X.n_stations):
            model, hist = train(X, s, hyper, self.schedule, np.random.default_rng(seeds[s]))
            self.models_.append(model)
            self.history_.append(hist)
            logger.info("trained station %d: R=%.4f KL=%.4f", s, hist[-1].reconstruction, hist[-1].kl)
        return self

    @classmethod
    def from_models(cls, models, **params):
        est = cls(**params)
        est.models_ = list(models)
        est.history_ = [[] for _ in est.models_]
        return est

    def sample(self, X, seed=None):
        """All-variable members, shape (stations, days, active_leads, m, 4)."""
        check_is_fitted(self, "models_")
        X = check_archive(X)
        if X.n_stations != len(self.models_):
            raise DimensionMismatch(f"{X.n_stations} stations but {len(self.models_)} models")
        seed = self.random_state if seed is None else seed
        leads = X.active_leads
        k = X.var_index(CONDITION)
        out = np.empty((X.n_stations, X.n_days, len(leads), self.n_members, 4))
        for s, model in enumerate(self.models_):
            rng = np.random.default_rng([int(seed), s])
            cond = X.forecasts[s][:, leads, k]
            out[s] = sample_features(model, cond.ravel(), self.n_members, rng).reshape(
                X.n_days, len(leads), self.n_members, 4
            )
        return out

    def predict(self, X, seed=None) -> EnsembleSet:
        """Wind-speed ensembles for every (station, day, non-excluded lead)."""
        members = self.sample(X, seed)[..., 0]
        S, T, La, m = members.shape
        leads = X.active_leads
        station, day, lead = np.meshgrid(np.arange(S), np.arange(T), leads, indexing="ij")
        obs = X.observations[:, :, leads, X.var_index(CONDITION)]
        return EnsembleSet(
            station.ravel(), day.ravel() + X.first_day, lead.ravel(), members.reshape(-1, m), obs.ravel(), CONDITION, "cvae"
        )

    @property
    def model_bytes(self):
        check_is_fitted(self, "models_")
        return sum(len(model_to_bytes(m)) for m in self.models_)
