import math
import struct

import numpy as np
import pytest
from sklearn.base import clone

from oracles import numerical_gradient, relative_error
from probcast.cvae import (
    FEATURES,
    MAGIC,
    DEFAULT_SCHEDULE,
    BetaSchedule,
    ConditionalVAE,
    CvaeHyper,
    beta_at,
    generate_ensemble,
    init_model,
    kl_loss,
    load_model,
    loss_and_gradients,
    model_from_bytes,
    model_to_bytes,
    reconstruction_loss,
    reparameterize,
    sample_features,
    save_model,
    train,
    training_pairs,
)
from probcast.dataset import TWO_PI, generate_synthetic
from probcast.exceptions import CorruptFile, DimensionMismatch, EpochOutOfRange, VersionMismatch


def monte_carlo_kl(mu, logvar, n, rng):
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * rng.standard_normal((n, len(mu)))
    log_q = -0.5 * np.sum(((z - mu) / sigma) ** 2 + logvar + math.log(2 * math.pi), axis=1)
    log_p = -0.5 * np.sum(z**2 + math.log(2 * math.pi), axis=1)
    return float(np.mean(log_q - log_p))


def test_kl_at_prior_is_exactly_zero():
    assert kl_loss(np.zeros(4), np.zeros(4)) == 0.0
    assert np.all(kl_loss(np.zeros((3, 4)), np.zeros((3, 4))) == 0.0)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(10):
        mu = rng.normal(0, 1, 4)
        logvar = rng.uniform(-1, 1, 4)
        assert abs(kl_loss(mu, logvar) - monte_carlo_kl(mu, logvar, 200_000, rng)) < 2e-2


def test_kl_is_nonnegative_in_batch():
    rng = np.random.default_rng(1)
    kl = kl_loss(rng.normal(size=(100, 4)), rng.normal(size=(100, 4)))
    assert kl.shape == (100,) and np.all(kl >= 0)


def test_reparameterize_moments():
    rng = np.random.default_rng(2)
    mu, logvar = np.array([1.0, -2.0]), np.array([0.5, -1.0])
    z = reparameterize(mu, logvar, rng.standard_normal((200_000, 2)))
    np.testing.assert_allclose(z.mean(axis=0), mu, atol=0.01)
    np.testing.assert_allclose(z.var(axis=0), np.exp(logvar), rtol=0.02)


def test_reconstruction_loss():
    assert reconstruction_loss([1.0, 2.0], [1.0, 4.0]) == 2.0
    with pytest.raises(DimensionMismatch):
        reconstruction_loss(np.zeros(3), np.zeros(4))


def test_staircase_schedule_lookup():
    assert DEFAULT_SCHEDULE.total_epochs == 152
    expected = {0: 0.0, 1: 0.5, 2: 1.0, 51: 1.0, 52: 2.0, 101: 2.0, 102: 4.0, 151: 4.0}
    for epoch, beta in expected.items():
        assert beta_at(DEFAULT_SCHEDULE, epoch) == beta
    betas = DEFAULT_SCHEDULE.betas()
    assert all(betas[e] == b for e, b in expected.items())
    with pytest.raises(EpochOutOfRange):
        beta_at(DEFAULT_SCHEDULE, 152)
    with pytest.raises(EpochOutOfRange):
        beta_at(DEFAULT_SCHEDULE, -1)


def test_schedule_repeat_and_parse():
    sched = BetaSchedule.parse("0:1,1:2", repeat=2)
    assert sched.betas() == [0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
    assert beta_at(sched, 3) == 0.0
    assert BetaSchedule.parse(DEFAULT_SCHEDULE.format()) == DEFAULT_SCHEDULE
    with pytest.raises(ValueError):
        BetaSchedule(((1.0, 0),))
    with pytest.raises(ValueError):
        BetaSchedule(((-1.0, 3),))


def _model(seed=0):
    rng = np.random.default_rng(seed)
    return init_model(CvaeHyper(hidden=(6, 5)), rng, station=3)


@pytest.mark.parametrize("beta", [0.0, 1.0, 4.0])
def test_full_loss_gradient(beta):
    rng = np.random.default_rng(7)
    model = _model(1)
    x = rng.normal(size=(9, len(FEATURES)))
    c = rng.normal(size=9)
    eps = rng.standard_normal((9, model.latent_dim))
    loss, enc_tape, dec_tape = loss_and_gradients(model, x, c, eps, beta, recon_weight=3.0)
    assert loss.total == pytest.approx(loss.reconstruction + beta * loss.kl)

    def total():
        return loss_and_gradients(model, x, c, eps, beta, 3.0)[0].total

    params = model.encoder.parameters() + model.decoder.parameters()
    numeric = numerical_gradient(total, params)
    analytic = enc_tape.parameters() + dec_tape.parameters()
    assert relative_error(analytic, numeric) < 1e-6


def test_model_bytes_round_trip(tmp_path):
    model = _model(2)
    size = save_model(model, tmp_path / "m.cvae")
    back = load_model(tmp_path / "m.cvae")
    assert size == (tmp_path / "m.cvae").stat().st_size
    assert model_to_bytes(back) == model_to_bytes(model)
    assert back.station == 3 and back.features == FEATURES


def test_corrupt_files():
    data = bytearray(model_to_bytes(_model(3)))
    flipped = bytearray(data)
    flipped[len(flipped) // 2] ^= 0xFF
    with pytest.raises(CorruptFile):
        model_from_bytes(bytes(flipped))
    with pytest.raises(CorruptFile):
        model_from_bytes(bytes(data[:-10]))
    with pytest.raises(CorruptFile):
        model_from_bytes(b"NOTAMODEL" + bytes(data[9:]))
    with pytest.raises(CorruptFile):
        model_from_bytes(bytes(data) + b"\x00")
    bad_version = bytes(data[: len(MAGIC)]) + struct.pack("<I", 99) + bytes(data[len(MAGIC) + 4 :])
    with pytest.raises(VersionMismatch):
        model_from_bytes(bad_version)


def test_fifty_station_bundle_is_small():
    model = init_model(CvaeHyper(), np.random.default_rng(0))
    assert 50 * len(model_to_bytes(model)) < 7 * 1024 * 1024


def test_generated_direction_is_wrapped():
    model = _model(4)
    ens = generate_ensemble(model, 10.0, m=200, seed=1)
    assert ens.members.shape == (200,)
    feats = sample_features(model, [5.0, 10.0], 50, np.random.default_rng(0))
    assert feats.shape == (2, 50, 4)
    assert np.all((feats[..., 1] >= 0) & (feats[..., 1] < TWO_PI))


def test_training_pairs_skip_missing(law):
    archive = generate_synthetic(law, (1, 20, 6), seed=0, missing_fraction=0.25)
    x, c = training_pairs(archive, 0)
    n_ok = np.isfinite(archive.observations[0][:, archive.active_leads, 0]).sum()
    assert x.shape == (n_ok, 5) and c.shape == (n_ok,)
    np.testing.assert_allclose(x[:, 1] ** 2 + x[:, 2] ** 2, 1.0)


def test_training_is_deterministic_and_reduces_loss(law):
    archive = generate_synthetic(law, (1, 60, 8), seed=0)
    sched = BetaSchedule.parse("0:2,1:6")
    a, hist = train(archive, 0, schedule=sched, seed=5)
    b, _ = train(archive, 0, schedule=sched, seed=5)
    assert model_to_bytes(a) == model_to_bytes(b)
    assert len(hist) == 8
    assert hist[-1].mse < hist[0].mse
    assert [h.beta for h in hist] == sched.betas()


def test_estimator_api(law):
    archive = generate_synthetic(law, (2, 30, 6), seed=1)
    est = ConditionalVAE(schedule=BetaSchedule.parse("1:2"), n_members=5, random_state=3)
    assert clone(est).get_params()["n_members"] == 5
    est.fit(archive)
    ens = est.predict(archive)
    assert ens.m == 5 and len(ens) == 2 * 30 * 2 and ens.method == "cvae"
    np.testing.assert_array_equal(est.predict(archive).members, ens.members)
    assert not np.array_equal(est.predict(archive, seed=4).members, ens.members)
    assert est.model_bytes == sum(len(model_to_bytes(m)) for m in est.models_)
    with pytest.raises(DimensionMismatch):
        est.predict(generate_synthetic(law, (3, 2, 6), seed=2))


def test_model_size_does_not_depend_on_data(law):
    sizes = set()
    for days in (20, 200):
        archive = generate_synthetic(law, (1, days, 6), seed=days)
        model, _ = train(archive, schedule=BetaSchedule.parse("1:1"))
        sizes.add(len(model_to_bytes(model)))
    assert len(sizes) == 1
