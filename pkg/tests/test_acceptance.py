"""Acceptance criteria 1 to 9, each at its stated tolerance.

Every test records a single pass/fail line, collected in the terminal summary
under "acceptance criteria".
"""

import csv
import time

import numpy as np
import pytest

from conftest import random_archive
from oracles import brute_force_analogs, crps_quadrature, numerical_gradient, relative_error
from probcast.anen import AnalogConfig, analog_indices, forecast_stds, select_analogs
from probcast.baselines import ideal_ensembles
from probcast.bench import crossover_scale, run_bench
from probcast.cli import main
from probcast.cvae import (
    DEFAULT_SCHEDULE,
    ConditionalVAE,
    CvaeHyper,
    init_model,
    kl_loss,
    loss_and_gradients,
)
from probcast.dataset import generate_synthetic
from probcast.ensemble import EnsembleSet
from probcast.neural import Mlp, backward, forward
from probcast.verify import crps_ensemble, dispersion, rank_histogram


def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(30):
        depth = 1 + trial % 4
        sizes = list(rng.integers(1, 9, depth + 1))
        act = ("tanh", "identity", "relu")[trial % 3]
        net = Mlp.init(sizes, rng, hidden_activation=act)
        for layer in net.layers:
            layer.bias += rng.normal(0, 0.5, layer.bias.shape)
        x = rng.normal(size=(4, sizes[0]))
        proj = rng.normal(size=(4, sizes[-1]))
        out, cache = forward(net, x)
        tape = backward(net, cache, proj)
        num = numerical_gradient(lambda: float(np.sum(forward(net, x)[0] * proj)), net.parameters())
        worst = max(worst, relative_error(tape.parameters(), num))
    cvae_worst = {}
    for beta in (0.0, 1.0, 4.0):
        model = init_model(CvaeHyper(), np.random.default_rng(2))
        x = rng.normal(size=(6, 5))
        c = rng.normal(size=6)
        eps = rng.standard_normal((6, model.latent_dim))
        _, enc, dec = loss_and_gradients(model, x, c, eps, beta, 300.0)
        params = model.encoder.parameters() + model.decoder.parameters()
        num = numerical_gradient(lambda: loss_and_gradients(model, x, c, eps, beta, 300.0)[0].total, params)
        cvae_worst[beta] = relative_error(enc.parameters() + dec.parameters(), num)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and max(cvae_worst.values()) < 1e-4 and elapsed < 10
    criterion(1, ok, f"MLP rel err {worst:.2e}, CVAE rel err {max(cvae_worst.values()):.2e}, {elapsed:.1f} s")


def test_criterion_2_kl_closed_form(criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        mu = rng.uniform(-1, 1, 4)
        logvar = rng.uniform(-1, 1, 4)
        sigma = np.exp(0.5 * logvar)
        eps = rng.standard_normal((1_000_000, 4))
        z = mu + sigma * eps
        # log q(z) - log p(z); the 2*pi terms cancel
        log_ratio = np.sum(-0.5 * eps**2 - 0.5 * logvar + 0.5 * z**2, axis=1)
        worst = max(worst, abs(float(log_ratio.mean()) - kl_loss(mu, logvar)))
    at_prior = kl_loss(np.zeros(4), np.zeros(4))
    criterion(2, worst < 1e-2 and at_prior == 0.0, f"max |KL - MC| = {worst:.2e}, KL(0, 0) = {at_prior!r}")


def test_criterion_3_crps_quadrature(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 26))
        members = rng.normal(0, rng.uniform(0.1, 5), m)
        obs = float(rng.normal(0, 3))
        worst = max(worst, abs(crps_ensemble(members, obs) - crps_quadrature(members, obs)))
    criterion(3, worst < 1e-6, f"max deviation from quadrature {worst:.2e}")


def test_criterion_4_calibration_flatness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    n, m = 10_000, 21
    center = rng.normal(0, 3, n)
    draws = center[:, None] + rng.standard_normal((n, m + 1))
    ens = EnsembleSet(np.zeros(n, int), np.arange(n), np.zeros(n, int), draws[:, :m], draws[:, m])
    freq = rank_histogram(ens, seed=0) / n
    mse, var = dispersion(ens)[0]
    ratio = mse / var
    elapsed = time.perf_counter() - t0
    dev = float(np.max(np.abs(freq - 0.045)))
    ok = dev <= 0.01 and abs(ratio / (22 / 21) - 1) <= 0.05 and elapsed < 30
    criterion(4, ok, f"max |bin - 0.045| = {dev:.4f}, MSE/var = {ratio:.4f} (target {22 / 21:.4f}), {elapsed:.1f} s")


def test_criterion_5_anen_oracle(criterion):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(200):
        days = int(rng.integers(21, 201))
        leads = int(rng.integers(1, 8))
        train = random_archive(rng, days=days, leads=leads, ties=bool(rng.integers(0, 2)))
        cfg = AnalogConfig(window=int(rng.integers(0, 3)), m=int(rng.integers(1, 22)))
        lead = int(rng.integers(0, leads))
        row = random_archive(rng, days=1, leads=leads).forecasts[0, 0]
        stds = forecast_stds(train)
        ens = select_analogs(train, row, 0, lead, cfg, stds)
        want, _ = brute_force_analogs(train, row, 0, lead, cfg.weights, cfg.window, cfg.m, sigma=stds.std[:, 0, lead])
        if not np.array_equal(ens.members, train.observations[0, want, lead, 0]):
            mismatches += 1
    train = random_archive(rng, days=120, leads=6)
    days, dist = analog_indices(train, train.forecasts[0, 77], 0, 3, AnalogConfig(), forecast_stds(train))
    dup_ok = days[0] == 77 and dist[0] == 0.0
    criterion(5, mismatches == 0 and dup_ok, f"{mismatches}/200 mismatches, duplicate at rank 1 with distance {dist[0]}")


def test_criterion_6_cvae_learns_law(criterion, law):
    train = generate_synthetic(law, (1, 365, 16), seed=61)
    test = generate_synthetic(law, (1, 100, 16), seed=62)
    t0 = time.perf_counter()
    est = ConditionalVAE(schedule=DEFAULT_SCHEDULE, random_state=6).fit(train)
    elapsed = time.perf_counter() - t0
    cvae = est.predict(test, seed=7)
    ideal = ideal_ensembles(law, test, seed=8)
    c_cvae = float(np.mean(crps_ensemble(cvae.members, cvae.observations)))
    c_ideal = float(np.mean(crps_ensemble(ideal.members, ideal.observations)))
    kl = est.history_[0][-1].kl
    ok = c_cvae <= 1.3 * c_ideal and kl > 0.01 and elapsed < 300
    criterion(
        6, ok, f"CRPS {c_cvae:.4f} vs ideal {c_ideal:.4f} (ratio {c_cvae / c_ideal:.3f}), final KL {kl:.3f}, {elapsed:.0f} s"
    )


def test_criterion_7_efficiency_shape(criterion):
    t0 = time.perf_counter()
    results = run_bench(scales=(1, 10, 30))
    elapsed = time.perf_counter() - t0
    get = {(r.method, r.scale): r for r in results}
    cvae_bytes = [get["cvae", s].bytes_model for s in (1, 10, 30)]
    cvae_time = [get["cvae", s].time_per_forecast for s in (1, 10, 30)]
    anen_mem = get["anen", 30].bytes_data / get["anen", 1].bytes_data
    anen_step = get["anen", 10].time_per_forecast / get["anen", 1].time_per_forecast
    bytes_ratio = max(cvae_bytes) / min(cvae_bytes)
    time_ratio = max(cvae_time) / min(cvae_time)
    cross = crossover_scale(results)
    ok = (
        bytes_ratio < 1.5
        and time_ratio < 1.5
        and abs(anen_mem - 30) < 0.5
        and 6 <= anen_step <= 14
        and np.isfinite(cross)
        and elapsed < 180
    )
    criterion(
        7,
        ok,
        f"CVAE bytes x{bytes_ratio:.2f}, time x{time_ratio:.2f}; AnEn memory x{anen_mem:.1f}, "
        f"time x{anen_step:.2f} per 10x; crossover {cross:.2f} years; {elapsed:.0f} s",
    )


@pytest.fixture(scope="module")
def demo_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    codes = [main(["demo", "-q", "--seed", "2024", "--out-dir", str(root / name)]) for name in ("a", "b")]
    return root, codes


def _deterministic_rows(path):
    with open(path, newline="") as fh:
        return [row[:4] for row in csv.reader(fh)]


@pytest.mark.slow
def test_criterion_8_demo_determinism(criterion, demo_runs):
    root, codes = demo_runs
    a, b = root / "a", root / "b"
    names = sorted(p.name for p in a.glob("*.csv"))
    differing = []
    for name in names:
        if name == "bench.csv":
            # wall-clock columns cannot repeat; the rest of the file must
            if _deterministic_rows(a / name) != _deterministic_rows(b / name):
                differing.append(name)
        elif (a / name).read_bytes() != (b / name).read_bytes():
            differing.append(name)
    ok = codes == [0, 0] and not differing and len(names) >= 8
    criterion(8, ok, f"{len(names)} CSV files compared, differing: {differing or 'none'} (bench timing columns excluded)")


@pytest.mark.slow
def test_criterion_9_comparative_conclusion(criterion, demo_runs):
    root, codes = demo_runs
    assert codes[0] == 0
    with open(root / "a" / "summary.csv", newline="") as fh:
        rows = {r[0]: r[1:] for r in csv.reader(fh)}
    assert rows["quantity"] == ["anen", "cvae"]
    crps = [float(x) for x in rows["mean_crps"]]
    freq = {}
    for method in ("anen", "cvae"):
        with open(root / "a" / f"{method}_rank_histogram.csv", newline="") as fh:
            f = np.array([float(r["frequency"]) for r in csv.DictReader(fh)])
        freq[method] = f * len(f)
    lo = min(float(f.min()) for f in freq.values())
    hi = max(float(f.max()) for f in freq.values())
    ok = crps[0] <= crps[1] and lo > 0.5 and hi < 2.0
    criterion(9, ok, f"mean CRPS AnEn {crps[0]:.4f} vs CVAE {crps[1]:.4f}; rank frequency / ideal in [{lo:.2f}, {hi:.2f}]")
