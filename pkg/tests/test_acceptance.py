"""Acceptance suite: one test (and one PASS/FAIL line) per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s``.  Setting
``SFML_ARTIFACTS=<dir>`` keeps the comparison reports, CSVs and SVGs.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from _oracles import grad_check, numeric_logdet, quadrature_mass, random_model
from _report import verdict

from sfml import container
from sfml.cli import main as cli_main
from sfml.data import PairDataset, build_pairs
from sfml.flow import flow_inverse, flow_sample
from sfml.metrics import compare, rollout_ensemble
from sfml.systems import get_system, path_rng, scalar_ou, simulate_batch
from sfml.train import TrainConfig, cyclic_lr, train

DESK_BATCH = 4096


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    env = os.environ.get("SFML_ARTIFACTS")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("acceptance")


def _fmt(values, spec="{:.4f}"):
    return "[" + ", ".join(spec.format(v) for v in values) + "]"


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_1_gradients():
    start = time.perf_counter()
    archs = [(1, 1, True), (1, 2, True), (1, 5, True),
             (2, 1, True), (2, 2, True), (2, 5, True),
             (2, 1, False), (2, 2, False), (2, 5, False)]
    rng = np.random.default_rng(2024)
    worst = {}
    for dim, K, ar in archs:
        w = 0.0
        for trial in range(20):
            model = random_model(dim, K, ar, seed=int(rng.integers(1 << 30)))
            # x1 drawn from the model itself keeps the loss O(1), away from the
            # regime where central differences lose digits to cancellation
            x0 = model.normalization.invert(rng.normal(size=(8, dim)))
            x1 = flow_sample(model, x0, rng.standard_normal((8, dim)))
            x0n, x1n = model.normalization.apply(x0), model.normalization.apply(x1)
            w = max(w, grad_check(model, x0n, x1n, rng, n_coords=8))
        worst[(dim, K, "made" if ar and dim > 1 else "hyper")] = w
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok, line = verdict(1, "gradient correctness", [
        ("fd agreement", top <= 1e-5, f"worst rel err {top:.2e} over {len(archs)} archs x 20 checks (tol 1e-5)"),
    ], elapsed, 30)
    assert ok, line


# ---------------------------------------------------------------------------
# 2. flow exactness


def test_criterion_2_flow_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    round_trip = 0.0
    for dim, K, ar in [(1, 1, True), (1, 5, True), (2, 1, True), (2, 5, True), (2, 5, False)]:
        model = random_model(dim, K, ar, seed=K + 10 * dim)
        x0 = rng.normal(size=(10_000, dim))
        z = rng.standard_normal((10_000, dim))
        back, _ = flow_inverse(model, x0, flow_sample(model, x0, z))
        round_trip = max(round_trip, float(np.abs(back - z).max()))
    logdet_err = 0.0
    for K in (1, 2, 5):
        model = random_model(2, K, seed=100 + K)
        for _ in range(5):
            x0 = rng.normal(size=2)
            x1 = flow_sample(model, x0, rng.standard_normal(2))
            num, _ = numeric_logdet(model, x0, x1)
            logdet_err = max(logdet_err, abs(num - flow_inverse(model, x0, x1)[1]))
    masses = []
    for i, x0 in enumerate(rng.normal(size=(10, 1))):
        model = random_model(1, 5, seed=200 + i)
        masses.append(quadrature_mass(model, x0))
    mass_err = max(abs(m - 1) for m in masses)
    elapsed = time.perf_counter() - start
    ok, line = verdict(2, "flow exactness", [
        ("round trip", round_trip < 1e-10, f"max |z - z'| {round_trip:.1e} (tol 1e-10)"),
        ("log-det", logdet_err < 1e-6, f"max |analytic - numeric| {logdet_err:.1e} (tol 1e-6)"),
        ("density mass", mass_err < 1e-3, f"max |mass - 1| {mass_err:.1e} at 10 x0 (tol 1e-3)"),
    ], elapsed, 60)
    assert ok, line


# ---------------------------------------------------------------------------
# 3. synthetic conditional Gaussian


def test_criterion_3_conditional_gaussian():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    M, sd = 10_000, 0.05
    x0 = rng.uniform(-1.0, 1.0, size=(M, 1))
    x1 = 0.8 * x0 + 0.1 + sd * rng.standard_normal((M, 1))
    ds = PairDataset(x0, x1, lag=0.01, system="gaussian", seed=3)
    cfg = TrainConfig(iterations=5000, batch_size=DESK_BATCH, checkpoint_every=250, seed=0)
    model, report = train(ds, cfg)
    optimum = 0.5 * math.log(2 * math.pi * math.e * sd**2)
    gap = report.best_val_nll - optimum
    grid = np.repeat(np.linspace(-1, 1, 201), 100)[:, None]
    samples = flow_sample(model, grid, np.random.default_rng(4).standard_normal(grid.shape))
    slope = np.polyfit(grid[:, 0], samples[:, 0], 1)[0]
    elapsed = time.perf_counter() - start
    ok, line = verdict(3, "conditional-Gaussian recovery", [
        ("val NLL", abs(gap) <= 0.05, f"{report.best_val_nll:.4f} vs optimum {optimum:.4f} (gap {gap:+.4f}, tol 0.05)"),
        ("slope", abs(slope - 0.8) <= 0.02, f"{slope:.4f} (0.8 +- 0.02)"),
    ], elapsed, 300)
    assert ok, line


# ---------------------------------------------------------------------------
# 4. triad effective dynamics


@pytest.mark.slow
def test_criterion_4_triad_effective_ou(artifacts):
    start = time.perf_counter()
    lag = 0.01
    ds = build_pairs(get_system("triad"), 10_000, T=1.0, lag=lag, seed=0)
    cfg = TrainConfig(iterations=20_000, batch_size=DESK_BATCH, checkpoint_every=1000, seed=0)
    model, report = train(ds, cfg)
    model.save(artifacts / "triad_model")
    report.to_csv(artifacts / "triad_train.csv")
    factor = math.exp(-lag / 2)
    step_sd = math.sqrt((1 - math.exp(-lag)) / 3)
    rng = np.random.default_rng(1)
    factors, sds, zero_mean = [], [], None
    for x0 in (-1.0, 0.0, 1.0, 2.0):
        out = flow_sample(model, np.full((100_000, 1), x0), rng.standard_normal((100_000, 1)))[:, 0]
        sds.append(out.std())
        if x0 == 0.0:
            zero_mean = out.mean()
        else:
            factors.append(out.mean() / x0)
    paths = rollout_ensemble(model, [1.0], 500, 10_000, seed=2)
    t = np.arange(501) * lag
    mean_dev = float(np.abs(paths[:, :, 0].mean(axis=0) - np.exp(-t / 2)).max())
    sd_T5 = float(paths[:, -1, 0].std())
    sd_target = math.sqrt(1 / 3)
    elapsed = time.perf_counter() - start
    ok, line = verdict(4, "triad effective dynamics", [
        ("mean factor", all(abs(f / factor - 1) <= 0.02 for f in factors),
         f"x0=-1,1,2 -> {_fmt(factors, '{:.5f}')} vs {factor:.6f} +- 2%"),
        ("mean at x0=0", abs(zero_mean) <= 0.02 * factor, f"{zero_mean:+.5f} (|.| <= {0.02 * factor:.4f})"),
        ("step STD", all(abs(s / step_sd - 1) <= 0.10 for s in sds),
         f"{_fmt(sds, '{:.5f}')} vs {step_sd:.5f} +- 10%"),
        ("rollout mean", mean_dev <= 0.10, f"max |mean - e^(-t/2)| {mean_dev:.4f} (tol 0.10)"),
        ("STD at T=5", abs(sd_T5 / sd_target - 1) <= 0.10, f"{sd_T5:.4f} vs {sd_target:.4f} +- 10%"),
    ], elapsed, 20 * 60)
    assert ok, line


# ---------------------------------------------------------------------------
# 5. skew-product benchmark


@pytest.mark.slow
def test_criterion_5_skew_product(artifacts):
    start = time.perf_counter()
    spec = get_system("ex1")
    ds = build_pairs(spec, 40_000, T=1.0, seed=0)
    cfg = TrainConfig(iterations=30_000, batch_size=DESK_BATCH, checkpoint_every=1000, seed=0)
    model, report = train(ds, cfg)
    model.save(artifacts / "ex1_model")
    report.to_csv(artifacts / "ex1_train.csv")
    rep = compare(model, spec, np.array([1.5]), 4.0, 10_000, [1.0, 2.0, 3.0, 4.0], seed=0)
    rep.write(artifacts / "ex1_compare")
    s = rep.summary()
    ks = [rep.ks[t][0] for t in (1.0, 2.0, 3.0, 4.0)]
    elapsed = time.perf_counter() - start
    ok, line = verdict(5, "skew-product benchmark", [
        ("mean", s["max_mean_diff_over_range"][0] <= 0.10,
         f"max |dmean| / truth range {s['max_mean_diff_over_range'][0]:.4f} (tol 0.10)"),
        ("STD", s["max_rel_std_diff"][0] <= 0.15, f"max pointwise rel diff {s['max_rel_std_diff'][0]:.4f} (tol 0.15)"),
        ("KS", max(ks) < 0.08, f"t=1..4 -> {_fmt(ks)} (< 0.08)"),
    ], elapsed, 45 * 60)
    assert ok, line


# ---------------------------------------------------------------------------
# 6. distribution checkpoints for the two-slow-variable systems


@pytest.mark.slow
@pytest.mark.parametrize("name, x0, T, checkpoints", [
    ("ex3", [1.5, 1.0], 8.0, [2.0, 4.0, 6.0, 8.0]),
    ("ex4", [1.0, 1.0], 16.0, [4.0, 8.0, 12.0, 16.0]),
])
def test_criterion_6_distribution_checkpoints(artifacts, name, x0, T, checkpoints):
    start = time.perf_counter()
    spec = get_system(name)
    ds = build_pairs(spec, 30_000, T=1.0, seed=0)
    cfg = TrainConfig(iterations=30_000, batch_size=DESK_BATCH, checkpoint_every=1000, seed=0)
    model, report = train(ds, cfg)
    model.save(artifacts / f"{name}_model")
    report.to_csv(artifacts / f"{name}_train.csv")
    rep = compare(model, spec, np.array(x0), T, 10_000, checkpoints, seed=0)
    rep.write(artifacts / f"{name}_compare")
    table = {t: rep.ks[t] for t in checkpoints}
    worst = max(max(v) for v in table.values())
    detail = "; ".join(f"t={t:g}: {_fmt(v)}" for t, v in table.items())
    elapsed = time.perf_counter() - start
    ok, line = verdict(6, f"distribution checkpoints {name}", [
        ("KS", worst <= 0.10, f"{detail} (<= 0.10)"),
    ], elapsed, 90 * 60)
    assert ok, line


# ---------------------------------------------------------------------------
# 7. infrastructure


def test_criterion_7_infrastructure(tmp_path):
    start = time.perf_counter()
    checks = []

    # Euler-Maruyama on dx = -x dt + sqrt(2) dW from x0 = 1, t = 1
    n = 10_000
    _, slow, _ = simulate_batch(scalar_ou(), np.tile([1.0, 0.0], (n, 1)), 1.0,
                                rngs=[path_rng(77, i) for i in range(n)])
    x = slow[:, -1, 0]
    mean_z = (x.mean() - math.exp(-1)) / (x.std() / math.sqrt(n))
    var_z = (x.var() - (1 - math.exp(-2))) / (x.var() * math.sqrt(2 / (n - 1)))
    checks.append(("EM moments", abs(mean_z) < 3 and abs(var_z) < 3,
                   f"mean {mean_z:+.2f} SE, variance {var_z:+.2f} SE (within 3)"))

    cfg = TrainConfig()
    lrs = np.array([cyclic_lr(i, cfg) for i in range(0, 300_001, 3)])
    peak = cyclic_lr(10_000, cfg)
    checks.append(("CLR", cyclic_lr(0, cfg) == 3e-4 and lrs.min() >= 3e-4 and lrs.max() <= 5e-4
                   and abs(peak - (3e-4 + 1.8097e-4)) < 1e-8,
                   f"lr(0)={cyclic_lr(0, cfg)!r}, range [{lrs.min():.3e}, {lrs.max():.3e}], lr(1e4)={peak:.5e}"))

    ds = build_pairs(get_system("ex3"), 500, T=0.1, seed=1)
    ds.save(tmp_path / "a.pairs")
    PairDataset.load(tmp_path / "a.pairs").save(tmp_path / "b.pairs")
    same = container.payload_bytes(tmp_path / "a.pairs") == container.payload_bytes(tmp_path / "b.pairs")
    checks.append(("dataset round trip", same, "byte-identical payload" if same else "payload differs"))

    # end-to-end: generate -> train -> rollout -> validate, then replay each sidecar
    d = tmp_path / "run"
    d.mkdir()
    steps = [
        ["generate", "--system", "ex1", "--pairs", "2000", "--T", "1.0", "--seed", "7", "--out", str(d / "ex1.pairs")],
        ["train", "--data", str(d / "ex1.pairs"), "--iters", "200", "--batch", "256", "--checkpoint-every", "50",
         "--seed", "1", "--out", str(d / "ex1.model")],
        ["rollout", "--model", str(d / "ex1.model"), "--x0", "1.5", "--T", "1.0", "--paths", "20", "--seed", "3",
         "--out", str(d / "paths.csv")],
        ["validate", "--model", str(d / "ex1.model"), "--system", "ex1", "--x0", "1.5", "--T", "0.5",
         "--ensemble", "500", "--checkpoints", "0.5", "--seed", "4", "--out", str(d / "val")],
    ]
    codes = [cli_main(argv) for argv in steps]
    sidecars = [d / "ex1.pairs.provenance.json", d / "ex1.model" / "provenance.json",
                d / "paths.csv.provenance.json", d / "val" / "provenance.json"]
    r = tmp_path / "replay"
    r.mkdir()
    targets = [r / "ex1.pairs", r / "ex1.model", r / "paths.csv", r / "val"]
    codes += [cli_main(["replay", str(s), "--out", str(t)]) for s, t in zip(sidecars, targets)]
    identical = [
        container.payload_bytes(d / "ex1.pairs") == container.payload_bytes(r / "ex1.pairs"),
        all(container.payload_bytes(d / "ex1.model" / f"layer_{k}.bin")
            == container.payload_bytes(r / "ex1.model" / f"layer_{k}.bin") for k in range(5)),
        (d / "paths.csv").read_bytes() == (r / "paths.csv").read_bytes(),
        (d / "val" / "compare_curve_x1.csv").read_bytes() == (r / "val" / "compare_curve_x1.csv").read_bytes(),
    ]
    checks.append(("replay", all(c == 0 for c in codes) and all(identical),
                   f"exit codes {codes}, identical payloads {identical}"))

    elapsed = time.perf_counter() - start
    ok, line = verdict(7, "infrastructure", checks, elapsed, 120)
    assert ok, line


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
