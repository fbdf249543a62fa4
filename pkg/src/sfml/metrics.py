"""Autoregressive rollouts and ensemble comparison against ground truth."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import svg
from .errors import RolloutDiverged, ShapeError
from .flow import FlowModel, flow_sample
from .systems import DT_FINE, LAG, PathNoise, SystemSpec, Trajectory, iterate_paths, path_rng, sample_fast_stationary

RESERVOIR_CAP = 100_000


def derive_seed(seed: int, tag: int) -> int:
    """Deterministic child seed for an independent sub-stream."""
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(tag),)).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# rollouts


def _lag_of(model: FlowModel) -> float:
    return model.lag if model.lag else LAG


def rollout(model: FlowModel, x0, n_steps: int, rng=None) -> Trajectory:
    """Iterate the learned one-step map with fresh base draws each step."""
    if n_steps < 0:
        raise ShapeError("n_steps must be non-negative")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = np.asarray(x0, dtype=np.float64).reshape(1, model.dim)
    states = [x[0].copy()]
    for k in range(1, n_steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            x = flow_sample(model, x, rng.standard_normal((1, model.dim)))
        if not np.isfinite(x).all():
            raise RolloutDiverged(f"non-finite state at step {k}", step=k)
        states.append(x[0].copy())
    lag = _lag_of(model)
    return Trajectory(model.system or "model", np.arange(n_steps + 1) * lag, np.array(states), lag=lag,
                      dt_fine=None)


def iterate_rollouts(model: FlowModel, x0, n_steps: int, n_paths: int, seed: int):
    """Yield ``(k, states)`` for an ensemble; path ``i`` draws from ``path_rng(seed, i)``."""
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64).reshape(1, model.dim), (n_paths, model.dim)).copy()
    noise = PathNoise([path_rng(seed, i) for i in range(n_paths)], model.dim)
    yield 0, x
    for k in range(1, n_steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            x = flow_sample(model, x, noise.next())
        if not np.isfinite(x).all():
            raise RolloutDiverged(f"non-finite state at step {k}", step=k)
        yield k, x


def rollout_ensemble(model: FlowModel, x0, n_steps: int, n_paths: int, seed: int) -> np.ndarray:
    """All paths as an array ``(n_paths, n_steps + 1, dim)``."""
    out = np.empty((n_paths, n_steps + 1, model.dim))
    for k, x in iterate_rollouts(model, x0, n_steps, n_paths, seed):
        out[:, k] = x
    return out


# ---------------------------------------------------------------------------
# statistics


@dataclass
class EnsembleStats:
    times: np.ndarray
    mean: np.ndarray  # (n_times, dim)
    std: np.ndarray
    reservoirs: dict = field(default_factory=dict)  # checkpoint time -> (n, dim) samples
    n_ens: int = 0


class EnsembleAccumulator:
    """Per-time two-pass moments, fed one ensemble cross-section at a time."""

    def __init__(self, times, dim, checkpoint_times=(), reservoir_size=RESERVOIR_CAP, seed=0):
        self.times = np.asarray(times, dtype=np.float64)
        self.mean = np.full((len(self.times), dim), np.nan)
        self.std = np.full((len(self.times), dim), np.nan)
        self.reservoir_size = int(reservoir_size)
        self.rng = np.random.default_rng(seed)
        self.n_ens = 0
        self.checkpoints = {}
        for t in checkpoint_times:
            k = int(np.argmin(np.abs(self.times - t)))
            if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
                raise ShapeError(f"checkpoint time {t} is not on the grid")
            self.checkpoints[k] = float(t)
        self.reservoirs = {}

    def add(self, k: int, cross_section: np.ndarray):
        xs = np.asarray(cross_section, dtype=np.float64)
        self.n_ens = xs.shape[0]
        m = xs.mean(axis=0)
        self.mean[k] = m
        self.std[k] = np.sqrt(((xs - m) ** 2).mean(axis=0))
        if k in self.checkpoints:
            if xs.shape[0] > self.reservoir_size:
                keep = np.sort(self.rng.choice(xs.shape[0], self.reservoir_size, replace=False))
                xs = xs[keep]
            self.reservoirs[self.checkpoints[k]] = xs.copy()

    def result(self) -> EnsembleStats:
        return EnsembleStats(self.times, self.mean, self.std, self.reservoirs, self.n_ens)


def ensemble_stats(trajectories, checkpoint_times=(), reservoir_size=RESERVOIR_CAP, seed=0) -> EnsembleStats:
    """Exact per-time mean/STD over trajectories sharing one time grid."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ShapeError("need at least one trajectory")
    times = trajectories[0].times
    for tr in trajectories[1:]:
        if tr.times.shape != times.shape or not np.array_equal(tr.times, times):
            raise ShapeError("trajectories are on different time grids")
    stack = np.stack([tr.slow_states for tr in trajectories])
    acc = EnsembleAccumulator(times, stack.shape[2], checkpoint_times, reservoir_size, seed)
    for k in range(len(times)):
        acc.add(k, stack[:, k])
    return acc.result()


def ks_distance(samples_a, samples_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a = np.sort(np.ravel(np.asarray(samples_a, dtype=np.float64)))
    b = np.sort(np.ravel(np.asarray(samples_b, dtype=np.float64)))
    if a.size == 0 or b.size == 0:
        raise ShapeError("KS distance needs two non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_critical(n_a: int, n_b: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value."""
    c = math.sqrt(-0.5 * math.log(alpha / 2))
    return c * math.sqrt((n_a + n_b) / (n_a * n_b))


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonReport:
    config: dict
    truth: EnsembleStats
    model: EnsembleStats
    ks: dict  # checkpoint time -> list of per-coordinate KS distances

    @property
    def dim(self) -> int:
        return self.truth.mean.shape[1]

    def summary(self) -> dict:
        t = self.truth.times
        dmean = np.abs(self.model.mean - self.truth.mean)
        span = self.truth.mean.max(axis=0) - self.truth.mean.min(axis=0)
        pos = t > 0
        rel_std = np.abs(self.model.std[pos] - self.truth.std[pos]) / self.truth.std[pos]
        n_t = min(len(r) for r in self.truth.reservoirs.values()) if self.truth.reservoirs else self.truth.n_ens
        n_m = min(len(r) for r in self.model.reservoirs.values()) if self.model.reservoirs else self.model.n_ens
        return {
            "max_abs_mean_diff": dmean.max(axis=0).tolist(),
            "truth_mean_range": span.tolist(),
            "max_mean_diff_over_range": (dmean.max(axis=0) / np.where(span > 0, span, 1.0)).tolist(),
            "max_rel_std_diff": rel_std.max(axis=0).tolist() if pos.any() else [0.0] * self.dim,
            "max_ks": [max(v[j] for v in self.ks.values()) for j in range(self.dim)] if self.ks else [],
            "ks_critical_0.01": ks_critical(n_t, n_m) if n_t and n_m else None,
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "summary": self.summary(),
            "ks": {f"{t:g}": v for t, v in sorted(self.ks.items())},
        }

    def write(self, directory, prefix="compare", plots=True) -> list[Path]:
        """JSON report, per-coordinate curve CSVs, per-checkpoint histogram CSVs (+ SVGs)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = [directory / f"{prefix}.json"]
        files[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        t = self.truth.times
        for j in range(self.dim):
            p = directory / f"{prefix}_curve_x{j + 1}.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "mean_true", "mean_model", "std_true", "std_model"])
                for k in range(len(t)):
                    w.writerow([repr(float(v)) for v in (t[k], self.truth.mean[k, j], self.model.mean[k, j],
                                                        self.truth.std[k, j], self.model.std[k, j])])
            files.append(p)
            if plots:
                files.append(svg.line_plot(
                    directory / f"{prefix}_mean_x{j + 1}.svg", t,
                    [("truth", self.truth.mean[:, j]), ("sFML", self.model.mean[:, j])],
                    title=f"mean of x{j + 1}", ylabel="mean", dashed={1}))
                files.append(svg.line_plot(
                    directory / f"{prefix}_std_x{j + 1}.svg", t,
                    [("truth", self.truth.std[:, j]), ("sFML", self.model.std[:, j])],
                    title=f"STD of x{j + 1}", ylabel="STD", dashed={1}))
        for tc in sorted(self.ks):
            for j in range(self.dim):
                a = self.truth.reservoirs[tc][:, j]
                b = self.model.reservoirs[tc][:, j]
                edges = np.histogram_bin_edges(np.concatenate([a, b]), bins="fd")
                ha, _ = np.histogram(a, edges, density=True)
                hb, _ = np.histogram(b, edges, density=True)
                p = directory / f"{prefix}_hist_x{j + 1}_t{tc:g}.csv"
                with p.open("w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["left", "right", "density_true", "density_model"])
                    for i in range(len(ha)):
                        w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), repr(float(ha[i])),
                                    repr(float(hb[i]))])
                files.append(p)
                if plots:
                    files.append(svg.histogram_plot(
                        directory / f"{prefix}_hist_x{j + 1}_t{tc:g}.svg", edges,
                        [("truth", ha), ("sFML", hb)], title=f"x{j + 1} at t={tc:g}", xlabel=f"x{j + 1}"))
        return files


def truth_stats(spec: SystemSpec, x0, T, n_ens, checkpoint_times, seed, lag=LAG, dt_fine=DT_FINE,
                reservoir_size=RESERVOIR_CAP) -> EnsembleStats:
    """Ground-truth ensemble from fixed slow ``x0`` and stationary fast draws."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, spec.dim_slow)
    xs = np.repeat(x0, n_ens, axis=0)
    ys = sample_fast_stationary(spec, xs, np.random.default_rng(derive_seed(seed, 1)), dt=dt_fine)
    n_lags = round(T / lag)
    acc = EnsembleAccumulator(np.arange(n_lags + 1) * lag, spec.dim_slow, checkpoint_times, reservoir_size,
                              derive_seed(seed, 2))
    rngs = [path_rng(derive_seed(seed, 3), i) for i in range(n_ens)]
    for k, _, state in iterate_paths(spec, np.concatenate([xs, ys], axis=1), T, dt_fine, lag, rngs):
        acc.add(k, state[:, : spec.dim_slow])
    return acc.result()


def model_stats(model: FlowModel, x0, T, n_ens, checkpoint_times, seed,
                reservoir_size=RESERVOIR_CAP) -> EnsembleStats:
    lag = _lag_of(model)
    n_steps = round(T / lag)
    acc = EnsembleAccumulator(np.arange(n_steps + 1) * lag, model.dim, checkpoint_times, reservoir_size,
                              derive_seed(seed, 2))
    for k, x in iterate_rollouts(model, x0, n_steps, n_ens, derive_seed(seed, 4)):
        acc.add(k, x)
    return acc.result()


def compare(model: FlowModel | None, spec: SystemSpec, x0, T: float, n_ens: int, checkpoint_times=(),
            seed: int = 0, dt_fine: float = DT_FINE, self_test: bool = False,
            reservoir_size: int = RESERVOIR_CAP) -> ComparisonReport:
    """Model ensemble (or, with ``self_test``, a second truth ensemble) vs truth.

    The truth ensemble uses ``seed``; the comparison side uses an independent
    stream split from it.
    """
    lag = _lag_of(model) if model is not None else LAG
    if model is not None and model.dim != spec.dim_slow:
        raise ShapeError(f"model has {model.dim} slow coordinates, {spec.id} has {spec.dim_slow}")
    truth = truth_stats(spec, x0, T, n_ens, checkpoint_times, seed, lag, dt_fine, reservoir_size)
    if self_test:
        other = truth_stats(spec, x0, T, n_ens, checkpoint_times, derive_seed(seed, 99), lag, dt_fine,
                            reservoir_size)
    else:
        if model is None:
            raise ShapeError("need a model unless self_test is set")
        other = model_stats(model, x0, T, n_ens, checkpoint_times, derive_seed(seed, 5), reservoir_size)
    ks = {}
    for tc in checkpoint_times:
        a, b = truth.reservoirs[float(tc)], other.reservoirs[float(tc)]
        ks[float(tc)] = [ks_distance(a[:, j], b[:, j]) for j in range(spec.dim_slow)]
    config = {"system": spec.id, "x0": np.ravel(x0).tolist(), "T": T, "n_ens": n_ens,
              "checkpoint_times": [float(t) for t in checkpoint_times], "seed": seed, "dt_fine": dt_fine,
              "lag": lag, "self_test": self_test}
    return ComparisonReport(config, truth, other, ks)
