"""Benchmark slow-fast SDE systems and their fine-step Euler-Maruyama solver.

Every system is written in the form

    dx = f(x, y) dt + sigma(x, y) dW
    dy = g(x, y) dt + beta(x, y) dW

where the 1/eps and 1/sqrt(eps) factors of the fast block are already folded
into ``g`` and ``beta``.  The full state vector is ``concat(x, y)``; all
functions accept a leading batch axis.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import container
from .errors import ConfigurationError, IntegrationBlowup, ShapeError, UnsupportedSystemError

DT_FINE = 1e-4
LAG = 0.01

DriftFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
DiffusionFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SystemSpec:
    """One benchmark SDE: dynamics, parameters and initial-condition box.

    ``drift(x, y)`` returns ``(dx, dy)`` per unit time, ``diffusion(x, y)``
    returns the noise matrix of shape ``(n, dim_slow + dim_fast, n_noise)``.
    """

    id: str
    dim_slow: int
    dim_fast: int
    n_noise: int
    params: dict
    drift: DriftFn = field(repr=False, compare=False)
    diffusion: DiffusionFn = field(repr=False, compare=False)
    ic_domain: tuple = ()
    # fast relaxation time, used for stationarity checks and burn-in horizons
    fast_timescale: float = 1.0

    def __post_init__(self):
        if self.dim_slow < 1 or self.dim_fast < 1:
            raise ConfigurationError("need at least one slow and one fast coordinate")
        if self.n_noise < 1:
            raise ConfigurationError("need at least one Brownian component")
        if len(self.ic_domain) != self.dim:
            raise ConfigurationError(
                f"ic_domain has {len(self.ic_domain)} intervals for dimension {self.dim}"
            )

    @property
    def dim(self) -> int:
        return self.dim_slow + self.dim_fast

    def split(self, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return state[..., : self.dim_slow], state[..., self.dim_slow :]


def _const_diffusion(diag_entries, n_noise):
    """Diffusion matrix with one constant entry per (row, noise) pair."""
    d = len(diag_entries)
    g = np.zeros((d, n_noise))
    for row, col, val in _entries(diag_entries):
        g[row, col] = val
    g.setflags(write=False)

    def diffusion(x, y):
        return np.broadcast_to(g, (x.shape[0], d, n_noise))

    diffusion.matrix = g
    return diffusion


def _entries(entries):
    for row, item in enumerate(entries):
        if item is None:
            continue
        col, val = item
        yield row, col, val


# ---------------------------------------------------------------------------
# presets


def skew_product(alpha=1.0, lam=2.4, eps=0.005) -> SystemSpec:
    def drift(x, y):
        return (1.0 - y**2) * x, -(alpha / eps) * y

    return SystemSpec(
        id="skew_product",
        dim_slow=1,
        dim_fast=1,
        n_noise=1,
        params={"alpha": alpha, "lambda": lam, "eps": eps},
        drift=drift,
        diffusion=_const_diffusion([None, (0, math.sqrt(2 * lam / eps))], 1),
        ic_domain=((-1.5, 2.0), (-1.0, 1.6)),
        fast_timescale=eps / alpha,
    )


def exp_ou(eps=0.001) -> SystemSpec:
    def drift(x, y):
        return 1.0 - x + y, (np.exp(-x) - y) / eps

    return SystemSpec(
        id="exp_ou",
        dim_slow=1,
        dim_fast=1,
        n_noise=1,
        params={"eps": eps},
        drift=drift,
        diffusion=_const_diffusion([None, (0, math.sqrt(2 / eps))], 1),
        ic_domain=((-1.5, 2.0), (-4.0, 4.0)),
        fast_timescale=eps,
    )


def triad(sigma=1.0, eps2=0.001) -> SystemSpec:
    eps = math.sqrt(eps2)

    def drift(x, y):
        y1, y2 = y[:, :1], y[:, 1:]
        dx = -(2.0 / eps) * y1 * y2
        dy1 = -y1 / eps2 + x * y2 / eps
        dy2 = -2.0 * y2 / eps2 + x * y1 / eps
        return dx, np.concatenate([dy1, dy2], axis=1)

    return SystemSpec(
        id="triad",
        dim_slow=1,
        dim_fast=2,
        n_noise=2,
        params={"sigma": sigma, "eps2": eps2},
        drift=drift,
        diffusion=_const_diffusion([None, (0, sigma / eps), (1, sigma / eps)], 2),
        ic_domain=((-2.0, 3.0), (-1.0, 1.0), (-1.0, 1.0)),
        fast_timescale=eps2,
    )


def nonlinear3d(sigma1=0.3, sigma2=0.3, sigma3=0.1, eps=0.001) -> SystemSpec:
    def drift(x, y):
        x1, x2 = x[:, :1], x[:, 1:]
        dx = np.concatenate([x2, -x1 - x2 + y**2], axis=1)
        return dx, -(y - 0.25 * x1) / eps

    return SystemSpec(
        id="nonlinear3d",
        dim_slow=2,
        dim_fast=1,
        n_noise=3,
        params={"sigma1": sigma1, "sigma2": sigma2, "sigma3": sigma3, "eps": eps},
        drift=drift,
        diffusion=_const_diffusion(
            [(0, sigma1), (1, sigma2), (2, sigma3 * math.sqrt(2 / eps))], 3
        ),
        ic_domain=((-1.5, 2.5), (-2.0, 1.5), (-0.6, 1.0)),
        fast_timescale=eps,
    )


def oscillator(lam=1.0, theta=1.0, gamma=1.0, sigma=0.1, eps=0.001) -> SystemSpec:
    def drift(x, y):
        x1, x2 = x[:, :1], x[:, 1:]
        dx1 = lam * x1 - theta * x2 - gamma * x1 * y
        dx2 = theta * x1 + lam * x2 - gamma * x2 * y
        return np.concatenate([dx1, dx2], axis=1), -(y - x1**2 - x2**2) / eps

    return SystemSpec(
        id="oscillator",
        dim_slow=2,
        dim_fast=1,
        n_noise=3,
        params={"lambda": lam, "theta": theta, "gamma": gamma, "sigma": sigma, "eps": eps},
        drift=drift,
        diffusion=_const_diffusion([(0, sigma), (1, sigma), (2, sigma * math.sqrt(2 / eps))], 3),
        ic_domain=((-1.5, 1.5), (-1.5, 1.5), (0.1, 2.5)),
        fast_timescale=eps,
    )


def scalar_ou(theta=1.0, sigma=math.sqrt(2.0)) -> SystemSpec:
    """Test fixture: dx = -theta x dt + sigma dW with an inert fast coordinate."""

    def drift(x, y):
        return -theta * x, np.zeros_like(y)

    return SystemSpec(
        id="scalar_ou",
        dim_slow=1,
        dim_fast=1,
        n_noise=1,
        params={"theta": theta, "sigma": sigma},
        drift=drift,
        diffusion=_const_diffusion([(0, sigma), None], 1),
        ic_domain=((-1.0, 1.0), (0.0, 0.0)),
        fast_timescale=1.0,
    )


PRESETS = {
    "skew_product": skew_product,
    "exp_ou": exp_ou,
    "triad": triad,
    "nonlinear3d": nonlinear3d,
    "oscillator": oscillator,
}
ALIASES = {"ex1": "skew_product", "ex2": "exp_ou", "ext": "triad", "ex3": "nonlinear3d", "ex4": "oscillator"}


def get_system(name: str) -> SystemSpec:
    key = ALIASES.get(name, name)
    if key == "scalar_ou":
        return scalar_ou()
    try:
        return PRESETS[key]()
    except KeyError:
        raise UnsupportedSystemError(f"unknown system {name!r}") from None


# ---------------------------------------------------------------------------
# integration


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for path ``index`` split off the master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _apply_noise(g: np.ndarray, noise: np.ndarray) -> np.ndarray:
    # explicit ordered sum over noise columns: bit-identical for any batch size
    out = g[:, :, 0] * noise[:, 0:1]
    for j in range(1, g.shape[2]):
        out = out + g[:, :, j] * noise[:, j : j + 1]
    return out


def euler_maruyama_step(state, spec: SystemSpec, dt: float, noise) -> np.ndarray:
    """One Euler-Maruyama step ``s + a(s) dt + b(s) sqrt(dt) xi``.

    ``state`` has shape ``(dim,)`` or ``(n, dim)``; ``noise`` carries
    ``spec.n_noise`` standard normal draws per state.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    state = np.asarray(state, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    single = state.ndim == 1
    s = np.atleast_2d(state)
    xi = np.atleast_2d(noise)
    if s.shape[1] != spec.dim or xi.shape != (s.shape[0], spec.n_noise):
        raise ShapeError(
            f"state {state.shape} / noise {noise.shape} do not match system {spec.id}"
        )
    x, y = spec.split(s)
    with np.errstate(over="ignore", invalid="ignore"):
        dx, dy = spec.drift(x, y)
        a = np.concatenate([dx, dy], axis=1)
        b = spec.diffusion(x, y)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise IntegrationBlowup("non-finite drift/diffusion", time=None, state=s.copy())
    out = s + a * dt + _apply_noise(b, xi) * math.sqrt(dt)
    return out[0] if single else out


def _step_counts(T: float, dt_fine: float, lag: float) -> tuple[int, int]:
    if dt_fine <= 0 or lag <= 0 or T < 0:
        raise ConfigurationError("dt_fine and lag must be positive, T non-negative")
    n_sub = round(lag / dt_fine)
    if n_sub < 1 or abs(n_sub * dt_fine - lag) > 1e-9 * lag:
        raise ConfigurationError(f"lag {lag} is not an integer multiple of dt_fine {dt_fine}")
    n_lags = round(T / lag)
    if abs(n_lags * lag - T) > 1e-9 * max(lag, T):
        raise ConfigurationError(f"T {T} is not an integer multiple of lag {lag}")
    return n_sub, n_lags


class PathNoise:
    """Per-path N(0,1) streams, drawn in blocks of steps.

    Path ``i`` always consumes its own generator in step order, so the noise
    a path sees does not depend on how many other paths share the batch.
    """

    def __init__(self, rngs, width: int, block: int = 256):
        self.rngs = list(rngs)
        self.width = width
        self.block = block
        self._buf = None
        self._pos = block

    def next(self) -> np.ndarray:
        if self._pos >= self.block:
            self._buf = np.stack([g.standard_normal((self.block, self.width)) for g in self.rngs], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def iterate_paths(spec: SystemSpec, states0, T: float, dt_fine: float, lag: float, rngs):
    """Integrate a batch of full states, yielding ``(k, t_k, state)`` every lag.

    The first yield is the initial state at ``k = 0``.
    """
    n_sub, n_lags = _step_counts(T, dt_fine, lag)
    state = np.array(states0, dtype=np.float64, ndmin=2)
    noise = PathNoise(rngs, spec.n_noise)
    if len(noise.rngs) != state.shape[0]:
        raise ShapeError("need exactly one generator per path")
    sqdt = math.sqrt(dt_fine)
    d = spec.dim_slow
    yield 0, 0.0, state
    for k in range(1, n_lags + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(n_sub):
                x, y = state[:, :d], state[:, d:]
                dx, dy = spec.drift(x, y)
                a = np.concatenate([dx, dy], axis=1)
                state = state + a * dt_fine + _apply_noise(spec.diffusion(x, y), noise.next()) * sqdt
        if not np.isfinite(state).all():
            bad = np.flatnonzero(~np.isfinite(state).all(axis=1))
            raise IntegrationBlowup(
                f"{spec.id}: non-finite state before t={k * lag:g} on path(s) {bad[:5].tolist()}",
                time=k * lag,
                state=state[bad[0]].copy(),
                trajectory=int(bad[0]),
            )
        yield k, k * lag, state


def simulate_batch(spec, states0, T, dt_fine=DT_FINE, lag=LAG, rngs=None, keep_fast=False):
    """Slow (and optionally fast) states of every path at every lag.

    Returns ``times (K+1,)``, ``slow (n, K+1, dim_slow)`` and ``fast`` (or None).
    """
    slow, fast, times = [], [], []
    for _, t, s in iterate_paths(spec, states0, T, dt_fine, lag, rngs):
        times.append(t)
        slow.append(s[:, : spec.dim_slow].copy())
        if keep_fast:
            fast.append(s[:, spec.dim_slow :].copy())
    times = np.arange(len(times)) * lag
    slow = np.stack(slow, axis=1)
    return times, slow, (np.stack(fast, axis=1) if keep_fast else None)


@dataclass
class Trajectory:
    """Slow-variable record of one path on the grid ``k * lag``."""

    system: str
    times: np.ndarray
    slow_states: np.ndarray
    fast_states: np.ndarray | None = None
    lag: float = LAG
    dt_fine: float | None = DT_FINE
    seed: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.slow_states = np.asarray(self.slow_states, dtype=np.float64).reshape(len(self.times), -1)
        if self.fast_states is not None:
            self.fast_states = np.asarray(self.fast_states, dtype=np.float64).reshape(len(self.times), -1)

    def __len__(self):
        return len(self.times)

    def columns(self) -> list[str]:
        cols = ["t"] + [f"x{i + 1}" for i in range(self.slow_states.shape[1])]
        if self.fast_states is not None:
            cols += [f"y{i + 1}" for i in range(self.fast_states.shape[1])]
        return cols

    def _table(self) -> np.ndarray:
        parts = [self.times[:, None], self.slow_states]
        if self.fast_states is not None:
            parts.append(self.fast_states)
        return np.concatenate(parts, axis=1)

    def save(self, path) -> Path:
        header = {
            "kind": "trajectory",
            "system": self.system,
            "lag": self.lag,
            "dt_fine": self.dt_fine,
            "seed": self.seed,
            "columns": self.columns(),
            "dim_slow": int(self.slow_states.shape[1]),
        }
        return container.write(path, header, self._table(), layout="F")

    @classmethod
    def load(cls, path) -> "Trajectory":
        header, table = container.read(path)
        if header.get("kind") != "trajectory":
            raise ShapeError(f"{path} is not a trajectory file")
        d = header["dim_slow"]
        fast = table[:, 1 + d :] if table.shape[1] > 1 + d else None
        return cls(
            system=header["system"],
            times=table[:, 0],
            slow_states=table[:, 1 : 1 + d],
            fast_states=fast,
            lag=header["lag"],
            dt_fine=header["dt_fine"],
            seed=header["seed"],
        )

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for row in self._table():
                w.writerow([repr(float(v)) for v in row])
        return path


def simulate_slow(spec: SystemSpec, x0, y0, T: float, dt_fine: float = DT_FINE, lag: float = LAG,
                  rng=0, keep_fast: bool = False) -> Trajectory:
    """Integrate one path at ``dt_fine`` and record the slow block every ``lag``."""
    state = np.concatenate([np.ravel(x0), np.ravel(y0)]).astype(np.float64)
    if state.size != spec.dim:
        raise ShapeError(f"initial state has {state.size} entries, system needs {spec.dim}")
    gen = _as_rng(rng)
    times, slow, fast = simulate_batch(spec, state[None], T, dt_fine, lag, [gen], keep_fast)
    return Trajectory(
        system=spec.id,
        times=times,
        slow_states=slow[0],
        fast_states=None if fast is None else fast[0],
        lag=lag,
        dt_fine=dt_fine,
        seed=rng if isinstance(rng, (int, np.integer)) else None,
    )


# ---------------------------------------------------------------------------
# stationary laws of the fast block


def _burn_in_fast(spec, x, y, horizon, dt, rng):
    """Integrate the fast block with ``x`` frozen."""
    n_steps = max(1, round(horizon / dt))
    d = spec.dim_slow
    sq = math.sqrt(dt)
    for _ in range(n_steps):
        _, dy = spec.drift(x, y)
        b = spec.diffusion(x, y)[:, d:, :]
        xi = rng.standard_normal((x.shape[0], spec.n_noise))
        y = y + dy * dt + _apply_noise(b, xi) * sq
    return y


def sample_fast_stationary(spec: SystemSpec, x, rng=None, dt: float = DT_FINE) -> np.ndarray:
    """Draw the fast block from its invariant law conditioned on slow state ``x``.

    ``x`` is a single slow vector or a batch ``(n, dim_slow)``; the result has
    the matching shape with ``dim_fast`` columns.  The triad has no closed
    form, so its sampler equilibrates the fast block for ``10 eps^2`` with
    ``x`` frozen (step ``dt``), starting from zero.
    """
    rng = _as_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    n = xb.shape[0]
    p = spec.params
    if spec.id == "skew_product":
        y = rng.standard_normal((n, 1)) * math.sqrt(p["lambda"] / p["alpha"])
    elif spec.id == "exp_ou":
        y = np.exp(-xb[:, :1]) + rng.standard_normal((n, 1))
    elif spec.id == "nonlinear3d":
        y = 0.25 * xb[:, :1] + p["sigma3"] * rng.standard_normal((n, 1))
    elif spec.id == "oscillator":
        r2 = xb[:, :1] ** 2 + xb[:, 1:2] ** 2
        y = r2 + p["sigma"] * rng.standard_normal((n, 1))
    elif spec.id == "triad":
        y = _burn_in_fast(spec, xb, np.zeros((n, 2)), 10 * p["eps2"], dt, rng)
    elif spec.id == "scalar_ou":
        y = np.zeros((n, 1))
    else:
        raise UnsupportedSystemError(f"no stationary sampler for {spec.id!r}")
    return y[0] if single else y


def burn_in_fast(spec: SystemSpec, x, y, horizon: float, dt: float = DT_FINE, rng=None) -> np.ndarray:
    """Public frozen-slow fast-block integrator (stationarity diagnostics)."""
    rng = _as_rng(rng)
    return _burn_in_fast(spec, np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(y, float)),
                         horizon, dt, rng)
