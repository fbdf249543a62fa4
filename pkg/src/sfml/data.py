"""Burst-data generation: initial conditions, short trajectories, pair datasets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .errors import ConfigurationError, DegenerateDataError, IntegrationBlowup, ShapeError
from .systems import DT_FINE, LAG, SystemSpec, Trajectory, path_rng, simulate_batch


@dataclass(frozen=True)
class Normalization:
    """Per-coordinate affine ``xn = (x - mean) / scale``."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).ravel())
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).ravel())

    @classmethod
    def identity(cls, dim: int) -> "Normalization":
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def invert(self, xn):
        return np.asarray(xn, dtype=np.float64) * self.scale + self.mean

    @property
    def log_det(self) -> float:
        """log|det| of the de-normalizing map (normalized -> physical)."""
        return float(np.sum(np.log(self.scale)))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Normalization | None":
        return None if d is None else cls(d["mean"], d["scale"])


@dataclass
class PairDataset:
    """``M`` one-lag pairs ``(x0, x1)`` of slow states.

    Pairs are ordered by trajectory, then step; consecutive blocks of
    ``pairs_per_trajectory`` records come from the same burst.  When
    ``normalization`` is set, ``x0``/``x1`` hold normalized values.
    """

    x0: np.ndarray
    x1: np.ndarray
    lag: float
    system: str
    seed: int | None = None
    pairs_per_trajectory: int = 1
    normalization: Normalization | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.ndim == 1:
            self.x0 = self.x0[:, None]
        if self.x1.ndim == 1:
            self.x1 = self.x1[:, None]
        if self.x0.shape != self.x1.shape:
            raise ShapeError(f"x0 {self.x0.shape} and x1 {self.x1.shape} differ")

    @property
    def M(self) -> int:
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    @property
    def trajectory_index(self) -> np.ndarray:
        return np.arange(self.M) // max(1, self.pairs_per_trajectory)

    def raw(self) -> tuple[np.ndarray, np.ndarray]:
        """Pairs in physical units."""
        if self.normalization is None:
            return self.x0, self.x1
        return self.normalization.invert(self.x0), self.normalization.invert(self.x1)

    def denormalized(self) -> "PairDataset":
        x0, x1 = self.raw()
        return replace(self, x0=x0, x1=x1, normalization=None)

    def subset(self, idx) -> "PairDataset":
        return replace(self, x0=self.x0[idx], x1=self.x1[idx], pairs_per_trajectory=1)

    def split(self, val_fraction: float, seed: int) -> tuple["PairDataset", "PairDataset | None"]:
        """Hold out whole trajectories (not single pairs) for validation."""
        if not 0 <= val_fraction < 1:
            raise ConfigurationError("val_fraction must be in [0, 1)")
        traj = self.trajectory_index
        n_traj = int(traj[-1]) + 1 if self.M else 0
        n_val = int(round(val_fraction * n_traj))
        if n_val == 0 or n_val >= n_traj:
            return self, None
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0x5EED,)))
        val_traj = np.zeros(n_traj, dtype=bool)
        val_traj[rng.choice(n_traj, size=n_val, replace=False)] = True
        mask = val_traj[traj]
        return self.subset(~mask), self.subset(mask)

    # -- persistence ---------------------------------------------------------

    def header(self) -> dict:
        return {
            "kind": "pairs",
            "dim": self.dim,
            "lag": self.lag,
            "M": self.M,
            "system": self.system,
            "seed": self.seed,
            "pairs_per_trajectory": self.pairs_per_trajectory,
            "normalization": None if self.normalization is None else self.normalization.to_dict(),
            "meta": self.meta,
        }

    def save(self, path) -> Path:
        return container.write(path, self.header(), np.concatenate([self.x0, self.x1], axis=1))

    @classmethod
    def load(cls, path) -> "PairDataset":
        header, table = container.read(path)
        if header.get("kind") != "pairs":
            raise ShapeError(f"{path} is not a pair dataset")
        d = header["dim"]
        return cls(
            x0=table[:, :d],
            x1=table[:, d:],
            lag=header["lag"],
            system=header["system"],
            seed=header["seed"],
            pairs_per_trajectory=header["pairs_per_trajectory"],
            normalization=Normalization.from_dict(header["normalization"]),
            meta=header.get("meta", {}),
        )

    def to_csv(self, path) -> Path:
        path = Path(path)
        d = self.dim
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x0_{i + 1}" for i in range(d)] + [f"x1_{i + 1}" for i in range(d)])
            for a, b in zip(self.x0, self.x1):
                w.writerow([repr(float(v)) for v in (*a, *b)])
        return path


def sample_initial_conditions(spec: SystemSpec, M: int, rng, domain=None) -> np.ndarray:
    """``M`` i.i.d. full states, uniform over the (possibly overridden) box."""
    if M < 1:
        raise ConfigurationError("M must be at least 1")
    domain = spec.ic_domain if domain is None else domain
    box = np.asarray(domain, dtype=np.float64)
    if box.shape != (spec.dim, 2):
        raise ConfigurationError(f"domain must have {spec.dim} intervals")
    if not np.isfinite(box).all() or np.any(box[:, 1] < box[:, 0]):
        raise ConfigurationError(f"inverted or non-finite interval in {domain}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return rng.uniform(box[:, 0], box[:, 1], size=(M, spec.dim))


def burst(spec: SystemSpec, seed: int, index: int, T: float, lag: float = LAG,
          dt_fine: float = DT_FINE, domain=None) -> Trajectory:
    """Re-simulate burst ``index`` of a dataset generated with ``seed``."""
    gen = path_rng(seed, index)
    s0 = sample_initial_conditions(spec, 1, gen, domain)
    times, slow, _ = simulate_batch(spec, s0, T, dt_fine, lag, [gen])
    return Trajectory(spec.id, times, slow[0], lag=lag, dt_fine=dt_fine, seed=seed)


def build_pairs(spec: SystemSpec, M: int, T: float, lag: float = LAG, seed: int = 0,
                dt_fine: float = DT_FINE, domain=None, chunk: int = 2000) -> PairDataset:
    """Simulate ``ceil(M / L)`` bursts of ``L = T / lag`` steps and slice them into pairs.

    Burst ``i`` draws its initial condition and Brownian increments from
    ``path_rng(seed, i)``, so any single burst can be replayed with
    :func:`burst`.
    """
    if M < 1:
        raise ConfigurationError("M must be at least 1")
    if T < lag * (1 - 1e-12):
        raise ConfigurationError("T must be at least one lag")
    L = round(T / lag)
    n_traj = math.ceil(M / L)
    x0s, x1s = [], []
    for start in range(0, n_traj, chunk):
        idx = range(start, min(n_traj, start + chunk))
        gens = [path_rng(seed, i) for i in idx]
        s0 = np.concatenate([sample_initial_conditions(spec, 1, g, domain) for g in gens])
        try:
            _, slow, _ = simulate_batch(spec, s0, T, dt_fine, lag, gens)
        except IntegrationBlowup as exc:
            exc.trajectory = start + (exc.trajectory or 0)
            raise
        x0s.append(slow[:, :-1].reshape(-1, spec.dim_slow))
        x1s.append(slow[:, 1:].reshape(-1, spec.dim_slow))
    x0 = np.concatenate(x0s)[:M]
    x1 = np.concatenate(x1s)[:M]
    meta = {"T": T, "dt_fine": dt_fine, "n_trajectories": n_traj}
    if domain is not None:
        meta["domain"] = [list(map(float, iv)) for iv in domain]
    return PairDataset(x0, x1, lag=lag, system=spec.id, seed=seed, pairs_per_trajectory=L, meta=meta)


def fit_normalization(x: np.ndarray) -> Normalization:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise DegenerateDataError("need at least two records to standardize")
    mean = x.mean(axis=0)
    scale = np.sqrt(((x - mean) ** 2).mean(axis=0))
    if np.any(scale <= 0) or not np.isfinite(scale).all():
        raise DegenerateDataError(f"zero or non-finite spread in coordinates {np.flatnonzero(~(scale > 0)).tolist()}")
    return Normalization(mean, scale)


def normalize(dataset: PairDataset) -> PairDataset:
    """Standardize both members of every pair by the pooled ``x0`` moments."""
    x0, x1 = dataset.raw()
    norm = fit_normalization(x0)
    return replace(dataset, x0=norm.apply(x0), x1=norm.apply(x1), normalization=norm)
