"""Maximum-likelihood training of the conditional flow with Adam + cyclic LR."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import Normalization, PairDataset, fit_normalization
from .errors import ConfigurationError, NumericalInstability, ShapeError, TrainingDiverged
from .flow import (
    FlowModel,
    build_flow,
    config_hash,
    log_likelihood_normalized,
    nll_and_grad_normalized,
)
from .nn import HIDDEN


@dataclass
class TrainConfig:
    base_lr: float = 3e-4
    max_lr: float = 5e-4
    gamma: float = 0.99999
    step_size: int = 10_000
    cycle_period: int = 40_000
    cycle_decay: float = 0.5
    iterations: int = 200_000
    batch_size: int = 30_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    checkpoint_every: int = 1000
    # model
    n_layers: int = 5
    hidden: tuple = HIDDEN
    autoregressive: bool = True
    residual: bool = True
    standardize: bool = True
    scale_increments: bool = True
    # divergence guard
    diverge_nll: float = 1e6
    diverge_patience: int = 100

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.base_lr > self.max_lr:
            raise ConfigurationError("base_lr must not exceed max_lr")
        for name in ("step_size", "cycle_period", "batch_size", "checkpoint_every", "n_layers"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read a YAML (or JSON) mapping; a top-level ``train:`` section is honoured."""
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data.get("train", data))


def cyclic_lr(iteration: int, cfg: TrainConfig) -> float:
    """Triangular wave between base and max rate, damped by ``gamma**it`` and
    halved (``cycle_decay``) every ``cycle_period`` iterations."""
    if iteration < 0:
        raise ConfigurationError("iteration must be non-negative")
    phase = (iteration / cfg.step_size) % 2.0
    tri = max(0.0, 1.0 - abs(phase - 1.0))
    amp = cfg.gamma**iteration * cfg.cycle_decay ** (iteration // cfg.cycle_period)
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * tri * amp


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ShapeError("params, gradient and moments must have equal length")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def nll_loss(model: FlowModel, x0, x1) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of physical pairs and its gradient."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ShapeError("empty batch")
    norm = model.normalization
    return nll_and_grad_normalized(model, norm.apply(x0), norm.apply(x1))


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    best_iteration: int = 0
    best_val_nll: float = math.inf
    model: FlowModel | None = None
    final_params: np.ndarray | None = None

    COLUMNS = ("iteration", "nll_train", "nll_val", "lr", "seconds")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["iteration"], repr(r["nll_train"]), repr(r["nll_val"]), repr(r["lr"]),
                            f"{r['seconds']:.3f}"])
        return path

    def numeric(self) -> np.ndarray:
        """Deterministic columns only (wall time excluded)."""
        return np.array([[r["iteration"], r["nll_train"], r["nll_val"], r["lr"]] for r in self.rows])


def _mean_nll(model, x0n, x1n, chunk=20_000) -> float:
    total = 0.0
    for i in range(0, x0n.shape[0], chunk):
        total += float(-log_likelihood_normalized(model, x0n[i : i + chunk], x1n[i : i + chunk]).sum())
    return total / x0n.shape[0]


def init_model(dataset: PairDataset, cfg: TrainConfig, train_idx=None) -> FlowModel:
    """Untrained model whose fixed affines are fitted on the training records."""
    x0, x1 = dataset.raw()
    if train_idx is not None:
        x0, x1 = x0[train_idx], x1[train_idx]
    dim = dataset.dim
    if cfg.standardize:
        norm = dataset.normalization if dataset.normalization is not None else fit_normalization(x0)
    else:
        norm = Normalization.identity(dim)
    x0n, x1n = norm.apply(x0), norm.apply(x1)
    inc_shift = inc_scale = None
    if cfg.scale_increments:
        base = x1n - x0n if cfg.residual else x1n
        inc_shift = base.mean(axis=0)
        inc_scale = base.std(axis=0)
        inc_scale[inc_scale <= 0] = 1.0
    model = build_flow(dim, cfg.n_layers, cfg.hidden, cfg.autoregressive, cfg.residual, norm, cfg.seed,
                       inc_shift=inc_shift, inc_scale=inc_scale)
    model.config_hash = config_hash(cfg.to_dict())
    model.system = dataset.system
    model.lag = dataset.lag
    return model


def train(dataset: PairDataset, cfg: TrainConfig, log=None) -> tuple[FlowModel, TrainReport]:
    """Fit the flow; returns the best-validation model and the checkpoint log.

    ``log`` is an optional callable receiving each report row.
    """
    train_ds, val_ds = dataset.split(cfg.val_fraction, cfg.seed)
    x0, x1 = train_ds.raw()
    model = init_model(train_ds, cfg)
    norm = model.normalization
    x0n, x1n = norm.apply(x0), norm.apply(x1)
    if val_ds is not None:
        v0, v1 = val_ds.raw()
        v0n, v1n = norm.apply(v0), norm.apply(v1)
    else:
        v0n, v1n = x0n, x1n
    n = x0n.shape[0]
    batch = min(cfg.batch_size, n)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0xBA7C,)))
    state = AdamState.zeros(model.n_params)
    report = TrainReport()
    start = time.perf_counter()
    best = model.params.copy()
    last_good = model.params.copy()
    bad_streak = 0
    last_loss = math.nan

    def checkpoint(it, lr):
        nonlocal best
        val = _mean_nll(model, v0n, v1n)
        tr = last_loss if math.isfinite(last_loss) else _mean_nll(model, x0n[:batch], x1n[:batch])
        row = {"iteration": it, "nll_train": tr, "nll_val": val, "lr": lr,
               "seconds": time.perf_counter() - start}
        report.rows.append(row)
        if math.isfinite(val) and val < report.best_val_nll:
            report.best_val_nll = val
            report.best_iteration = it
            best = model.params.copy()
        if log is not None:
            log(row)

    checkpoint(0, cyclic_lr(0, cfg))
    for it in range(cfg.iterations):
        lr = cyclic_lr(it, cfg)
        idx = rng.integers(0, n, size=batch)
        try:
            loss, grad = nll_and_grad_normalized(model, x0n[idx], x1n[idx])
        except NumericalInstability:
            loss, grad = math.inf, None
        if grad is None or not math.isfinite(loss) or loss > cfg.diverge_nll or not np.isfinite(grad).all():
            bad_streak += 1
            if bad_streak >= cfg.diverge_patience:
                raise TrainingDiverged(
                    f"loss non-finite or above {cfg.diverge_nll:g} for {bad_streak} iterations",
                    last_good=model.with_params(last_good),
                    iteration=it,
                )
            if grad is None or not np.isfinite(grad).all():
                continue
        else:
            bad_streak = 0
            last_good[:] = model.params
        last_loss = loss
        adam_step(model.params, grad, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        done = it + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.iterations:
            checkpoint(done, cyclic_lr(done, cfg))

    final = model.with_params(best)
    final.extra["best_iteration"] = report.best_iteration
    report.model = final
    report.final_params = model.params.copy()
    return final, report


def save_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path
