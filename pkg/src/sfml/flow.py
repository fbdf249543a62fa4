"""Conditional masked autoregressive flow for the one-step map ``x1 | x0``.

Physical pairs are standardized with the dataset affine ``(mean, scale)``.
In normalized units the flow models

    x1n = r * x0n + inc_shift + inc_scale * d,     d = T_K o ... o T_1 (z)

with ``r = 1`` for the residual (increment) parameterization and ``r = 0``
otherwise.  Each ``T_k`` is an affine autoregressive layer

    u_j = m_j + exp(s_j) * v_j,    (m, s) = conditioner_k(x0n, u_<j)

whose conditioner is a masked tanh MLP emitting ``2 * dim`` outputs
``[m_1..m_l, s_1..s_l]``.  With ``autoregressive=False`` (or ``dim == 1``)
the conditioner reads ``x0n`` only, i.e. it is the plain hypernetwork
``theta = N(x0)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Normalization
from .errors import NumericalInstability, ShapeError
from .nn import HIDDEN, MLPParams, init_params, made_masks, mlp_backward, mlp_forward

LOG_SCALE_CLAMP = 7.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowLayer:
    order: np.ndarray  # order[p] = coordinate written at position p
    net: MLPParams
    autoregressive: bool

    @property
    def ranks(self) -> np.ndarray:
        r = np.empty_like(self.order)
        r[self.order] = np.arange(1, self.order.size + 1)
        return r


@dataclass
class FlowModel:
    """Stack of conditional affine autoregressive layers over a standard normal base."""

    dim: int
    layers: list
    params: np.ndarray
    normalization: Normalization
    residual: bool = True
    inc_shift: np.ndarray = None
    inc_scale: np.ndarray = None
    hidden: tuple = HIDDEN
    autoregressive: bool = True
    seed: int | None = None
    config_hash: str | None = None
    system: str | None = None
    lag: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inc_shift is None:
            self.inc_shift = np.zeros(self.dim)
        if self.inc_scale is None:
            self.inc_scale = np.ones(self.dim)
        self.inc_shift = np.asarray(self.inc_shift, dtype=np.float64).ravel()
        self.inc_scale = np.asarray(self.inc_scale, dtype=np.float64).ravel()

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def const_log_det(self) -> float:
        """log|det| of the fixed affine maps from ``d`` to physical ``x1``."""
        return float(np.sum(np.log(self.inc_scale))) + self.normalization.log_det

    def mask_flat(self) -> np.ndarray:
        return np.concatenate([layer.net.mask_flat() for layer in self.layers])

    def copy(self) -> "FlowModel":
        return _rebind(self, self.params.copy())

    def with_params(self, flat) -> "FlowModel":
        return _rebind(self, np.array(flat, dtype=np.float64))

    # -- persistence ---------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "kind": "flow",
            "dim": self.dim,
            "n_layers": self.n_layers,
            "hidden": list(self.hidden),
            "autoregressive": self.autoregressive,
            "residual": self.residual,
            "orderings": [layer.order.tolist() for layer in self.layers],
            "normalization": self.normalization.to_dict(),
            "inc_shift": self.inc_shift.tolist(),
            "inc_scale": self.inc_scale.tolist(),
            "seed": self.seed,
            "config_hash": self.config_hash,
            "system": self.system,
            "lag": self.lag,
            "extra": self.extra,
            "layer_files": [f"layer_{k}.bin" for k in range(self.n_layers)],
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        man = self.manifest()
        for layer, name in zip(self.layers, man["layer_files"]):
            layer.net.save(directory / name, seed=self.seed)
        (directory / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "FlowModel":
        directory = Path(directory)
        man = json.loads((directory / "manifest.json").read_text())
        if man.get("kind") != "flow":
            raise ShapeError(f"{directory} does not hold a flow model")
        nets = [MLPParams.load(directory / name) for name in man["layer_files"]]
        model = build_flow(
            man["dim"],
            n_layers=man["n_layers"],
            hidden=tuple(man["hidden"]),
            autoregressive=man["autoregressive"],
            residual=man["residual"],
            normalization=Normalization.from_dict(man["normalization"]),
            seed=None,
        )
        model.params[:] = np.concatenate([n.flat for n in nets])
        for layer, order in zip(model.layers, man["orderings"]):
            if layer.order.tolist() != order:
                raise ShapeError("stored ordering does not match the rebuilt layer")
        model.inc_shift = np.asarray(man["inc_shift"], dtype=np.float64)
        model.inc_scale = np.asarray(man["inc_scale"], dtype=np.float64)
        model.seed = man["seed"]
        model.config_hash = man["config_hash"]
        model.system = man.get("system")
        model.lag = man.get("lag")
        model.extra = man.get("extra", {})
        return model


def _layer_sizes(dim, hidden, autoregressive):
    n_in = 2 * dim if autoregressive else dim
    return (n_in, *hidden, 2 * dim)


def build_flow(dim: int, n_layers: int = 5, hidden=HIDDEN, autoregressive: bool = True,
               residual: bool = True, normalization: Normalization | None = None, seed: int | None = 0,
               inc_shift=None, inc_scale=None) -> FlowModel:
    """Fresh model with Glorot-initialized conditioners.

    Consecutive layers reverse the coordinate ordering.  ``seed=None`` leaves
    all parameters at zero (every layer is then the identity).
    """
    if dim < 1 or n_layers < 1:
        raise ShapeError("dim and n_layers must be positive")
    autoregressive = bool(autoregressive and dim > 1)
    sizes = _layer_sizes(dim, tuple(hidden), autoregressive)
    per_layer = MLPParams.count(sizes)
    flat = np.zeros(per_layer * n_layers)
    rng = None if seed is None else np.random.default_rng(seed)
    layers = []
    for k in range(n_layers):
        order = np.arange(dim) if k % 2 == 0 else np.arange(dim)[::-1].copy()
        masks = None
        if autoregressive:
            ranks = np.empty(dim, dtype=int)
            ranks[order] = np.arange(1, dim + 1)
            masks = made_masks(dim, ranks, tuple(hidden))
        view = flat[k * per_layer : (k + 1) * per_layer]
        if rng is not None:
            view[:] = init_params(sizes, rng, masks).flat
        layers.append(FlowLayer(order, MLPParams(sizes, view, masks), autoregressive))
    return FlowModel(
        dim=dim,
        layers=layers,
        params=flat,
        normalization=normalization if normalization is not None else Normalization.identity(dim),
        residual=residual,
        inc_shift=inc_shift,
        inc_scale=inc_scale,
        hidden=tuple(hidden),
        autoregressive=autoregressive,
        seed=seed,
    )


def _rebind(model: FlowModel, flat: np.ndarray) -> FlowModel:
    """Same architecture, conditioner views pointing into ``flat``."""
    layers = []
    pos = 0
    for layer in model.layers:
        n = layer.net.n_params
        layers.append(FlowLayer(layer.order, MLPParams(layer.net.sizes, flat[pos : pos + n], layer.net.masks),
                                layer.autoregressive))
        pos += n
    return FlowModel(
        dim=model.dim, layers=layers, params=flat, normalization=model.normalization,
        residual=model.residual, inc_shift=model.inc_shift.copy(), inc_scale=model.inc_scale.copy(),
        hidden=model.hidden, autoregressive=model.autoregressive, seed=model.seed,
        config_hash=model.config_hash, system=model.system, lag=model.lag, extra=dict(model.extra),
    )


# ---------------------------------------------------------------------------
# evaluation in normalized units


def _conditioner(layer: FlowLayer, x0n, u):
    inp = np.concatenate([x0n, u], axis=1) if layer.autoregressive else x0n
    out, tape = mlp_forward(layer.net, inp)
    dim = x0n.shape[1]
    m = out[:, :dim]
    raw_s = out[:, dim:]
    s = np.clip(raw_s, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    return m, s, raw_s, tape


def _check(layer_index, *arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericalInstability(f"non-finite conditioner output in layer {layer_index}", layer=layer_index)


def _base_to_increment(model: FlowModel, x0n, z):
    v = z
    for k, layer in enumerate(model.layers):
        if layer.autoregressive:
            u = np.zeros_like(v)
            for j in layer.order:
                m, s, _, _ = _conditioner(layer, x0n, u)
                _check(k, m[:, j], s[:, j])
                u[:, j] = m[:, j] + np.exp(s[:, j]) * v[:, j]
        else:
            m, s, _, _ = _conditioner(layer, x0n, None)
            _check(k, m, s)
            u = m + np.exp(s) * v
        v = u
    return v


def _increment_to_base(model: FlowModel, x0n, d, keep_tapes=False):
    """Inverse pass; returns ``z``, per-record sum of log-scales, and the tapes."""
    u = d
    sum_s = np.zeros(d.shape[0])
    records = []
    for k in range(model.n_layers - 1, -1, -1):
        layer = model.layers[k]
        m, s, raw_s, tape = _conditioner(layer, x0n, u)
        _check(k, m, s)
        v = (u - m) * np.exp(-s)
        sum_s += s.sum(axis=1)
        if keep_tapes:
            records.append((k, s, raw_s, v, tape))
        u = v
    return u, sum_s, records


def _to_increment(model, x0n, x1n):
    base = x1n - x0n if model.residual else x1n
    return (base - model.inc_shift) / model.inc_scale


def _from_increment(model, x0n, d):
    base = model.inc_shift + model.inc_scale * d
    return base + x0n if model.residual else base


def log_likelihood_normalized(model: FlowModel, x0n, x1n) -> np.ndarray:
    """Per-record log density of physical ``x1`` given normalized inputs."""
    z, sum_s, _ = _increment_to_base(model, x0n, _to_increment(model, x0n, x1n))
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * model.dim * LOG_2PI - sum_s - model.const_log_det


def nll_and_grad_normalized(model: FlowModel, x0n, x1n) -> tuple[float, np.ndarray]:
    """Mean NLL over the batch and its exact gradient w.r.t. ``model.params``."""
    n = x0n.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    z, sum_s, records = _increment_to_base(model, x0n, _to_increment(model, x0n, x1n), keep_tapes=True)
    nll = 0.5 * np.sum(z * z, axis=1) + 0.5 * model.dim * LOG_2PI + sum_s + model.const_log_det
    loss = float(nll.mean())
    if not math.isfinite(loss):
        raise NumericalInstability(
            "non-finite loss",
            diagnostics={"batch_size": n, "n_nonfinite": int(np.sum(~np.isfinite(nll))),
                         "max_abs_z": float(np.nanmax(np.abs(z)))},
        )
    grad = np.empty(model.n_params)
    offsets = np.cumsum([0] + [layer.net.n_params for layer in model.layers])
    dim = model.dim
    g_v = z / n
    # records run from the last layer down to the first; walk them back up
    for k, s, raw_s, v, tape in reversed(records):
        layer = model.layers[k]
        inv_scale = np.exp(-s)
        g_m = -g_v * inv_scale
        g_s = (-g_v * v + 1.0 / n) * ((raw_s >= -LOG_SCALE_CLAMP) & (raw_s <= LOG_SCALE_CLAMP))
        g_in, g_params = mlp_backward(layer.net, tape, np.concatenate([g_m, g_s], axis=1))
        grad[offsets[k] : offsets[k + 1]] = g_params
        g_v = g_v * inv_scale
        if layer.autoregressive:
            g_v = g_v + g_in[:, dim:]
    return loss, grad


# ---------------------------------------------------------------------------
# public API in physical units


def _batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != model.dim:
        raise ShapeError(f"expected {model.dim} slow coordinates, got {xb.shape[1]}")
    return xb, single


def flow_sample(model: FlowModel, x0, z) -> np.ndarray:
    """Push base draws ``z`` through the flow conditioned on ``x0`` (physical units)."""
    x0b, single = _batch(model, x0)
    zb, _ = _batch(model, z)
    if x0b.shape[0] != zb.shape[0]:
        x0b = np.broadcast_to(x0b, zb.shape)
    x0n = model.normalization.apply(x0b)
    x1n = _from_increment(model, x0n, _base_to_increment(model, x0n, zb))
    x1 = model.normalization.invert(x1n)
    return x1[0] if single and zb.shape[0] == 1 else x1


def flow_inverse(model: FlowModel, x0, x1):
    """``(z, log|det dz/dx1|)`` for physical ``x1`` given ``x0``."""
    x0b, single = _batch(model, x0)
    x1b, single1 = _batch(model, x1)
    if x0b.shape[0] != x1b.shape[0]:
        x0b = np.broadcast_to(x0b, x1b.shape)
    x0n = model.normalization.apply(x0b)
    x1n = model.normalization.apply(x1b)
    z, sum_s, _ = _increment_to_base(model, x0n, _to_increment(model, x0n, x1n))
    logdet = -sum_s - model.const_log_det
    if single and single1:
        return z[0], float(logdet[0])
    return z, logdet


def log_likelihood(model: FlowModel, x0, x1):
    """log p(x1 | x0) in physical units (scalar for single records)."""
    z, logdet = flow_inverse(model, x0, x1)
    z2 = np.atleast_2d(z)
    out = -0.5 * np.sum(z2 * z2, axis=1) - 0.5 * model.dim * LOG_2PI + logdet
    return float(out[0]) if np.ndim(logdet) == 0 else out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]
