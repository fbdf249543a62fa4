"""Small dense tanh networks with hand-written reverse mode.

Parameters of one network live in a single contiguous float64 vector; the
per-layer weight and bias arrays are reshaped *views* into it, so an
optimizer can update the flat vector in place.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import container
from .errors import ShapeError

HIDDEN = (20, 20, 20)


class MLPParams:
    """Weights/biases for ``sizes = (in, h1, ..., out)``; tanh on hidden layers.

    ``weights[i]`` has shape ``(sizes[i+1], sizes[i])``.  Optional 0/1
    ``masks`` (same shapes as the weights) zero out forbidden connections.
    """

    def __init__(self, sizes, flat=None, masks=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ShapeError("need at least an input and an output size")
        n = self.count(self.sizes)
        if flat is None:
            flat = np.zeros(n)
        if flat.shape != (n,) or flat.dtype != np.float64:
            raise ShapeError(f"flat vector must be float64 of length {n}")
        self.flat = flat
        self.weights, self.biases = [], []
        pos = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(flat[pos : pos + a * b].reshape(b, a))
            pos += a * b
            self.biases.append(flat[pos : pos + b])
            pos += b
        if masks is not None:
            masks = [np.asarray(m, dtype=np.float64) for m in masks]
            if [m.shape for m in masks] != [w.shape for w in self.weights]:
                raise ShapeError("mask shapes do not match the weights")
            if any(np.any((m != 0) & (m != 1)) for m in masks):
                raise ShapeError("masks must be 0/1")
        self.masks = masks

    @staticmethod
    def count(sizes) -> int:
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        return self.flat.size

    def effective_weights(self):
        if self.masks is None:
            return self.weights
        return [w * m for w, m in zip(self.weights, self.masks)]

    def mask_flat(self) -> np.ndarray:
        """0/1 vector over the flat layout (biases always free)."""
        out = np.ones(self.n_params)
        if self.masks is None:
            return out
        view = MLPParams(self.sizes, out)
        for w, m in zip(view.weights, self.masks):
            w[...] = m
        return out

    def masks_hash(self) -> str | None:
        if self.masks is None:
            return None
        h = hashlib.sha256()
        for m in self.masks:
            h.update(m.astype(np.uint8).tobytes())
        return h.hexdigest()

    def copy(self) -> "MLPParams":
        return MLPParams(self.sizes, self.flat.copy(), self.masks)

    def save(self, path, seed=None):
        header = {"kind": "mlp", "sizes": list(self.sizes), "masks_hash": self.masks_hash(), "seed": seed}
        if self.masks is not None:
            header["masks"] = [m.astype(int).tolist() for m in self.masks]
        return container.write(path, header, self.flat)

    @classmethod
    def load(cls, path) -> "MLPParams":
        header, flat = container.read(path)
        masks = header.get("masks")
        p = cls(header["sizes"], np.ascontiguousarray(flat), masks)
        if p.masks_hash() != header["masks_hash"]:
            raise ShapeError(f"{path}: mask hash mismatch")
        return p


@dataclass
class Tape:
    """Activations recorded by :func:`mlp_forward` for the backward pass."""

    sizes: tuple
    activations: list  # input followed by each hidden layer's tanh output
    squeeze: bool


def init_params(sizes, rng, masks=None) -> MLPParams:
    """Glorot-uniform weights, zero biases; masks applied after the draw."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    p = MLPParams(sizes, masks=masks)
    for w in p.weights:
        fan_out, fan_in = w.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    if masks is not None:
        for w, m in zip(p.weights, p.masks):
            w *= m
    return p


def mlp_forward(params: MLPParams, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.ndim != 2 or a.shape[1] != params.sizes[0]:
        raise ShapeError(f"input of shape {x.shape} does not match layer width {params.sizes[0]}")
    ws = params.effective_weights()
    acts = [a]
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, params.biases)):
        z = a @ w.T
        z += b
        if i < last:
            a = np.tanh(z, out=z)
            acts.append(a)
        else:
            a = z
    return (a[0] if squeeze else a), Tape(params.sizes, acts, squeeze)


def mlp_backward(params: MLPParams, tape: Tape, cotangent) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass for ``<mlp(x), cotangent>``.

    Returns the input cotangent and the gradient over the flat layout;
    gradients of masked-out weights are exactly zero.
    """
    if tape.sizes != params.sizes:
        raise ShapeError(f"tape recorded for {tape.sizes}, params are {params.sizes}")
    g = np.asarray(cotangent, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    n = tape.activations[0].shape[0]
    if g.shape != (n, params.sizes[-1]):
        raise ShapeError(f"cotangent of shape {g.shape} does not match output ({n}, {params.sizes[-1]})")
    grad = np.empty(params.n_params)
    gview = MLPParams(params.sizes, grad)
    ws = params.effective_weights()
    for i in range(len(ws) - 1, -1, -1):
        a_in = tape.activations[i]
        gw = g.T @ a_in
        if params.masks is not None:
            gw *= params.masks[i]
        gview.weights[i][...] = gw
        gview.biases[i][...] = g.sum(axis=0)
        g = g @ ws[i]
        if i > 0:
            dt = a_in * a_in
            np.subtract(1.0, dt, out=dt)
            g *= dt
    return (g[0] if tape.squeeze else g), grad


def made_masks(n_cond: int, ranks, hidden=HIDDEN, n_out_groups: int = 2):
    """MADE connectivity for a conditioner reading ``[cond, u]``.

    ``ranks[j]`` (1-based) is the position of coordinate ``j`` in the
    autoregressive ordering.  Conditioning inputs get degree 0, so every unit
    may see them; output group ``g`` coordinate ``j`` only sees hidden units
    of degree below ``ranks[j]``.  Outputs are laid out ``[g0_1..g0_l, g1_1..g1_l, ...]``.
    """
    ranks = np.asarray(ranks, dtype=int)
    ell = ranks.size
    deg_in = np.concatenate([np.zeros(n_cond, dtype=int), ranks])
    degs = [deg_in]
    for h in hidden:
        degs.append(np.arange(h) % ell)
    masks = []
    for a, b in zip(degs[:-1], degs[1:]):
        masks.append((b[:, None] >= a[None, :]).astype(np.float64))
    deg_out = np.tile(ranks, n_out_groups)
    masks.append((deg_out[:, None] > degs[-1][None, :]).astype(np.float64))
    return masks
