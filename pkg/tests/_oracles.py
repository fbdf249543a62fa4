"""Independent numerical oracles shared by unit and acceptance tests."""

import numpy as np

from sfml.data import Normalization
from sfml.flow import build_flow, flow_inverse, flow_sample, log_likelihood, nll_and_grad_normalized


def random_model(dim, n_layers, autoregressive=True, seed=0, scale=0.3, residual=True):
    """Flow with Glorot weights plus random biases, non-trivial affines."""
    rng = np.random.default_rng(seed + 1000)
    norm = Normalization(rng.normal(size=dim), np.exp(rng.normal(scale=0.5, size=dim)))
    model = build_flow(dim, n_layers, autoregressive=autoregressive, residual=residual, normalization=norm,
                       seed=seed, inc_shift=rng.normal(scale=0.1, size=dim),
                       inc_scale=np.exp(rng.normal(scale=0.3, size=dim)))
    model.params += scale * rng.normal(size=model.n_params) * model.mask_flat()
    return model


def grad_check(model, x0n, x1n, rng, n_coords=40, rel=1e-5, h=1e-6, floor=1e-4):
    """Central differences of the mean NLL on random parameter coordinates.

    Returns the worst ``|g - fd| / max(|g|, |fd|, floor)``.
    """
    _, g = nll_and_grad_normalized(model, x0n, x1n)
    free = np.flatnonzero(model.mask_flat())
    worst = 0.0
    for i in rng.choice(free, size=min(n_coords, free.size), replace=False):
        old = model.params[i]
        model.params[i] = old + h
        fp, _ = nll_and_grad_normalized(model, x0n, x1n)
        model.params[i] = old - h
        fm, _ = nll_and_grad_normalized(model, x0n, x1n)
        model.params[i] = old
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), floor))
    return worst


def numeric_logdet(model, x0, x1, h=1e-6):
    """log|det dz/dx1| from a central-difference Jacobian of the inverse map."""
    d = model.dim
    jac = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        zp, _ = flow_inverse(model, x0, x1 + e)
        zm, _ = flow_inverse(model, x0, x1 - e)
        jac[:, k] = (zp - zm) / (2 * h)
    return np.linalg.slogdet(jac)[1], jac


def quadrature_mass(model, x0, n_grid=10_000, span=12.0, seed=0):
    """Trapezoid integral of p(x1 | x0) over sample mean +- span sample STDs (l = 1)."""
    z = np.random.default_rng(seed).standard_normal((10_000, 1))
    xs = flow_sample(model, np.tile(x0, (10_000, 1)), z)[:, 0]
    mu, sd = xs.mean(), xs.std()
    grid = np.linspace(mu - span * sd, mu + span * sd, n_grid)
    dens = np.exp(log_likelihood(model, np.tile(x0, (n_grid, 1)), grid[:, None]))
    return np.trapezoid(dens, grid)


def importance_mass(model, x0, n=1_000_000, seed=0):
    """Monte Carlo estimate of the integral of p(x1 | x0) under a wide Gaussian proposal."""
    rng = np.random.default_rng(seed)
    xs = flow_sample(model, np.tile(x0, (20_000, 1)), rng.standard_normal((20_000, model.dim)))
    mu = xs.mean(axis=0)
    cov = np.cov(xs.T) * 4.0  # inflate so the proposal tails dominate
    chol = np.linalg.cholesky(cov)
    e = rng.standard_normal((n, model.dim))
    y = mu + e @ chol.T
    log_q = (-0.5 * np.sum(e * e, axis=1) - 0.5 * model.dim * np.log(2 * np.pi)
             - np.sum(np.log(np.diag(chol))))
    w = np.exp(log_likelihood(model, np.tile(x0, (n, 1)), y) - log_q)
    return w.mean(), w.std() / np.sqrt(n)
