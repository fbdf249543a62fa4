import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfml.errors import ShapeError
from sfml.nn import HIDDEN, MLPParams, init_params, made_masks, mlp_backward, mlp_forward


def naive_forward(params, x):
    # plain per-sample loop with explicit masks, no shared code with mlp_forward
    out = []
    n_layers = len(params.sizes) - 1
    for row in np.atleast_2d(x):
        a = list(row)
        for i in range(n_layers):
            w = params.weights[i] * (params.masks[i] if params.masks is not None else 1.0)
            z = [sum(w[r, c] * a[c] for c in range(len(a))) + params.biases[i][r] for r in range(w.shape[0])]
            a = [math.tanh(v) for v in z] if i < n_layers - 1 else z
        out.append(a)
    return np.array(out)


def fd_check(f, x, g, rel=1e-5, h=1e-6, floor=1e-4, idx=None):
    idx = range(x.size) if idx is None else idx
    for i in idx:
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        fd = (fp - fm) / (2 * h)
        assert abs(g[i] - fd) <= rel * max(abs(g[i]), abs(fd), floor), (i, g[i], fd)


def test_zero_params_zero_output():
    p = MLPParams((3, *HIDDEN, 4))
    out, _ = mlp_forward(p, np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(out, np.zeros(4))


def test_single_linear_identity():
    p = MLPParams((3, 3))
    p.weights[0][...] = np.eye(3)
    x = np.array([0.2, -1.5, 4.0])
    out, _ = mlp_forward(p, x)
    assert np.array_equal(out, x)


def test_forward_matches_naive_reimplementation():
    rng = np.random.default_rng(0)
    p = init_params((4, *HIDDEN, 2), rng)
    p.flat += rng.normal(scale=0.1, size=p.n_params)  # nonzero biases too
    x = rng.normal(size=(5, 4))
    out, _ = mlp_forward(p, x)
    ref = naive_forward(p, x)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)


def test_forward_shape_error():
    p = MLPParams((3, 5, 2))
    with pytest.raises(ShapeError):
        mlp_forward(p, np.zeros(4))


def test_flat_view_round_trip():
    rng = np.random.default_rng(1)
    p = MLPParams((2, 6, 3))
    vals = rng.normal(size=p.n_params)
    p.flat[:] = vals
    assert p.n_params == 2 * 6 + 6 + 6 * 3 + 3
    rebuilt = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(p.weights, p.biases)])
    assert np.array_equal(rebuilt, vals)
    p.weights[1][2, 4] = 7.5
    assert p.flat[2 * 6 + 6 + 2 * 6 + 4] == 7.5


def test_zero_cotangent_zero_gradients():
    p = init_params((3, *HIDDEN, 2), np.random.default_rng(2))
    _, tape = mlp_forward(p, np.ones((4, 3)))
    g_in, g_p = mlp_backward(p, tape, np.zeros((4, 2)))
    assert not g_in.any() and not g_p.any()


def test_linear_weight_gradient_by_hand():
    p = MLPParams((3, 2))
    x = np.array([0.5, -1.0, 2.0])
    cot = np.array([3.0, -0.5])
    _, tape = mlp_forward(p, x)
    g_in, g_p = mlp_backward(p, tape, cot)
    gv = MLPParams((3, 2), g_p)
    np.testing.assert_allclose(gv.weights[0], np.outer(cot, x))
    np.testing.assert_allclose(gv.biases[0], cot)


def test_stale_tape_rejected():
    p = MLPParams((3, 4, 2))
    _, tape = mlp_forward(MLPParams((3, 5, 2)), np.zeros(3))
    with pytest.raises(ShapeError):
        mlp_backward(p, tape, np.zeros(2))


ARCHS = {
    "hyper_l1": ((1, *HIDDEN, 2), None),
    "hyper_l2": ((2, *HIDDEN, 4), None),
    "made_l2": ((4, *HIDDEN, 4), made_masks(2, [1, 2])),
    "made_l2_rev": ((4, *HIDDEN, 4), made_masks(2, [2, 1])),
}


@pytest.mark.parametrize("arch", sorted(ARCHS))
def test_backward_matches_finite_differences(arch):
    sizes, masks = ARCHS[arch]
    rng = np.random.default_rng(sorted(ARCHS).index(arch))
    for _ in range(20):
        p = init_params(sizes, rng, masks)
        p.flat += 0.05 * rng.normal(size=p.n_params) * p.mask_flat()
        x = rng.normal(size=(3, sizes[0]))
        cot = rng.normal(size=(3, sizes[-1]))
        _, tape = mlp_forward(p, x)
        g_in, g_p = mlp_backward(p, tape, cot)

        def f_params():
            return float(np.sum(mlp_forward(p, x)[0] * cot))

        fd_check(f_params, p.flat, g_p, idx=rng.choice(p.n_params, 25, replace=False))
        xf = x.ravel()

        def f_input():
            return float(np.sum(mlp_forward(p, xf.reshape(x.shape))[0] * cot))

        fd_check(f_input, xf, g_in.ravel())


def test_glorot_bounds_and_zero_biases():
    p = init_params((20, 20, 20), np.random.default_rng(3))
    assert np.abs(p.weights[0]).max() <= math.sqrt(6 / 40)
    assert np.abs(p.weights[0]).max() > 0.9 * math.sqrt(6 / 40)
    assert all(not b.any() for b in p.biases)


def test_init_deterministic():
    a = init_params((2, *HIDDEN, 4), 9)
    b = init_params((2, *HIDDEN, 4), 9)
    assert np.array_equal(a.flat, b.flat)


def test_masks_are_binary_and_validated():
    masks = made_masks(2, [1, 2])
    assert all(set(np.unique(m)) <= {0.0, 1.0} for m in masks)
    with pytest.raises(ShapeError):
        MLPParams((4, *HIDDEN, 4), masks=[m * 0.5 for m in masks])


@pytest.mark.parametrize("ranks", [[1, 2], [2, 1], [3, 1, 2]])
def test_mask_jacobian_zeros_are_exact(ranks):
    ell = len(ranks)
    n_cond = ell
    masks = made_masks(n_cond, ranks)
    sizes = (n_cond + ell, *HIDDEN, 2 * ell)
    p = init_params(sizes, np.random.default_rng(4), masks)
    p.flat += 0.1 * p.mask_flat()  # all allowed connections active
    x = np.random.default_rng(5).normal(size=n_cond + ell)
    base, _ = mlp_forward(p, x)
    for k in range(n_cond + ell):
        xp = x.copy()
        xp[k] += 1e-3
        diff = mlp_forward(p, xp)[0] - base
        for out in range(2 * ell):
            j = out % ell
            if k < n_cond:
                assert diff[out] != 0.0  # conditioning inputs reach every output
            elif ranks[k - n_cond] >= ranks[j]:
                assert diff[out] == 0.0
            else:
                assert diff[out] != 0.0


def test_masked_gradients_zero():
    masks = made_masks(2, [1, 2])
    p = init_params((4, *HIDDEN, 4), np.random.default_rng(6), masks)
    _, tape = mlp_forward(p, np.ones((2, 4)))
    _, g = mlp_backward(p, tape, np.ones((2, 4)))
    assert not g[p.mask_flat() == 0].any()


def test_checkpoint_round_trip(tmp_path):
    masks = made_masks(2, [2, 1])
    p = init_params((4, *HIDDEN, 4), np.random.default_rng(7), masks)
    p.save(tmp_path / "p.bin", seed=7)
    q = MLPParams.load(tmp_path / "p.bin")
    assert np.array_equal(p.flat, q.flat)
    assert q.masks_hash() == p.masks_hash()


@settings(max_examples=20, deadline=None)
@given(n_in=st.integers(1, 4), n_out=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_batch_rows_are_independent(n_in, n_out, seed):
    rng = np.random.default_rng(seed)
    p = init_params((n_in, 5, n_out), rng)
    x = rng.normal(size=(4, n_in))
    out, _ = mlp_forward(p, x)
    for i in range(4):
        np.testing.assert_allclose(out[i], mlp_forward(p, x[i])[0], rtol=1e-13, atol=1e-15)
