import math

import numpy as np
import pytest

from conftest import central_diff, rel_err
from npnf import ad
from npnf.field import (FieldConfig, FieldParams, eval_field, eval_points, init_field,
                        positional_encode, ray_field)

SMALL = FieldConfig(n_layers=2, width=8, l_pos=3, l_dir=2)


def test_encoding_at_origin():
    enc = positional_encode(np.zeros(3), 4)
    assert enc.shape == (27,)
    np.testing.assert_array_equal(enc[:3], 0.0)
    for k in range(4):
        block = enc[3 + 6 * k: 9 + 6 * k]
        np.testing.assert_array_equal(block[:3], 0.0)
        np.testing.assert_array_equal(block[3:], 1.0)


def test_encoding_lengths():
    v = np.array([0.1, -0.2, 0.3])
    np.testing.assert_array_equal(positional_encode(v, 0), v)
    assert positional_encode(v, 10).shape == (63,)
    assert positional_encode(np.ones((5, 3)), 2).shape == (5, 15)


def test_encoding_frequencies():
    v = np.array([0.25, 0.0, 0.0])
    enc = positional_encode(v, 2)
    assert enc[3] == pytest.approx(math.sin(math.pi * 0.25))
    assert enc[9] == pytest.approx(math.sin(2 * math.pi * 0.25))
    assert enc[12] == pytest.approx(math.cos(2 * math.pi * 0.25), abs=1e-15)


def test_parameter_count():
    cfg = FieldConfig()
    assert cfg.n_params == sum((fi + 1) * fo for _, fi, fo in cfg.layers())
    # chained dimensions
    layers = cfg.layers()
    for (_, _, fo), (name, fi, _) in zip(layers[:cfg.n_layers], layers[1:cfg.n_layers + 1]):
        assert fi == fo
    with pytest.raises(ValueError):
        FieldParams(cfg, np.zeros(cfg.n_params - 1))


def test_zero_weights_closed_form():
    theta = np.zeros(SMALL.n_params)
    s = eval_field(theta, SMALL, np.array([0.3, 1.0, -2.0]), np.array([0.0, 0.0, 1.0]))
    assert float(s.sigma) == pytest.approx(math.log(2.0), abs=1e-15)
    np.testing.assert_allclose(s.c, 0.5, atol=1e-15)


def test_glorot_bounds_and_seed():
    a, b = init_field(SMALL, seed=3), init_field(SMALL, seed=3)
    assert a.flat.tobytes() == b.flat.tobytes()
    assert not np.array_equal(a.flat, init_field(SMALL, seed=4).flat)
    k = 0
    for _, fi, fo in SMALL.layers():
        W = a.flat[k:k + fi * fo]
        assert np.abs(W).max() <= math.sqrt(6 / (fi + fo))
        k += fi * fo
        assert np.all(a.flat[k:k + fo] == 0)
        k += fo


def test_output_ranges_on_random_inputs():
    rng = np.random.default_rng(0)
    theta = init_field(FieldConfig(), seed=1).flat
    x = rng.uniform(-20, 20, size=(10_000, 3))
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rgb, sigma = eval_points(theta, FieldConfig(), x, positional_encode(d, 2))
    assert np.all(np.isfinite(rgb)) and np.all(np.isfinite(sigma))
    assert np.all(sigma >= 0)
    assert np.all((rgb >= 0) & (rgb <= 1))


def test_density_ignores_direction():
    rng = np.random.default_rng(1)
    theta = init_field(SMALL, seed=2).flat
    x = rng.normal(size=3)
    d1, d2 = rng.normal(size=(2, 3))
    s1 = eval_field(theta, SMALL, x, d1 / np.linalg.norm(d1))
    s2 = eval_field(theta, SMALL, x, d2 / np.linalg.norm(d2))
    assert float(s1.sigma) == float(s2.sigma)
    assert not np.allclose(s1.c, s2.c)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    theta0 = init_field(SMALL, seed=5).flat + rng.normal(scale=0.1, size=SMALL.n_params)
    x0 = rng.normal(size=3)
    d = np.array([0.6, 0.0, 0.8])
    w = rng.normal(size=4)

    def f(theta, x):
        s = eval_field(theta, SMALL, x, d)
        return ad.dot(s.c, w[:3]) + s.sigma * w[3]

    tape = ad.Tape()
    tv, xv = tape.leaf(theta0), tape.leaf(x0)
    g_theta, g_x = ad.backward(tape, f(tv, xv), [tv, xv])
    assert rel_err(g_theta, central_diff(lambda t: float(f(t, x0)), theta0)) < 1e-6
    assert rel_err(g_x, central_diff(lambda z: float(f(theta0, z)), x0)) < 1e-6


def test_ray_field_matches_pointwise():
    rng = np.random.default_rng(3)
    theta = init_field(SMALL, seed=0).flat
    pts = rng.normal(size=(4, 5, 3))
    dirs = rng.normal(size=(4, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rgb, sigma = ray_field(theta, SMALL)(pts, dirs)
    for r in range(4):
        for k in range(5):
            s = eval_field(theta, SMALL, pts[r, k], dirs[r])
            np.testing.assert_allclose(rgb[r, k], s.c, atol=1e-14)
            assert sigma[r, k] == pytest.approx(float(s.sigma), abs=1e-14)
