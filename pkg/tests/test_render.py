import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from npnf import ad, geom, synth
from npnf.field import FieldConfig, init_field, ray_field
from npnf.render import (RenderConfig, composite, render_image, render_pixels, render_ray,
                         sample_along_ray)

K = geom.Intrinsics.centered(8, 8, 8.0)
Z = np.array([0.0, 0.0, 1.0])


def constant_field(sigma0, color=(0.2, 0.5, 0.9)):
    c = np.asarray(color)

    def fn(points, dirs):
        shape = np.shape(points)[:-1]
        return np.broadcast_to(c, shape + (3,)), np.full(shape, float(sigma0))

    return fn


def shell_field(h0, width=1e-3, sigma=1e6):
    def fn(points, dirs):
        r = np.linalg.norm(points, axis=-1)
        s = np.where(np.abs(r - h0) < width, sigma, 0.0)
        return np.ones(s.shape + (3,)), s

    return fn


def test_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(h_near=1.0, h_far=1.0)
    with pytest.raises(ValueError):
        RenderConfig(n_samples=1)


def test_midpoint_samples():
    cfg = RenderConfig(h_near=1e-12, h_far=1.0, n_samples=2, stratified_noise=False)
    np.testing.assert_allclose(sample_along_ray(cfg), [0.25, 0.75], atol=1e-11)


@given(st.integers(2, 64), st.integers(0, 1000))
def test_samples_strictly_increasing_inside_bounds(n, seed):
    cfg = RenderConfig(h_near=0.5, h_far=3.0, n_samples=n)
    h = sample_along_ray(cfg, np.random.default_rng(seed), n_rays=3)
    assert np.all(np.diff(h, axis=1) > 0)
    assert h.min() >= 0.5 and h.max() < 3.0


def test_first_sample_mean_monte_carlo():
    cfg = RenderConfig(h_near=1.0, h_far=5.0, n_samples=8)
    h0 = sample_along_ray(cfg, np.random.default_rng(0), n_rays=100_000)[:, 0]
    bin_w = 4.0 / 8
    sd = bin_w / np.sqrt(12) / np.sqrt(len(h0))
    assert abs(h0.mean() - (1.0 + 0.5 * bin_w)) < 3 * sd


def test_empty_space():
    cfg = RenderConfig(stratified_noise=False)
    out = render_ray(constant_field(0.0), geom.Ray(np.zeros(3), Z), cfg)
    np.testing.assert_array_equal(out.color, 0.0)
    assert out.depth == 0.0 and out.trans_residual == 1.0
    img, z = render_image(constant_field(0.0), geom.PoseParam.identity(), K, cfg)
    assert img.shape == (8, 8, 3) and not img.any() and not z.any()


def test_homogeneous_medium_closed_form():
    sigma0, c = 0.3, np.array([0.2, 0.5, 0.9])
    cfg = RenderConfig(h_near=0.5, h_far=4.0, n_samples=1024, stratified_noise=False)
    out = render_ray(constant_field(sigma0, c), geom.Ray(np.zeros(3), Z), cfg)
    # quadrature starts at the first sample, half a bin past h_near
    length = cfg.h_far - sample_along_ray(cfg)[0]
    np.testing.assert_allclose(out.color, c * (1 - np.exp(-sigma0 * length)), atol=1e-3)
    np.testing.assert_allclose(out.color, c * (1 - np.exp(-sigma0 * 3.5)), atol=1e-3)


def test_hard_shell_depth():
    cfg = RenderConfig(h_near=0.1, h_far=10.0, n_samples=1000, stratified_noise=False)
    spacing = 9.9 / 1000
    out = render_ray(shell_field(3.7, width=spacing), geom.Ray(np.zeros(3), Z), cfg)
    assert out.trans_residual < 1e-12
    assert abs(out.depth - 3.7) <= spacing


def test_weights_normalise():
    rng = np.random.default_rng(0)
    sigma = rng.exponential(2.0, size=(50, 32)) * (rng.random((50, 32)) < 0.5)
    h = np.sort(rng.uniform(0.1, 6.0, size=(50, 32)), axis=1)
    out = composite(sigma, rng.random((50, 32, 3)), h, 6.0)
    np.testing.assert_allclose(out.weights.sum(axis=1) + out.trans_residual, 1.0, atol=1e-12)


def test_opacity_monotone_in_density():
    rng = np.random.default_rng(1)
    base = rng.exponential(1.0, size=(20, 16))
    h = np.tile(np.linspace(0.2, 3.0, 16), (20, 1))
    rgb = np.zeros((20, 16, 3))
    prev = composite(base, rgb, h, 3.2).trans_residual
    for k in (1.1, 2.0, 5.0):
        cur = composite(base * k, rgb, h, 3.2).trans_residual
        assert np.all(cur <= prev)
        prev = cur


def test_composite_gradients():
    rng = np.random.default_rng(2)
    s0 = rng.uniform(0.1, 2.0, size=(3, 6))
    c0 = rng.random((3, 6, 3))
    h = np.tile(np.linspace(0.5, 2.0, 6), (3, 1))
    w = rng.normal(size=(3, 3))

    def f(s, c):
        out = composite(s, c, h, 2.5)
        return ad.sum_(out.color * w) + ad.sum_(out.depth) + ad.sum_(out.trans_residual)

    tape = ad.Tape()
    sv, cv = tape.leaf(s0), tape.leaf(c0)
    gs, gc = ad.backward(tape, f(sv, cv), [sv, cv])
    assert rel_err(gs, central_diff(lambda s: float(f(s, c0)), s0)) < 1e-7
    assert rel_err(gc, central_diff(lambda c: float(f(s0, c)), c0)) < 1e-7


def test_pose_gradient_of_rendered_pixels():
    cfg_f = FieldConfig(2, 8, l_pos=3, l_dir=1)
    theta = init_field(cfg_f, seed=0).flat
    fieldfn = ray_field(theta, cfg_f)
    cfg = RenderConfig(h_near=0.5, h_far=4.0, n_samples=16, stratified_noise=False)
    px = np.array([[1, 2], [5, 6], [3, 3]])
    pose0 = np.array([0.05, -0.1, 0.02, 0.3, -0.2, 0.1])
    w = np.random.default_rng(3).normal(size=(3, 3))

    def f(p):
        c, z, _ = render_pixels(fieldfn, p, K, cfg, px)
        return ad.sum_(c * w) + 0.1 * ad.sum_(z)

    tape = ad.Tape()
    pv = tape.leaf(pose0)
    (g,) = ad.backward(tape, f(pv), [pv])
    assert rel_err(g, central_diff(lambda p: float(f(p)), pose0)) < 1e-4


def test_render_image_deterministic_and_chunk_independent():
    scene = synth.sphere_only_scene()
    pose = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 3.0])
    cfg = RenderConfig(h_near=0.5, h_far=6.0, n_samples=64)
    a = render_image(scene.field, pose, K, cfg, noise=True, rng=np.random.default_rng(4))
    b = render_image(scene.field, pose, K, cfg, noise=True, rng=np.random.default_rng(4))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    c1 = render_image(scene.field, pose, K, cfg, chunk=7)
    c2 = render_image(scene.field, pose, K, cfg, chunk=1024)
    assert c1[0].tobytes() == c2[0].tobytes()


def test_rendered_depth_is_z_depth():
    # hard shell at ray distance 3: off-axis z-depth shrinks by the ray cosine
    cfg = RenderConfig(h_near=0.1, h_far=6.0, n_samples=2000, stratified_noise=False)
    px = np.array([[0, 0], [4, 4]])
    _, z, _ = render_pixels(shell_field(3.0, width=0.003), np.zeros(6), K, cfg, px)
    np.testing.assert_allclose(z, 3.0 * geom.ray_cosines(K, px), atol=3e-3)
