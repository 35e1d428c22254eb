import numpy as np
import pytest

from conftest import central_diff, rel_err
from npnf import ad, geom, synth
from npnf.depthprior import cloud_at, sample_pixels
from npnf.field import FieldConfig, init_field
from npnf.losses import (Batch, LossWeights, NoVisibleOverlap, Scene, Setup, chamfer, combine,
                         loss_depth, loss_pc, loss_rgb, loss_rgb_surface, loss_terms, pair_pc,
                         total_loss)
from npnf.render import RenderConfig, sample_along_ray

# textured fronto-parallel plane at depth 2, seen by two cameras a few pixels apart
W = 64
KP = geom.Intrinsics.centered(W, W, 64.0)
DEPTH = 2.0
GRID = np.stack([a.ravel() for a in np.mgrid[0:W, 0:W][::-1]], axis=1)


def texture(X, Y):
    return np.stack([0.5 + 0.3 * np.sin(2 * X) * np.cos(3 * Y),
                     0.5 + 0.2 * np.cos(X + Y),
                     0.4 + 0.3 * np.sin(3 * Y - X)], axis=-1)


def plane_pair(shift_px):
    """Images, depth maps and transforms for camera j offset by ``shift_px`` along x."""
    cx = DEPTH / KP.fx * shift_px
    pts = geom.backproject(np.full(len(GRID), DEPTH), KP, GRID)
    img_i = texture(pts[:, 0], pts[:, 1]).reshape(W, W, 3)
    img_j = texture(pts[:, 0] + cx, pts[:, 1]).reshape(W, W, 3)
    Ti = geom.RigidTransform.identity()
    Tj = geom.pose_to_transform(np.array([0, 0, 0, -cx, 0, 0.0]))
    D = np.full((W, W), DEPTH)
    return img_i, img_j, D, Ti, Tj


# ------------------------------------------------------------------ simple terms


def test_loss_rgb():
    rng = np.random.default_rng(0)
    a = rng.random((30, 3))
    assert loss_rgb(a, a) == 0.0
    assert loss_rgb(a + 0.1, a) == pytest.approx(0.01, abs=1e-15)
    b = rng.random((30, 3))
    two_pass = sum(sum((a[r, c] - b[r, c]) ** 2 for c in range(3)) for r in range(30)) / 90
    assert loss_rgb(a, b) == pytest.approx(two_pass, rel=1e-13)


def test_loss_depth():
    d = np.linspace(1, 3, 10)
    assert loss_depth(d, d) == 0.0
    assert loss_depth(d + 0.3, d) == pytest.approx(0.3)
    assert loss_depth(d + 0.3, d, norm="l2") == pytest.approx(0.09)
    with pytest.raises(ValueError):
        loss_depth(d, d, norm="huber")


def test_depth_gradient_wrt_alpha():
    rng = np.random.default_rng(1)
    D = rng.uniform(1, 3, 20)
    rendered = rng.uniform(1, 4, 20)
    tape = ad.Tape()
    a, b = tape.leaf(1.2), tape.leaf(0.1)
    (ga,) = ad.backward(tape, loss_depth(a * D + b, rendered), [a])
    expected = np.mean(np.sign(1.2 * D + 0.1 - rendered) * D)
    assert float(ga) == pytest.approx(expected, rel=1e-14)


# --------------------------------------------------------------------- chamfer


def brute_chamfer(A, B):
    def one_side(X, Y):
        total = 0.0
        for x in X:
            total += min(np.sqrt(sum((x[k] - y[k]) ** 2 for k in range(3))) for y in Y)
        return total / len(X)
    return one_side(A, B) + one_side(B, A)


def test_chamfer_examples():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(25, 3))
    assert chamfer(P, P) == 0.0
    assert chamfer(np.zeros((1, 3)), np.array([[0.0, 3.0, 4.0]])) == pytest.approx(10.0)
    for _ in range(5):
        A, B = rng.normal(size=(50, 3)), rng.normal(size=(37, 3))
        assert abs(chamfer(A, B) - brute_chamfer(A, B)) < 1e-12
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), P)


def test_chamfer_gradient_through_fixed_matching():
    rng = np.random.default_rng(3)
    A0, B = rng.normal(size=(15, 3)), rng.normal(size=(12, 3))
    tape = ad.Tape()
    A = tape.leaf(A0)
    (g,) = ad.backward(tape, chamfer(A, B), [A])
    assert rel_err(g, central_diff(lambda x: float(chamfer(x, B)), A0)) < 1e-6


# ---------------------------------------------------------------- point clouds


def test_loss_pc_identical_frames_is_zero():
    rng = np.random.default_rng(4)
    D = rng.uniform(1, 3, size=(W, W))
    T = geom.pose_to_transform(np.array([0.1, 0.2, -0.1, 0.3, 0.0, 1.0]))
    c = cloud_at(D, 1.0, 0.0, KP, sample_pixels(W, W, 200, rng))
    assert loss_pc([(0, 1)], {0: T, 1: T}, {0: c, 1: c}) < 1e-12


def test_loss_pc_dense_plane_is_sampling_limited():
    _, _, D, Ti, Tj = plane_pair(1.0)
    ci = cloud_at(D, 1.0, 0.0, KP, GRID)
    cj = cloud_at(D, 1.0, 0.0, KP, GRID)
    assert loss_pc([(0, 1)], {0: Ti, 1: Tj}, {0: ci, 1: cj}) < 1e-3


def two_frame_scene():
    K = geom.Intrinsics.centered(32, 32, 32.0)
    tr = synth.make_trajectory("orbit", 2, sweep_deg=10)
    ds = synth.make_dataset(synth.default_scene(), tr, K, None, n_quad=256)
    return ds, K


def test_loss_pc_increases_away_from_ground_truth():
    ds, K = two_frame_scene()
    rng = np.random.default_rng(5)
    ci = cloud_at(ds.depths[0], 1.0, 0.0, K, sample_pixels(32, 32, 600, rng))
    cj = cloud_at(ds.depths[1], 1.0, 0.0, K, sample_pixels(32, 32, 600, rng))
    Ti = geom.pose_to_transform(ds.gt_poses[0])
    base = float(pair_pc(Ti, geom.pose_to_transform(ds.gt_poses[1]), ci, cj))
    for _ in range(20):
        d = rng.normal(size=6)
        d *= 0.06 / np.linalg.norm(d)
        moved = geom.pose_to_transform(ds.gt_poses[1] + d)
        assert float(pair_pc(Ti, moved, ci, cj)) > base


def test_loss_pc_is_differentiable_in_poses_and_dists():
    ds, K = two_frame_scene()
    rng = np.random.default_rng(6)
    px = [sample_pixels(32, 32, 60, rng) for _ in range(2)]
    x0 = np.concatenate([ds.gt_poses[0] + 0.01, ds.gt_poses[1] - 0.01, [1.1, 0.05, 0.95, -0.03]])

    def f(x, pin=None):
        T = {0: geom.pose_to_transform(x[:6]), 1: geom.pose_to_transform(x[6:12])}
        c = {k: cloud_at(ds.depths[k], x[12 + 2 * k], x[13 + 2 * k], K, px[k]) for k in range(2)}
        return loss_pc([(0, 1)], T, c, pin)

    tape = ad.Tape()
    xv = tape.leaf(x0)
    (g,) = ad.backward(tape, f(xv), [xv])
    cj = cloud_at(ds.depths[1], x0[14], x0[15], K, px[1]).points
    scale = {(0, 1): float(np.mean(np.linalg.norm(cj, axis=1)))}
    assert rel_err(g, central_diff(lambda x: float(f(x, scale)), x0)) < 1e-4


# ------------------------------------------------------------- surface colour


def test_surface_colour_trivial_cases():
    img_i, _, D, Ti, _ = plane_pair(0.0)
    c = cloud_at(D, 1.0, 0.0, KP, GRID[::7])
    loss, n = loss_rgb_surface(Ti, Ti, c, img_i, img_i, KP)
    assert loss == 0.0 and n == len(c)
    flat = np.full((W, W, 3), 0.3)
    Tj = geom.pose_to_transform(np.array([0.05, -0.02, 0.01, 0.1, 0.0, 0.0]))
    loss, _ = loss_rgb_surface(Ti, Tj, c, flat, flat, KP)
    assert loss == 0.0


def test_surface_colour_on_textured_plane():
    img_i, img_j, D, Ti, Tj = plane_pair(2.37)
    # points near the left border leave camera j and are masked
    c = cloud_at(D, 1.0, 0.0, KP, GRID)
    base, n = loss_rgb_surface(Ti, Tj, c, img_i, img_j, KP)
    assert base < 1e-3 and n < len(c)
    rot = geom.pose_to_transform(np.array([0.0, np.radians(2.0), 0.0, *Tj.t]))
    worse, _ = loss_rgb_surface(Ti, rot, c, img_i, img_j, KP)
    assert worse > base


def test_surface_colour_no_overlap():
    img_i, _, D, Ti, _ = plane_pair(0.0)
    far = geom.pose_to_transform(np.array([0, 0, 0, -100.0, 0, 0]))
    with pytest.raises(NoVisibleOverlap):
        loss_rgb_surface(Ti, far, cloud_at(D, 1.0, 0.0, KP, GRID[:50]), img_i, img_i, KP)


# -------------------------------------------------------------- full objective


def small_problem(seed=0):
    K = geom.Intrinsics.centered(8, 8, 8.0)
    tr = synth.make_trajectory("orbit", 3, sweep_deg=20)
    ds = synth.make_dataset(synth.default_scene(), tr, K, synth.distortion_spec(3, seed),
                            n_quad=128)
    scene = Scene(ds.images, ds.depths, K)
    fc = FieldConfig(2, 8, l_pos=2, l_dir=1)
    setup = Setup(fc, RenderConfig(h_near=2.0, h_far=9.0, n_samples=8))
    rng = np.random.default_rng(seed)
    px = sample_pixels(8, 8, 10, rng)
    batch = Batch(1, px, sample_along_ray(setup.render, rng, n_rays=10, noise=True),
                  [(0, 1), (1, 2)], {f: sample_pixels(8, 8, 20, rng) for f in range(3)})
    theta = init_field(fc, seed).flat
    poses = ds.gt_poses + rng.normal(scale=0.01, size=(3, 6))
    return batch, theta, poses, ds.gt_dists.copy(), scene, setup


def test_default_weights():
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3) == (0.04, 1.0, 1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda2=-1.0)


def test_report_invariant_and_zero_weights():
    batch, theta, poses, dists, scene, setup = small_problem()
    rep, _ = total_loss(batch, theta, poses, dists, scene, setup, LossWeights())
    assert rep.total == pytest.approx(rep.l_rgb + 0.04 * rep.l_depth + rep.l_pc + rep.l_rgbs,
                                      abs=1e-12)
    assert min(rep.l_rgb, rep.l_depth, rep.l_pc, rep.l_rgbs) >= 0
    zero, _ = total_loss(batch, theta, poses, dists, scene, setup, LossWeights(0, 0, 0))
    assert zero.total == zero.l_rgb
    assert rep.counts["rays"] == 10 and rep.counts["pairs"] == 2


def test_total_gradient_is_weighted_sum_of_terms():
    batch, theta, poses, dists, scene, setup = small_problem(1)
    w = LossWeights(0.3, 0.7, 1.9)

    def grads(weights):
        return total_loss(batch, theta, poses, dists, scene, setup, weights)[1]

    full = grads(w)
    parts = [grads(LossWeights(0, 0, 0)), grads(LossWeights(1, 0, 0)),
             grads(LossWeights(0, 1, 0)), grads(LossWeights(0, 0, 1))]
    for name in ("theta", "poses", "dists"):
        rgb = parts[0][name]
        expected = rgb + sum(k * (p[name] - rgb) for k, p in zip((0.3, 0.7, 1.9), parts[1:]))
        np.testing.assert_allclose(full[name], expected, rtol=1e-10, atol=1e-13)


def test_trainable_subset_and_untaped_terms():
    batch, theta, poses, dists, scene, setup = small_problem(2)
    rep, grads = total_loss(batch, theta, poses, dists, scene, setup, LossWeights(),
                            trainable=("poses",))
    assert set(grads) == {"poses"} and grads["poses"].shape == (3, 6)
    terms, _ = loss_terms(batch, theta, poses, dists, scene, setup)
    assert float(combine(terms, LossWeights())) == pytest.approx(rep.total, abs=1e-12)
