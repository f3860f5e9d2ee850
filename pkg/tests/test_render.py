import numpy as np
import pytest

from conftest import jitter_pose, random_cloud
from surfelba import sh as shmod
from surfelba.geometry import Intrinsics, Pose, pose_retract
from surfelba.losses import variance_loss
from surfelba.render import RenderAdjoint, RenderConfig, intersect, render, render_backward, render_reference
from surfelba.surfels import SurfelCloud

F64 = RenderConfig(dtype="float64", tile_size=8)
BUFFERS = ("color", "color2", "depth", "normal", "acc", "distortion")


def _stack(depths, colors, opacity_raw, scale=5.0):
    """Fronto-parallel surfels on the optical axis with exact DC colors."""
    n = len(depths)
    centers = np.array([[0.0, 0.0, d] for d in depths])
    sh = np.zeros((n, 1, 3))
    for i, c in enumerate(colors):
        # push the zero color below the clamp so it is exactly 0
        sh[i, 0] = (np.asarray(c, float) - 0.5) / shmod.C0 if np.any(c) else -1.0 / shmod.C0
    return SurfelCloud(centers, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 2), np.log(scale)),
                       np.asarray(opacity_raw, float), sh)


def test_central_hit():
    f = intersect([0, 0, 0], np.eye(3), [1.0, 1.0], [0, 0, -2.0], [0, 0, 1.0])
    assert (f.u, f.v, f.weight, f.t) == (0.0, 0.0, 1.0, 2.0)


def test_offset_hit_matches_gaussian():
    f = intersect([0, 0, 0], np.eye(3), [1.0, 1.0], [1.0, 0, -2.0], [0, 0, 1.0])
    assert f.weight == pytest.approx(np.exp(-0.5))


def test_parallel_ray_misses():
    assert intersect([0, 0, 0], np.eye(3), [1.0, 1.0], [0, 0, -2.0], [1.0, 0, 0]) is None


def test_edge_on_surfel_renders_finite():
    cl = SurfelCloud(np.array([[0, 0, 3.0]]), np.array([[np.cos(np.pi / 4), np.sin(np.pi / 4), 0, 0]]),
                     np.log([[0.3, 0.3]]), np.array([3.0]), np.full((1, 1, 3), 0.5))
    out = render(cl, Pose.identity(), Intrinsics.centered(20.0, 16, 16), F64)
    for k in BUFFERS:
        assert np.all(np.isfinite(getattr(out, k)))


def test_single_opaque_surfel():
    K = Intrinsics(10.0, 10.0, 0.5, 0.5, 1, 1)
    cl = _stack([2.0], [(0.2, 0.6, 0.9)], [40.0])
    out = render(cl, Pose.identity(), K, RenderConfig(dtype="float64", min_alpha=0.0))
    np.testing.assert_allclose(out.color[0, 0], [0.2, 0.6, 0.9], atol=1e-12)
    np.testing.assert_allclose(out.color2[0, 0], np.array([0.2, 0.6, 0.9]) ** 2, atol=1e-12)
    assert out.acc[0, 0] == pytest.approx(1.0)
    assert np.all(out.variance == 0.0)


def test_two_fragment_moments():
    # alpha 0.5 each, colors 0 then 1: weights 0.5, 0.25 -> E[c] = 0.25, E[c^2] = 0.25, Var = 0.1875
    K = Intrinsics(10.0, 10.0, 0.5, 0.5, 1, 1)
    cl = _stack([2.0, 3.0], [(0, 0, 0), (1, 1, 1)], [0.0, 0.0])
    out = render(cl, Pose.identity(), K, RenderConfig(dtype="float64", early_stop=False))
    w = out.ctx.w[out.ctx.inc]
    np.testing.assert_array_equal(np.sort(w), [0.25, 0.5])
    assert np.all(out.color[0, 0] == 0.25)
    assert np.all(out.color2[0, 0] == 0.25)
    assert np.all(out.variance[0, 0] == 0.1875)


def test_weights_and_transmittance_sum_to_one(rng, small_K):
    cfg = RenderConfig(dtype="float64", tile_size=8, early_stop=False)
    for _ in range(5):
        out = render(random_cloud(12, rng), jitter_pose(rng), small_K, cfg)
        assert np.abs(out.acc + out.transmittance - 1.0).max() < 1e-5


def test_variance_pre_clamp_is_nonnegative(rng, small_K):
    for _ in range(5):
        out = render(random_cloud(12, rng), jitter_pose(rng), small_K, F64)
        assert (out.color2 - out.color_fg ** 2).min() >= -1e-6


@pytest.mark.parametrize("seed", range(10))
def test_matches_sequential_compositor(seed, small_K):
    rng = np.random.default_rng(seed)
    cl = random_cloud(int(rng.integers(1, 12)), rng, degree=int(rng.integers(0, 3)))
    pose = jitter_pose(rng)
    out = render(cl, pose, small_K, F64)
    ref = render_reference(cl, pose, small_K, F64)
    for k in ref:
        assert np.abs(getattr(out, k) - ref[k]).max() <= 1e-10, k


def test_tile_size_does_not_change_output(rng, small_K):
    cl = random_cloud(10, rng)
    pose = jitter_pose(rng)
    a = render(cl, pose, small_K, RenderConfig(dtype="float64", tile_size=4))
    b = render(cl, pose, small_K, RenderConfig(dtype="float64", tile_size=16))
    for k in BUFFERS:
        assert np.abs(getattr(a, k) - getattr(b, k)).max() < 1e-12


def test_zero_adjoint_gives_zero_gradient(rng, small_K):
    cl = random_cloud(6, rng)
    out = render(cl, Pose.identity(), small_K, F64)
    gb = render_backward(cl, Pose.identity(), small_K, out, RenderAdjoint())
    for arr in (gb.d_center, gb.d_quat, gb.d_scale, gb.d_opacity, gb.d_sh, gb.d_pose):
        assert not np.any(arr)


def _fd_check(cl, pose, K, cfg, adj, rng, tol=1e-3):
    def f(c, p):
        o = render(c, p, K, cfg)
        return sum(np.sum(getattr(o, k) * getattr(adj, k)) for k in BUFFERS if getattr(adj, k) is not None)

    gb = render_backward(cl, pose, K, render(cl, pose, K, cfg), adj)
    h = 1e-6
    for name, gname in [("centers", "d_center"), ("quats", "d_quat"), ("log_scales", "d_scale"),
                        ("opacity_raw", "d_opacity"), ("sh", "d_sh")]:
        d = rng.normal(size=getattr(cl, name).shape)
        a, b = cl.copy(), cl.copy()
        setattr(a, name, getattr(a, name) + h * d)
        setattr(b, name, getattr(b, name) - h * d)
        fd = (f(a, pose) - f(b, pose)) / (2 * h)
        an = float(np.sum(getattr(gb, gname) * d))
        assert abs(fd - an) <= tol * max(abs(fd), 1e-8), name
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        fd = (f(cl, pose_retract(pose, e)) - f(cl, pose_retract(pose, -e))) / (2 * h)
        an = float(gb.d_pose[0, k])
        assert abs(fd - an) <= tol * max(abs(fd), 1e-8), f"pose[{k}]"


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    K = Intrinsics.centered(20.0, 16, 12)
    cfg = RenderConfig(dtype="float64", tile_size=8, background=(0.2, 0.3, 0.1))
    adj = RenderAdjoint(**{k: rng.normal(size=(12, 16, 3) if k in ("color", "color2", "normal") else (12, 16))
                           for k in BUFFERS})
    _fd_check(random_cloud(8, rng, degree=2), jitter_pose(rng), K, cfg, adj, rng)


def test_single_surfel_opacity_gradient(rng):
    K = Intrinsics.centered(12.0, 8, 8)
    cl = random_cloud(1, rng, degree=0)
    cfg = RenderConfig(dtype="float64")
    adj = RenderAdjoint(color=rng.normal(size=(8, 8, 3)))
    gb = render_backward(cl, Pose.identity(), K, render(cl, Pose.identity(), K, cfg), adj)
    h = 1e-5
    a, b = cl.copy(), cl.copy()
    a.opacity_raw = a.opacity_raw + h
    b.opacity_raw = b.opacity_raw - h
    fd = (np.sum(render(a, Pose.identity(), K, cfg).color * adj.color)
          - np.sum(render(b, Pose.identity(), K, cfg).color * adj.color)) / (2 * h)
    assert abs(fd - gb.d_opacity[0]) <= 1e-3 * abs(fd)


def test_single_layer_variance_is_bernoulli():
    # one fragment with coverage a and color c: E[c^2] - E[c]^2 = a (1 - a) c^2
    K = Intrinsics.centered(8.0, 8, 8)
    c = np.array([0.3, 0.4, 0.5])
    out = render(_stack([2.0], [c], [40.0], scale=50.0), Pose.identity(), K, F64)
    a = out.acc[..., None]
    np.testing.assert_allclose(out.color2 - out.color_fg ** 2, a * (1 - a) * c ** 2, atol=1e-12)
    loss, _ = variance_loss(out)
    assert loss == pytest.approx(float(np.mean(a * (1 - a) * c ** 2)), abs=1e-12)
