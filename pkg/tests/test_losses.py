import math

import numpy as np
import pytest

from conftest import jitter_pose, random_cloud
from surfelba.geometry import Intrinsics, Pose
from surfelba.losses import (Correspondences, LossWeights, NonFiniteLossError, correspondence_loss,
                             lambda_var_schedule, photometric, reg_geometric, ssim, total_loss, variance_loss)
from surfelba.render import RenderConfig, render, render_backward
from test_render import _stack

F64 = RenderConfig(dtype="float64", tile_size=8)


def test_photometric_identity(rng):
    img = rng.random((8, 8, 3))
    loss, l1, s, _ = photometric(img, img)
    assert l1 == 0.0 and s == pytest.approx(1.0, abs=1e-12) and loss == pytest.approx(0.0, abs=1e-12)


def test_photometric_constant_offset(rng):
    gt = rng.random((8, 8, 3)) * 0.8
    lam = 0.2
    loss, l1, s, _ = photometric(gt + 0.1, gt, lam)
    assert l1 == pytest.approx(0.1)
    assert loss - lam * (1 - s) == pytest.approx(0.1 * (1 - lam))


def test_photometric_gradient(rng):
    pred, gt = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    _, _, _, g = photometric(pred, gt)
    d = rng.normal(size=pred.shape)
    h = 1e-6
    fd = (photometric(pred + h * d, gt)[0] - photometric(pred - h * d, gt)[0]) / (2 * h)
    assert abs(fd - np.sum(g * d)) <= 1e-3 * abs(fd)


def test_ssim_self_is_one(rng):
    x = rng.random((16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_size_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_plane_fit_has_zero_regularizers():
    K = Intrinsics.centered(8.0, 8, 8)
    out = render(_stack([2.0], [(0.5, 0.5, 0.5)], [40.0], scale=50.0), Pose.identity(), K, F64)
    _, dist, nterm, _ = reg_geometric(out, K)
    assert dist <= 1e-4 and nterm <= 1e-4


def test_coincident_fragments_have_zero_distortion():
    K = Intrinsics(10.0, 10.0, 0.5, 0.5, 1, 1)
    out = render(_stack([2.0, 2.0], [(0, 0, 0), (1, 1, 1)], [0.0, 0.0]), Pose.identity(), K, F64)
    assert out.distortion[0, 0] == 0.0


def test_two_layer_distortion_matches_pairwise_sum():
    K = Intrinsics(10.0, 10.0, 0.5, 0.5, 1, 1)
    cfg = RenderConfig(dtype="float64", early_stop=False)
    depths = [2.0, 2.5, 4.0]
    out = render(_stack(depths, [(0.2, 0.2, 0.2)] * 3, [0.0, 0.5, 1.0]), Pose.identity(), K, cfg)
    a = 1 / (1 + np.exp(-np.array([0.0, 0.5, 1.0])))
    w = a * np.concatenate([[1.0], np.cumprod(1 - a)[:-1]])
    A = cfg.dist_far / (cfg.dist_far - cfg.dist_near)
    m = [A * (1 - cfg.dist_near / t) for t in depths]
    oracle = sum(w[i] * w[j] * abs(m[i] - m[j]) for i in range(3) for j in range(3))
    assert out.distortion[0, 0] == pytest.approx(oracle, rel=1e-12)


def _pair_scene(d=2.0):
    K = Intrinsics.centered(20.0, 16, 16)
    pn, pm = Pose.identity(), Pose(translation=[-0.3, 0.0, 0.0])
    p_n = np.array([[0.3, 0.6], [0.55, 0.45]])
    ray = np.stack([(p_n[:, 0] * 16 - K.cx) / K.fx, (p_n[:, 1] * 16 - K.cy) / K.fy, np.ones(2)], axis=1)
    Xm = d * ray + pm.t
    p_m = np.stack([(K.fx * Xm[:, 0] / Xm[:, 2] + K.cx) / 16, (K.fy * Xm[:, 1] / Xm[:, 2] + K.cy) / 16], axis=1)
    depth = np.full((16, 16), d)
    acc = np.ones((16, 16))
    return K, [pn, pm], [depth, depth], [acc, acc], Correspondences(0, 1, p_n, p_m, np.ones(2))


def test_consistent_scene_has_zero_corr_loss():
    K, poses, depths, accs, c = _pair_scene()
    res = correspondence_loss([c], depths, accs, poses, K)
    assert res.loss == pytest.approx(0.0, abs=1e-20) and res.used == 2


@pytest.mark.parametrize("delta", [1e-4, 2e-4, 4e-4])
def test_corr_loss_quadratic_in_translation(delta):
    K, poses, depths, accs, c = _pair_scene(d=2.0)
    poses[1] = Pose(poses[1].rotation, poses[1].t + [delta, 0, 0])
    res = correspondence_loss([c], depths, accs, poses, K)
    r = K.fx * delta / 2.0 / 16  # normalized shift of a point at camera depth 2
    assert r < 1 / 16
    assert res.loss == pytest.approx(0.5 * r * r, rel=1e-9)


def test_corr_zero_weights():
    K, poses, depths, accs, c = _pair_scene()
    poses[1] = Pose(poses[1].rotation, poses[1].t + [0.01, 0, 0])
    c.weight[:] = 0.0
    res = correspondence_loss([c], depths, accs, poses, K)
    assert res.loss == 0.0 and not res.pose_grads.any()
    assert all(not a.any() for a in res.depth_adjoints.values())


def test_corr_pose_gradient():
    K, poses, depths, accs, c = _pair_scene()
    poses[1] = Pose(poses[1].rotation, poses[1].t + [0.004, -0.002, 0.01])
    res = correspondence_loss([c], depths, accs, poses, K)
    from surfelba.geometry import pose_retract
    h = 1e-7
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        lp = correspondence_loss([c], depths, accs, [poses[0], pose_retract(poses[1], e)], K).loss
        lm = correspondence_loss([c], depths, accs, [poses[0], pose_retract(poses[1], -e)], K).loss
        fd = (lp - lm) / (2 * h)
        assert abs(fd - res.pose_grads[1, k]) <= 1e-4 * max(abs(fd), 1e-6)


def test_variance_gradient_through_render():
    rng = np.random.default_rng(7)
    K = Intrinsics.centered(20.0, 16, 12)
    cl = random_cloud(4, rng, degree=1)
    pose = jitter_pose(rng)
    out = render(cl, pose, K, F64)
    _, adj = variance_loss(out)
    gb = render_backward(cl, pose, K, out, adj)
    h = 1e-6
    for name, gname in [("centers", "d_center"), ("opacity_raw", "d_opacity"), ("sh", "d_sh")]:
        d = rng.normal(size=getattr(cl, name).shape)
        a, b = cl.copy(), cl.copy()
        setattr(a, name, getattr(a, name) + h * d)
        setattr(b, name, getattr(b, name) - h * d)
        fd = (variance_loss(render(a, pose, K, F64))[0] - variance_loss(render(b, pose, K, F64))[0]) / (2 * h)
        assert abs(fd - np.sum(getattr(gb, gname) * d)) <= 1e-3 * max(abs(fd), 1e-10), name


def test_two_fragment_variance_loss():
    K = Intrinsics(10.0, 10.0, 0.5, 0.5, 1, 1)
    out = render(_stack([2.0, 3.0], [(0, 0, 0), (1, 1, 1)], [0.0, 0.0]), Pose.identity(), K,
                 RenderConfig(dtype="float64", early_stop=False))
    assert variance_loss(out)[0] == 0.1875


def test_schedule_endpoints():
    assert lambda_var_schedule(0, 1000) == 1.0
    assert lambda_var_schedule(1000, 1000) == 0.0
    assert lambda_var_schedule(500, 1000) == 0.5
    assert lambda_var_schedule(2000, 1000) == 0.0


def test_schedule_is_monotone():
    vals = [lambda_var_schedule(t, 100) for t in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[37] == 0.5 * (1 + math.cos(math.pi * 0.37))


def test_total_loss_combination():
    w = LossWeights(corr=2.0)
    rep = total_loss(0.3, 0.5, 0.7, w, 25, 100)
    assert rep.total == 0.3 + 2.0 * 0.5 + lambda_var_schedule(25, 100) * 0.7
    assert total_loss(0.0, 0.0, 0.0, w, 0, 100).total == 0.0


def test_doubling_corr_weight_doubles_contribution():
    a = total_loss(0.0, 0.5, 0.0, LossWeights(corr=1e-3), 0, 10).total
    b = total_loss(0.0, 0.5, 0.0, LossWeights(corr=2e-3), 0, 10).total
    assert b == 2 * a


def test_disabled_terms_drop_out():
    rep = total_loss(0.3, 0.5, 0.7, LossWeights(var_enabled=False, corr_enabled=False), 0, 10)
    assert rep.total == 0.3


def test_nonfinite_component_raises():
    with pytest.raises(NonFiniteLossError):
        total_loss(float("nan"), 0.0, 0.0, LossWeights(), 0, 10)
