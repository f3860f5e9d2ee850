import logging

import numpy as np
import pytest

from conftest import random_cloud
from surfelba import formats
from surfelba.formats import FormatError
from surfelba.geometry import Intrinsics, Pose
from surfelba.losses import Correspondences
from surfelba.metrics import DepthEval, TrajectoryEval, ate, rel_error
from surfelba.pointmap_align import PointMapPair
from surfelba.scene_io import (Camera, SceneBundle, SchemaError, read_bundle, read_checkpoint, write_bundle,
                               write_checkpoint)
from surfelba.synthetic import SyntheticSpec, generate_synthetic


def test_pfm_round_trip(tmp_path, rng):
    for shape in [(5, 7, 3), (4, 6)]:
        a = rng.normal(size=shape).astype(np.float32)
        formats.write_pfm(tmp_path / "a.pfm", a)
        np.testing.assert_array_equal(formats.read_pfm(tmp_path / "a.pfm"), a)


def test_pfm_rows_are_bottom_up(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    formats.write_pfm(tmp_path / "a.pfm", a)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw[:12] == b"Pf\n2 2\n-1.0\n"
    np.testing.assert_array_equal(np.frombuffer(raw[12:], "<f4"), [3, 4, 1, 2])


def test_truncated_pfm_names_file_and_offset(tmp_path, rng):
    formats.write_pfm(tmp_path / "a.pfm", rng.normal(size=(5, 7)).astype(np.float32))
    raw = (tmp_path / "a.pfm").read_bytes()
    (tmp_path / "b.pfm").write_bytes(raw[:-10])
    with pytest.raises(FormatError) as err:
        formats.read_pfm(tmp_path / "b.pfm")
    # header "Pf\n7 5\n-1.0\n" is 12 bytes
    assert "b.pfm" in str(err.value) and "byte 12" in str(err.value)


def test_matches_round_trip(tmp_path, rng):
    pa = rng.random((9, 2)).astype(np.float32).astype(float)
    pb = rng.random((9, 2)).astype(np.float32).astype(float)
    w = rng.random(9).astype(np.float32).astype(float)
    formats.write_matches_bin(tmp_path / "m.bin", pa, pb, w)
    formats.write_matches_json(tmp_path / "m.json", pa, pb, w)
    for got in (formats.read_matches_bin(tmp_path / "m.bin"), formats.read_matches_json(tmp_path / "m.json")):
        for x, y in zip(got, (pa, pb, w)):
            np.testing.assert_array_equal(x, y)


def test_matches_bad_magic(tmp_path):
    (tmp_path / "m.bin").write_bytes(b"NOPE\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        formats.read_matches_bin(tmp_path / "m.bin")


def test_png_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (6, 5, 3)) / 255.0
    formats.write_png(tmp_path / "i.png", img)
    np.testing.assert_array_equal(formats.read_png(tmp_path / "i.png"), img)


def _bundle(rng, posed=False):
    h, w = 6, 8
    img = lambda: rng.integers(0, 256, (h, w, 3)) / 255.0
    f32 = lambda a: a.astype(np.float32).astype(np.float64)
    pts = lambda: f32(rng.normal(size=(h, w, 3)))
    conf = lambda: f32(rng.random((h, w)))
    pairs = [PointMapPair(0, 1, pts(), pts(), conf(), conf()), PointMapPair(1, 0, pts(), pts(), conf(), conf())]
    corrs = [] if posed else [Correspondences(0, 1, f32(rng.random((5, 2))), f32(rng.random((5, 2))),
                                              f32(rng.random(5)))]
    K = Intrinsics.centered(10.0, w, h)
    cams = [Camera(Pose.identity(), K), Camera(Pose(translation=[0.5, 0, 0]), K)]
    return SceneBundle([img(), img()], [] if posed else pairs, corrs, cams, posed=posed)


def test_bundle_round_trip(tmp_path, rng):
    b = _bundle(rng)
    write_bundle(b, tmp_path)
    r = read_bundle(tmp_path)
    assert not r.posed and r.num_views == 2
    for a, c in zip(b.images, r.images):
        np.testing.assert_array_equal(a, c)
    for p, q in zip(sorted(b.pairs, key=lambda e: e.edge), sorted(r.pairs, key=lambda e: e.edge)):
        assert p.edge == q.edge
        for k in ("pts_n", "pts_m", "conf_n", "conf_m"):
            np.testing.assert_array_equal(getattr(p, k), getattr(q, k))
    c0, c1 = b.correspondences[0], r.correspondences[0]
    np.testing.assert_array_equal(c0.p_n, c1.p_n)
    np.testing.assert_array_equal(c0.weight, c1.weight)
    for a, c in zip(b.cameras, r.cameras):
        assert np.array_equal(a.pose.rotation, c.pose.rotation) and a.K == c.K


def test_posed_mode(tmp_path, rng, caplog):
    write_bundle(_bundle(rng, posed=True), tmp_path)
    with caplog.at_level(logging.WARNING):
        r = read_bundle(tmp_path)
    assert r.posed and not r.correspondences
    assert "posed mode" in caplog.text


def test_bundle_schema_errors(tmp_path, rng):
    write_bundle(_bundle(rng), tmp_path)
    (tmp_path / "meta.json").write_text('{"num_views": 2, "resolution": [8, 6]}')
    with pytest.raises(SchemaError) as err:
        read_bundle(tmp_path)
    assert "meta.json" in str(err.value) and "schema_version" in str(err.value)


def test_checkpoint_bit_exact(tmp_path, rng):
    cl = random_cloud(100, rng, degree=2)
    poses = [Pose(rng.normal(size=4), rng.normal(size=3)) for _ in range(3)]
    K = [Intrinsics.centered(20.0, 16, 12)] * 3
    write_checkpoint(cl, poses, tmp_path / "c.ply", K)
    cl2, poses2, K2 = read_checkpoint(tmp_path / "c.ply")
    for k in ("centers", "quats", "log_scales", "opacity_raw", "sh"):
        assert np.array_equal(getattr(cl, k), getattr(cl2, k)), k
    for p, q in zip(poses, poses2):
        assert np.array_equal(p.rotation, q.rotation) and np.array_equal(p.translation, q.translation)
    assert K2 == K
    elements, _ = formats.read_ply(tmp_path / "c.ply")
    assert len(elements["vertex"]["x"]) == 100


def test_checkpoint_float32_when_exact(tmp_path, rng):
    cl = random_cloud(10, rng)
    for k in ("centers", "quats", "log_scales", "opacity_raw", "sh"):
        setattr(cl, k, getattr(cl, k).astype(np.float32).astype(np.float64))
    write_checkpoint(cl, [Pose.identity()], tmp_path / "c.ply")
    assert b"property float x" in (tmp_path / "c.ply").read_bytes()[:2000]
    assert np.array_equal(read_checkpoint(tmp_path / "c.ply")[0].centers, cl.centers)


def test_checkpoint_renamed_property(tmp_path, rng):
    write_checkpoint(random_cloud(5, rng), [Pose.identity()], tmp_path / "c.ply")
    raw = (tmp_path / "c.ply").read_bytes()
    (tmp_path / "c.ply").write_bytes(raw.replace(b"property double rot_3", b"property double rot_9", 1))
    with pytest.raises(SchemaError) as err:
        read_checkpoint(tmp_path / "c.ply")
    assert "rot_3" in str(err.value)


def test_checkpoint_version_mismatch(tmp_path, rng):
    write_checkpoint(random_cloud(5, rng), [Pose.identity()], tmp_path / "c.ply")
    raw = (tmp_path / "c.ply").read_bytes()
    (tmp_path / "c.ply").write_bytes(raw.replace(b"surfelba_checkpoint 1", b"surfelba_checkpoint 7", 1))
    with pytest.raises(SchemaError):
        read_checkpoint(tmp_path / "c.ply")


def test_synthetic_zero_noise_pointmaps():
    sc = generate_synthetic(SyntheticSpec(seed=2))
    for v in range(3):
        e = next(p for p in sc.bundle.pairs if p.n == v)
        valid = e.conf_n > 0
        assert rel_error(DepthEval(e.pts_n[..., 2], sc.gt.depths[v], valid), align=False) == 0.0


def test_synthetic_outlier_count():
    sc = generate_synthetic(SyntheticSpec(num_views=6, corr_per_pair=200, outlier_rate=0.1, width=48, height=48))
    total = sum(len(c) for c in sc.bundle.correspondences)
    assert total >= 1000
    sc = generate_synthetic(SyntheticSpec(num_views=6, corr_per_pair=1000 // 15 + 1, outlier_rate=0.1,
                                          width=48, height=48))
    total = sum(len(c) for c in sc.bundle.correspondences)
    assert sum(int(o.sum()) for o in sc.gt.outliers) == round(0.1 * total)


def _umeyama_rmse(src, dst):
    # closed-form Sim3 written out independently of the library routine
    ms, md = src.mean(0), dst.mean(0)
    a, b = src - ms, dst - md
    U, S, Vt = np.linalg.svd(b.T @ a / len(src))
    D = np.diag([1, 1, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    s = np.trace(np.diag(S) @ D) / (a ** 2).sum(1).mean()
    res = md + s * (src - ms) @ R.T - dst
    return np.sqrt((res ** 2).sum(1).mean())


def test_synthetic_initial_ate_bookkeeping():
    sc = generate_synthetic(SyntheticSpec(num_views=5, pose_noise_deg=2.0, trans_noise=0.02, seed=4))
    gt_c = np.array([c.pose.center for c in sc.gt.cameras])
    noisy = gt_c + sc.gt.center_offsets
    np.testing.assert_allclose([c.pose.center for c in sc.bundle.cameras], noisy, atol=1e-12)
    for g, n, dR in zip(sc.gt.cameras, sc.bundle.cameras, sc.gt.rotation_offsets):
        np.testing.assert_allclose(n.pose.R, dR @ g.pose.R, atol=1e-12)
        assert np.degrees(np.arccos((np.trace(dR) - 1) / 2)) == pytest.approx(2.0, abs=1e-9)
    est = TrajectoryEval.from_poses([c.pose for c in sc.bundle.cameras], [c.pose for c in sc.gt.cameras])
    assert abs(ate(est) - _umeyama_rmse(noisy, gt_c)) <= 1e-9


def test_synthetic_is_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=9, depth_noise=0.01, pose_noise_deg=1.0))
    b = generate_synthetic(SyntheticSpec(seed=9, depth_noise=0.01, pose_noise_deg=1.0))
    for x, y in zip(a.bundle.images, b.bundle.images):
        assert np.array_equal(x, y)
    for p, q in zip(a.bundle.pairs, b.bundle.pairs):
        assert np.array_equal(p.pts_n, q.pts_n)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(shape="torus").validate()
    with pytest.raises(ValueError):
        SyntheticSpec.from_dict({"views": 3})
