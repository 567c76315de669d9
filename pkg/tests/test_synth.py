"""Scene synthesis: closed-form ray oracles, pose kinematics, dataset format."""

import json

import numpy as np
import pytest

from drivegeo.geometry import pose_inverse, project, transform_points, quat_to_matrix
from drivegeo.serialization import FormatError
from drivegeo.synth import (
    BoxSpec,
    GeometrySpec,
    SceneSpec,
    TrajectorySpec,
    random_scene_spec,
    read_dataset,
    synthesize,
    write_dataset,
)


def ground_only_spec(**kw) -> SceneSpec:
    defaults = dict(
        seed=0,
        frames=1,
        views=1,
        height=32,
        width=48,
        trajectory=TrajectorySpec(speed=0.0),
        geometry=GeometrySpec(far_wall=False),
    )
    defaults.update(kw)
    return SceneSpec(**defaults)


def test_horizon_split():
    s = synthesize(ground_only_spec())
    v = s.valid[0, 0]
    assert not v[: v.shape[0] // 2].any()  # above the horizon: sky
    assert v[v.shape[0] // 2 :].all()  # below: ground hits


def test_stationary_trajectory_identity_poses():
    s = synthesize(ground_only_spec(frames=3))
    assert all(p.is_identity(tol=0.0) for p in s.poses)


def test_straight_kinematics():
    spec = ground_only_spec(frames=4, trajectory=TrajectorySpec(kind="straight", speed=10.0))
    s = synthesize(spec)
    # 2 Hz frames: 0.5 s spacing, 5 m per frame index
    for t, p in enumerate(s.poses):
        assert abs(np.linalg.norm(p.t) - 5.0 * t) < 1e-12


def test_ray_depth_matches_ground_plane_oracle():
    s = synthesize(ground_only_spec())
    cam = s.rig[0]
    c2w = s.camera_pose(0, 0)
    rot = quat_to_matrix(c2w.q)
    H, W = s.valid[0, 0].shape
    for v, u in [(H - 1, 0), (H - 1, W - 1), (H // 2 + 2, W // 2)]:
        if not s.valid[0, 0, v, u]:
            continue
        d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
        d_world = rot @ d_cam
        t_hit = -c2w.t[2] / d_world[2]  # independent ray-plane closed form
        point = c2w.t + t_hit * d_world
        np.testing.assert_allclose(s.pointmaps[0, 0, v, u], point, atol=1e-9)


def test_ray_depth_matches_box_oracle():
    box = BoxSpec(center=(10.0, 0.0, 1.0), size=(2.0, 4.0, 2.0), albedo=(0.5, 0.2, 0.2))
    spec = ground_only_spec(geometry=GeometrySpec(far_wall=False, boxes=(box,)))
    s = synthesize(spec)
    cam = s.rig[0]
    c2w = s.camera_pose(0, 0)
    rot = quat_to_matrix(c2w.q)
    # the front face of the box sits at x = 9; cast the central pixel
    v, u = int(cam.cy), int(cam.cx)
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    d_world = rot @ d_cam
    t_face = (9.0 - c2w.t[0]) / d_world[0]
    hit = c2w.t + t_face * d_world
    assert abs(hit[1]) < 2.0 and 0.0 < hit[2] < 2.0  # lands on the face
    np.testing.assert_allclose(s.pointmaps[0, 0, v, u], hit, atol=1e-9)


def test_reprojection_half_pixel():
    spec = random_scene_spec(11, frames=2, views=2, height=24, width=32)
    s = synthesize(spec)
    for t in range(2):
        for n in range(2):
            mask = s.valid[t, n]
            ys, xs = np.nonzero(mask)
            cam = s.rig[n]
            w2c = pose_inverse(s.camera_pose(t, n))
            pts_cam = transform_points(w2c, s.pointmaps[t, n][mask])
            uv = project(cam, pts_cam)
            err = np.abs(uv - np.stack([xs, ys], axis=1)).max()
            assert err < 0.5


def test_internal_consistency_invariant():
    from drivegeo.geometry import unproject

    spec = random_scene_spec(12, frames=3, views=2, height=24, width=32)
    s = synthesize(spec)
    for t in range(3):
        for n in range(2):
            mask = s.valid[t, n]
            cam = s.rig[n]
            c2w = s.camera_pose(t, n)
            pts_cam = transform_points(pose_inverse(c2w), s.pointmaps[t, n][mask])
            uv = project(cam, pts_cam)
            back = transform_points(c2w, unproject(cam, uv, pts_cam[:, 2]))
            assert np.abs(back - s.pointmaps[t, n][mask]).max() < 1e-6


def test_dynamic_box_shifts_by_velocity():
    # stationary ego, box face perpendicular to x moving at +2 m/s
    box = BoxSpec(center=(20.0, 0.0, 1.0), size=(2.0, 6.0, 2.0), velocity=(2.0, 0.0, 0.0))
    spec = ground_only_spec(frames=3, geometry=GeometrySpec(far_wall=False, boxes=(box,)))
    s = synthesize(spec)
    cam = s.rig[0]
    v, u = int(cam.cy), int(cam.cx)
    xs = [s.pointmaps[t, 0, v, u, 0] for t in range(3)]
    assert s.valid[:, 0, v, u].all()
    # 2 Hz: the face advances exactly 1 m per frame
    np.testing.assert_allclose(np.diff(xs), [1.0, 1.0], atol=1e-9)


def test_sparse_points_lie_on_valid_surface():
    spec = random_scene_spec(13, frames=2, views=2, height=24, width=32, sparse_rate=0.05)
    s = synthesize(spec)
    for t in range(2):
        for n in range(2):
            pts = s.sparse[t][n]
            assert len(pts) >= 2
            pm = s.pointmaps[t, n][s.valid[t, n]]
            # every return is one of the valid pixel points
            d = np.abs(pts[:, None, :] - pm[None, :, :]).sum(axis=2).min(axis=1)
            assert d.max() == 0.0


def test_synthesize_deterministic():
    spec = random_scene_spec(14, frames=2, views=2, height=16, width=24)
    a, b = synthesize(spec), synthesize(spec)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.pointmaps, b.pointmaps)
    for pa, pb in zip(a.sparse, b.sparse):
        for xa, xb in zip(pa, pb):
            np.testing.assert_array_equal(xa, xb)


def test_pixel_budget_enforced():
    with pytest.raises(ValueError):
        synthesize(ground_only_spec(), pixel_budget=100)


def test_dataset_roundtrip(tmp_path):
    samples = [synthesize(random_scene_spec(s, frames=2, views=2, height=16, width=24)) for s in (0, 1)]
    write_dataset(tmp_path / "ds", samples)
    back = read_dataset(tmp_path / "ds")
    assert len(back) == 2
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.pointmaps, b.pointmaps)
        np.testing.assert_array_equal(a.valid, b.valid)
        for t in range(a.frames):
            for n in range(a.views):
                np.testing.assert_array_equal(a.sparse[t][n], b.sparse[t][n])
            np.testing.assert_allclose(a.poses[t].vec7(), b.poses[t].vec7(), atol=0)
        assert a.spec == b.spec


def test_dataset_errors(tmp_path):
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "missing")
    ds = tmp_path / "ds"
    write_dataset(ds, [synthesize(random_scene_spec(0, frames=1, views=1, height=16, width=24))])
    # corrupt magic of one payload
    victim = next(ds.glob("scene0000_images.dvt"))
    raw = bytearray(victim.read_bytes())
    raw[0] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_dataset(ds)  # checksum failure
    with pytest.raises(FormatError):
        read_dataset(ds, verify_checksums=False)  # bad magic
    # version mismatch
    manifest = json.loads((ds / "manifest.json").read_text())
    manifest["format_version"] = "dvgt-ds-0"
    (ds / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        read_dataset(ds)


def test_spec_json_roundtrip():
    spec = random_scene_spec(15, frames=3, views=2)
    assert SceneSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec
