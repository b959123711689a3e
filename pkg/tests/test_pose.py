import math

import numpy as np
import pytest

from objmap.geometry import CameraModel, Pose, geodesic_deg, quat_from_axis_angle, quat_from_yaw
from objmap.models import chair_model, table_model
from objmap.pose_est import (
    KeypointSet2D,
    PoseConfig,
    Skeleton3D,
    TooFewKeypoints,
    DegenerateSegment,
    assoc_distance,
    build_observation,
    greedy_associate,
    ground_project,
    icp_refine,
    pnp_ransac,
    skeleton_from_pose,
)
from objmap.segmentation import PointCloudSegment


@pytest.fixture
def cam():
    return CameraModel(fx=450, fy=450, cx=320, cy=240, width=640, height=480)


def _project_keypoints(model, pose_cam, cam, valid=None):
    pts = pose_cam.apply(model.keypoints_obj)
    uv = np.stack([cam.fx * pts[:, 0] / pts[:, 2] + cam.cx,
                   cam.fy * pts[:, 1] / pts[:, 2] + cam.cy], axis=1)
    L = len(uv)
    if valid is None:
        valid = np.ones(L, bool)
    return KeypointSet2D(model.class_id, uv, np.ones(L), valid)


def _random_cam_pose(rng):
    axis = rng.normal(size=3)
    q = quat_from_axis_angle(axis, rng.uniform(-0.6, 0.6))
    t = [rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(2.0, 4.0)]
    return Pose(t, q)


def test_pnp_recovers_exact_pose(cam):
    rng = np.random.default_rng(0)
    cfg = PoseConfig()
    for model in (chair_model(), table_model()):
        for _ in range(20):
            gt = _random_cam_pose(rng)
            res = pnp_ransac(_project_keypoints(model, gt, cam), model, cam, cfg)
            assert np.linalg.norm(res.pose.t - gt.t) < 1e-4
            assert geodesic_deg(res.pose.q, gt.q) < 0.01
            assert res.reproj_rmse < 1e-3
            assert len(res.inliers) == model.num_keypoints


def test_pnp_rejects_gross_outlier(cam):
    rng = np.random.default_rng(1)
    model = table_model()
    cfg = PoseConfig()
    for _ in range(20):
        gt = _random_cam_pose(rng)
        kps = _project_keypoints(model, gt, cam)
        pts = kps.points.copy()
        bad = rng.integers(0, len(pts))
        pts[bad] += 60.0
        kps = KeypointSet2D(kps.class_id, pts, kps.confidences, kps.valid)
        res = pnp_ransac(kps, model, cam, cfg)
        assert bad not in res.inliers
        assert np.linalg.norm(res.pose.t - gt.t) < 1e-3


def test_pnp_respects_valid_mask(cam):
    model = table_model()
    gt = Pose([0, 0, 3], quat_from_yaw(0.4))
    valid = np.array([True, True, True, True, False, False, False, False])
    kps = _project_keypoints(model, gt, cam, valid)
    # corrupt the invalid entries: they must not influence the solution
    pts = kps.points.copy()
    pts[~valid] = 1e6
    res = pnp_ransac(KeypointSet2D(kps.class_id, pts, kps.confidences, valid), model, cam,
                     PoseConfig())
    assert np.linalg.norm(res.pose.t - gt.t) < 1e-3


def test_pnp_too_few_keypoints(cam):
    model = chair_model()
    kps = KeypointSet2D(model.class_id, np.zeros((6, 2)), np.zeros(6),
                        [True, True, True, False, False, False])
    with pytest.raises(TooFewKeypoints):
        pnp_ransac(kps, model, cam, PoseConfig())


def test_pnp_exhaustive_enumeration_is_deterministic(cam):
    model = table_model()  # C(8, 4) = 70 <= 100 iterations: no sampling
    gt = Pose([0.2, -0.1, 3.0], quat_from_yaw(1.1))
    kps = _project_keypoints(model, gt, cam)
    a = pnp_ransac(kps, model, cam, PoseConfig(), np.random.default_rng(1))
    b = pnp_ransac(kps, model, cam, PoseConfig(), np.random.default_rng(99))
    assert a.pose.is_close(b.pose, 0.0, 0.0) or a.pose.is_close(b.pose)


def test_ground_project_examples():
    model = chair_model()
    tilted = Pose([1, 2, 0.3], quat_from_axis_angle([1, 0, 0], 0.4))
    flat = ground_project(tilted, model)
    assert flat.t[2] == model.ground_offset
    np.testing.assert_allclose(flat.t[:2], [1, 2])
    # roll removed, no yaw was present
    assert geodesic_deg(flat.q, [1, 0, 0, 0]) < 1e-9
    # idempotent
    assert ground_project(flat, model).is_close(flat)


def test_ground_project_preserves_yaw():
    model = chair_model()
    for yaw in np.linspace(-3, 3, 7):
        from objmap.geometry import quat_mul

        q = quat_mul(quat_from_yaw(yaw), quat_from_axis_angle([1, 0, 0], 0.2))
        out = ground_project(Pose([0, 0, 0.1], q), model)
        assert geodesic_deg(out.q, quat_from_yaw(yaw)) < 1e-9


def test_ground_project_without_snap_keeps_z():
    model = chair_model()
    out = ground_project(Pose([0, 0, 0.3]), model, snap_z=False)
    assert out.t[2] == 0.3


def test_assoc_distance_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        kps = rng.normal(size=(6, 3))
        pts = rng.normal(size=(rng.integers(1, 200), 3))
        sk = Skeleton3D(1, kps, Pose.identity())
        seg = PointCloudSegment(pts, class_id=1)
        ref = np.mean([min(np.linalg.norm(k - p) for p in pts) for k in kps])
        assert abs(assoc_distance(sk, seg) - ref) < 1e-9


def test_assoc_distance_zero_when_keypoints_in_segment():
    kps = np.random.default_rng(3).normal(size=(6, 3))
    sk = Skeleton3D(1, kps, Pose.identity())
    seg = PointCloudSegment(np.concatenate([kps, kps + 5]), class_id=1)
    assert assoc_distance(sk, seg) == 0.0


def test_assoc_distance_empty_segment():
    sk = Skeleton3D(1, np.zeros((6, 3)), Pose.identity())
    with pytest.raises(ValueError):
        assoc_distance(sk, PointCloudSegment(np.zeros((0, 3)), class_id=1))


def _greedy_oracle(skeletons, segments, tau):
    """Reference assignment computed from the full distance matrix."""
    order = sorted(range(len(segments)), key=lambda j: (-len(segments[j]), j))
    taken, pairs = set(), []
    for j in order:
        best_i, best_d = -1, math.inf
        for i, sk in enumerate(skeletons):
            if i in taken or sk.class_id != segments[j].class_id:
                continue
            d = assoc_distance(sk, segments[j])
            if d < best_d:
                best_i, best_d = i, d
        if best_i >= 0 and best_d <= tau:
            taken.add(best_i)
            pairs.append((j, best_i))
    return pairs


def test_greedy_associate_simple_scene():
    model = chair_model()
    poses = [Pose([0, 0, 0]), Pose([3, 0, 0]), Pose([0, 3, 0])]
    skeletons = [skeleton_from_pose(model, p) for p in poses]
    segments = [
        PointCloudSegment(p.apply(model.model_cloud), class_id=model.class_id) for p in poses
    ]
    pairs = greedy_associate(skeletons, segments, tau_dist=0.3)
    assert sorted(pairs) == [(0, 0), (1, 1), (2, 2)]


def test_greedy_associate_class_gate_and_threshold():
    chair, table = chair_model(), table_model()
    sk = [skeleton_from_pose(chair, Pose([0, 0, 0]))]
    seg_table = PointCloudSegment(table.model_cloud, class_id=table.class_id)
    assert greedy_associate(sk, [seg_table], 10.0) == []
    seg_far = PointCloudSegment(chair.model_cloud + [2, 0, 0], class_id=chair.class_id)
    assert greedy_associate(sk, [seg_far], 0.3) == []
    assert greedy_associate(sk, [seg_far], 5.0) == [(0, 0)]


def test_greedy_associate_matches_oracle_random():
    rng = np.random.default_rng(4)
    for _ in range(30):
        n_sk, n_seg = rng.integers(0, 5), rng.integers(0, 5)
        skeletons = [
            Skeleton3D(int(rng.integers(1, 3)), rng.normal(scale=2, size=(4, 3)), Pose.identity())
            for _ in range(n_sk)
        ]
        segments = [
            PointCloudSegment(
                rng.normal(scale=2, size=(int(rng.integers(5, 40)), 3)),
                class_id=int(rng.integers(1, 3)),
            )
            for _ in range(n_seg)
        ]
        tau = rng.uniform(0.5, 4.0)
        assert greedy_associate(skeletons, segments, tau) == _greedy_oracle(
            skeletons, segments, tau
        )


def test_icp_identity_is_fixed_point():
    model = chair_model()
    gt = Pose([0.5, -0.2, 0.0], quat_from_yaw(0.8))
    seg = PointCloudSegment(gt.apply(model.model_cloud[::3]), class_id=model.class_id)
    res = icp_refine(model, seg, gt, PoseConfig())
    assert np.linalg.norm(res.pose.t - gt.t) < 1e-9
    assert geodesic_deg(res.pose.q, gt.q) < 1e-7
    assert res.rmse < 1e-9


def test_icp_recovers_from_perturbed_init():
    model = table_model()
    gt = Pose([0.3, 0.4, 0.0], quat_from_yaw(-0.5))
    seg = PointCloudSegment(gt.apply(model.model_cloud[::2]), class_id=model.class_id)
    # perturbation below half the cloud sampling pitch: inside the basin
    init = Pose(gt.t + [0.015, -0.01, 0.005],
                np.asarray(gt.q) + [0, 0, 0, 0.008])
    res = icp_refine(model, seg, init, PoseConfig())
    assert np.linalg.norm(res.pose.t - gt.t) < 1e-3
    assert geodesic_deg(res.pose.q, gt.q) < 0.1
    assert res.rmse < 1e-3


def test_icp_partial_view_no_drift():
    # only the points facing one side are observed; the exact pose must
    # still be a fixed point (reverse correspondences)
    model = chair_model()
    gt = Pose([0, 0, 0], quat_from_yaw(0.3))
    visible = model.model_cloud[model.model_cloud[:, 1] > 0]
    seg = PointCloudSegment(gt.apply(visible), class_id=model.class_id)
    res = icp_refine(model, seg, gt, PoseConfig())
    assert np.linalg.norm(res.pose.t - gt.t) < 1e-9
    assert geodesic_deg(res.pose.q, gt.q) < 1e-7


def test_icp_never_increases_rmse_vs_init():
    model = chair_model()
    rng = np.random.default_rng(5)
    gt = Pose([0.1, 0.2, 0.0], quat_from_yaw(1.2))
    pts = gt.apply(model.model_cloud[::4]) + rng.normal(scale=0.005, size=(len(model.model_cloud[::4]), 3))
    seg = PointCloudSegment(pts, class_id=model.class_id)
    init = Pose(gt.t + [0.05, 0.0, 0.0], gt.q)
    local = init.inverse().apply(seg.xyz)
    d0, _ = model.kdtree().query(local)
    init_rmse = float(np.sqrt(np.mean(d0[d0 <= 0.25] ** 2)))
    res = icp_refine(model, seg, init, PoseConfig())
    assert res.rmse <= init_rmse + 1e-12


def test_icp_degenerate_segment():
    with pytest.raises(DegenerateSegment):
        icp_refine(chair_model(), PointCloudSegment(np.zeros((5, 3)), class_id=62),
                   Pose.identity(), PoseConfig())


def test_build_observation_ellipsoid_oracle():
    # points uniform along a segment of length 2: sqrt of variance 1/3 on
    # the long axis, zero on the others
    n = 10001
    xyz = np.stack([np.linspace(-1, 1, n), np.zeros(n), np.zeros(n)], axis=1)
    seg = PointCloudSegment(xyz, class_id=1)
    obs = build_observation(Pose.identity(), seg, 0.1, sensor_id=2, timestamp_us=5)
    assert abs(obs.ellipsoid[0] - math.sqrt(1.0 / 3.0)) < 1e-3
    assert obs.ellipsoid[1] < 1e-6 and obs.ellipsoid[2] < 1e-6
    assert obs.ellipsoid[0] >= obs.ellipsoid[1] >= obs.ellipsoid[2]
    assert obs.sensor_id == 2 and obs.timestamp_us == 5 and obs.segment is None


def test_build_observation_can_attach_segment():
    seg = PointCloudSegment(np.random.default_rng(6).normal(size=(20, 3)), class_id=1)
    obs = build_observation(Pose.identity(), seg, 0.0, 0, 0, include_segment=True)
    assert obs.segment is seg
