import numpy as np
import pytest

from splat4d import evaluation as ev
from splat4d.errors import (DegenerateConfiguration, DimensionMismatch, EmptyMask,
                            EmptyTrajectory, NoMatches)
from splat4d.geometry import SE3Pose, se3_exp

RNG = np.random.default_rng(61)


def random_trajectory(n, seed=0, start=0.0):
    rng = np.random.default_rng(seed)
    ts = start + np.arange(n, dtype=float)
    poses = [se3_exp(rng.normal(size=6) * 0.3) for _ in range(n)]
    return ev.Trajectory(ts, poses)


def transformed(traj, S):
    return ev.Trajectory(traj.timestamps.copy(), [S.compose(p) for p in traj.poses])


class TestTrajectory:
    def test_strictly_increasing_enforced(self):
        with pytest.raises(ValueError):
            ev.Trajectory(np.array([0.0, 0.0]), [SE3Pose.identity(), SE3Pose.identity()])

    def test_save_load_round_trip(self, tmp_path):
        traj = random_trajectory(7, seed=2)
        p = tmp_path / "traj.txt"
        traj.save(p)
        back = ev.Trajectory.load(p)
        np.testing.assert_allclose(back.timestamps, traj.timestamps, atol=1e-6)
        for a, b in zip(back.poses, traj.poses):
            np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-8)
            np.testing.assert_allclose(a.translation, b.translation, atol=1e-8)


class TestAlignFirstFrame:
    def test_identical_is_fixed_point(self):
        gt = random_trajectory(5, seed=3)
        aligned = ev.align_first_frame(gt, gt)
        for a, b in zip(aligned.poses, gt.poses):
            np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-12)

    def test_constant_offset_cancels(self):
        gt = random_trajectory(6, seed=4)
        S = se3_exp(np.array([0.4, -0.2, 0.7, 0.3, -0.1, 0.2]))
        est = transformed(gt, S)
        aligned = ev.align_first_frame(est, gt)
        for a, b in zip(aligned.poses, gt.poses):
            np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-12)

    def test_first_pose_matches_exactly(self):
        est = random_trajectory(4, seed=5)
        gt = random_trajectory(4, seed=6)
        aligned = ev.align_first_frame(est, gt)
        np.testing.assert_allclose(aligned.poses[0].as_matrix(), gt.poses[0].as_matrix(),
                                   atol=1e-12)

    def test_empty_raises(self):
        t = ev.Trajectory(np.zeros(0), [])
        with pytest.raises(EmptyTrajectory):
            ev.align_first_frame(t, t)


class TestAteRmse:
    def test_identical_zero(self):
        gt = random_trajectory(5, seed=7)
        assert ev.ate_rmse(gt, gt) == 0.0

    def test_constant_error_closed_form(self):
        gt = random_trajectory(10, seed=8)
        est_poses = [p.copy() for p in gt.poses]
        for p in est_poses[1:]:
            p.translation = p.translation + np.array([0.01, 0.0, 0.0])
        est = ev.Trajectory(gt.timestamps.copy(), est_poses)
        expected = np.sqrt(9 * 0.01**2 / 10)  # first frame error-free
        assert abs(ev.ate_rmse(est, gt) - expected) < 1e-12

    def test_no_matches_raises(self):
        a = random_trajectory(3, seed=9, start=0.0)
        b = random_trajectory(3, seed=10, start=100.0)
        with pytest.raises(NoMatches):
            ev.ate_rmse(a, b)

    def test_invariant_under_common_rigid_transform(self):
        est = random_trajectory(8, seed=11)
        gt = random_trajectory(8, seed=12)
        S = se3_exp(RNG.normal(size=6))
        a0 = ev.ate_rmse(est, gt)
        a1 = ev.ate_rmse(transformed(est, S), transformed(gt, S))
        assert abs(a0 - a1) < 1e-9


class TestUmeyama:
    def test_rigid_transform_recovered(self):
        gt = random_trajectory(10, seed=13)
        S = se3_exp(np.array([0.5, -0.3, 0.2, 0.2, 0.4, -0.1]))
        est = transformed(gt, S)
        aligned = ev.umeyama_align(est, gt)
        assert ev.ate_rmse(aligned, gt) < 1e-10

    def test_two_poses_degenerate(self):
        gt = random_trajectory(2, seed=14)
        with pytest.raises(DegenerateConfiguration):
            ev.umeyama_align(gt, gt)

    def test_collinear_degenerate(self):
        ts = np.arange(5, dtype=float)
        poses = [SE3Pose(np.eye(3), np.array([float(i), 0.0, 0.0])) for i in range(5)]
        t = ev.Trajectory(ts, poses)
        with pytest.raises(DegenerateConfiguration):
            ev.umeyama_align(t, t)

    def test_noisy_copy_ate_matches_noise_level(self):
        rng = np.random.default_rng(15)
        n = 400
        ts = np.arange(n, dtype=float)
        gt_poses = [
            SE3Pose(se3_exp(rng.normal(size=6)).rotation, rng.normal(size=3)) for _ in range(n)
        ]
        gt = ev.Trajectory(ts, gt_poses)
        sigma = 1e-3
        est_poses = [SE3Pose(p.rotation.copy(), p.translation + rng.normal(size=3) * sigma)
                     for p in gt_poses]
        est = ev.Trajectory(ts.copy(), est_poses)
        aligned = ev.umeyama_align(est, gt)
        expected_rms = sigma * np.sqrt(3)
        assert abs(ev.ate_rmse(aligned, gt) - expected_rms) / expected_rms < 0.2


class TestDepthL1:
    def test_identical(self):
        d = RNG.random((8, 8))
        assert ev.depth_l1(d, d, np.ones((8, 8), bool)) == 0.0

    def test_constant_offset(self):
        d = RNG.random((8, 8))
        assert abs(ev.depth_l1(d + 0.02, d, np.ones((8, 8), bool)) - 0.02) < 1e-12

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            ev.depth_l1(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))


class TestPsnr:
    def test_identical_capped(self):
        img = RNG.random((8, 8, 3))
        assert ev.psnr(img, img) == 100.0

    def test_constant_offset_closed_form(self):
        img = RNG.random((8, 8, 3)) * 0.5
        assert abs(ev.psnr(img, img + 0.1) - 20.0) < 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            ev.psnr(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_monotone_in_noise(self):
        img = RNG.random((32, 32, 3)) * 0.6 + 0.2
        vals = []
        for sigma in [0.01, 0.02, 0.04, 0.08, 0.16]:
            noisy = img + RNG.normal(0, sigma, img.shape)
            vals.append(ev.psnr(img, noisy))
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestSsim:
    def test_self_score_exactly_one(self):
        img = RNG.random((16, 16, 3))
        assert ev.ssim(img, img) == 1.0

    def test_symmetry(self):
        a = RNG.random((16, 16))
        b = RNG.random((16, 16))
        assert abs(ev.ssim(a, b) - ev.ssim(b, a)) < 1e-12

    def test_checkerboard_vs_inverse_near_minus_one_interior(self):
        gx, gy = np.meshgrid(np.arange(32), np.arange(32))
        board = ((gx + gy) % 2).astype(float)
        smap = ev.ssim(board, 1.0 - board, return_map=True)
        interior = smap[8:-8, 8:-8]
        assert interior.mean() < -0.9

    def test_less_than_one_for_different_images(self):
        a = RNG.random((16, 16))
        b = RNG.random((16, 16))
        assert ev.ssim(a, b) < 1.0


class TestReports:
    def test_csv_and_table(self, tmp_path):
        metrics = {"ate_rmse_m": 0.001234, "psnr_db": 31.5, "frames": 30}
        p = tmp_path / "report.csv"
        ev.write_report_csv(metrics, p)
        header, row = open(p).read().strip().split("\n")
        assert header == "ate_rmse_m,psnr_db,frames"
        assert row.split(",")[2] == "30"
        table = ev.format_report(metrics)
        assert "ate_rmse_m" in table and "31.5" in table
