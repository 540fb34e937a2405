import numpy as np
import pytest

from splat4d import renderer, splat
from splat4d.geometry import PinholeCamera, SE3Pose, se3_exp, transform_point
from splat4d.splat import Gaussian2D, GaussianMap, logit, normals_from_depth

RNG = np.random.default_rng(23)


def make_cam(w=8, h=8, f=15.0):
    return PinholeCamera(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h, near=0.05, far=50.0)


def map_from(gaussians):
    gmap = GaussianMap()
    gmap.append(
        np.stack([g.mean for g in gaussians]),
        np.stack([g.frame for g in gaussians]),
        np.stack([g.scale_log for g in gaussians]),
        np.stack([g.color_logit for g in gaussians]),
        np.array([g.opacity_logit for g in gaussians]),
        0,
    )
    return gmap


def fronto_splat(z=1.0, scale=0.5, opacity=0.99, color=(0.8, 0.3, 0.1), xy=(0.0, 0.0)):
    # Frame with t_w = (0, 0, -1) facing the camera: t_u = +x, t_v = -y.
    frame = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]).T
    frame = np.stack([np.array([1.0, 0, 0]), np.array([0, -1.0, 0]), np.array([0, 0, -1.0])], axis=1)
    return Gaussian2D(
        mean=np.array([xy[0], xy[1], z]),
        frame=frame,
        scale_log=np.log([scale, scale]),
        color_logit=logit(np.array(color)),
        opacity_logit=float(logit(np.array([opacity]))[0]),
    )


def random_splat(depth_range=(0.8, 3.0), scale_range=(0.05, 0.5)):
    mean = np.concatenate([RNG.normal(size=2) * 0.4, [RNG.uniform(*depth_range)]])
    frame = se3_exp(np.concatenate([np.zeros(3), RNG.normal(size=3)])).rotation
    return Gaussian2D(
        mean=mean,
        frame=frame,
        scale_log=np.log(RNG.uniform(*scale_range, size=2)),
        color_logit=RNG.normal(size=3),
        opacity_logit=float(logit(np.array([RNG.uniform(0.3, 0.95)]))[0]),
    )


class TestEvalGaussian:
    def test_center(self):
        assert renderer.eval_gaussian(0.0, 0.0) == 1.0

    def test_one_sigma(self):
        assert abs(renderer.eval_gaussian(1.0, 0.0) - np.exp(-0.5)) < 1e-15

    def test_three_four(self):
        assert abs(renderer.eval_gaussian(3.0, 4.0) - np.exp(-12.5)) < 1e-18


class TestBinAndSort:
    def test_empty_map(self):
        bins = renderer.bin_and_sort(GaussianMap(), SE3Pose.identity(), make_cam())
        assert bins.entries.size == 0

    def test_behind_camera_excluded(self):
        g = fronto_splat(z=-1.0)
        bins = renderer.bin_and_sort(map_from([g]), SE3Pose.identity(), make_cam())
        assert bins.entries.size == 0

    def test_depth_order_within_tile(self):
        near = fronto_splat(z=1.0)
        far = fronto_splat(z=2.0)
        gmap = map_from([far, near])  # insertion order reversed on purpose
        cam = make_cam()
        bins = renderer.bin_and_sort(gmap, SE3Pose.identity(), cam)
        idx, keys = bins.tile_entries(0, 0)
        assert list(idx) == [1, 0]
        assert list(keys) == [1.0, 2.0]
        assert (np.diff(keys) >= 0).all()

    def test_out_of_far_excluded(self):
        g = fronto_splat(z=100.0)
        bins = renderer.bin_and_sort(map_from([g]), SE3Pose.identity(), make_cam())
        assert bins.entries.size == 0


def invertible_h(g: Gaussian2D) -> np.ndarray:
    """H with the dead column replaced by t_w, so (W H)^-1 exists."""
    H = splat.build_transform(g)
    H[:3, 2] = g.frame[:, 2]
    return H


class TestRaySplatIntersect:
    def test_center_ray(self):
        cam = make_cam()
        g = fronto_splat(z=1.0, scale=0.3)
        pixel = cam.project(g.mean)
        uv = renderer.ray_splat_intersect(g, SE3Pose.identity(), cam, pixel)
        assert uv is not None
        np.testing.assert_allclose(uv, (0.0, 0.0), atol=1e-9)

    def test_one_scale_unit_offset(self):
        cam = make_cam()
        s = 0.3
        g = fronto_splat(z=1.0, scale=s)
        pixel = cam.project(g.mean) + np.array([cam.fx * s, 0.0])
        uv = renderer.ray_splat_intersect(g, SE3Pose.identity(), cam, pixel)
        assert abs(uv[0] - 1.0) < 1e-6 and abs(uv[1]) < 1e-6

    def test_edge_on_misses(self):
        cam = make_cam()
        g = fronto_splat(z=1.0)
        # Rotate the splat plane to contain the view direction.
        Rx = se3_exp(np.array([0, 0, 0, np.pi / 2, 0, 0])).rotation
        g.frame = Rx @ g.frame
        pixel = cam.project(g.mean)
        assert renderer.ray_splat_intersect(g, SE3Pose.identity(), cam, pixel) is None

    def test_matches_explicit_inverse_oracle(self):
        cam = make_cam(64, 64, f=80.0)
        checked = 0
        for _ in range(1000):
            g = random_splat()
            pose = se3_exp(RNG.normal(size=6) * 0.1)
            W = cam.intrinsic4() @ pose.as_matrix()
            WH = W @ invertible_h(g)
            if np.linalg.cond(WH) >= 1e6:
                continue
            Minv = np.linalg.inv(WH)
            pixel = cam.project(transform_point(pose, g.mean)) + RNG.normal(size=2) * 3.0
            uv = renderer.ray_splat_intersect(g, pose, cam, pixel)
            if uv is None:
                continue
            # Pixel ray in screen space: (x z, y z, z, 1); pull back through
            # the inverse and solve for z where the t_w coordinate vanishes.
            ray_dir = Minv @ np.array([pixel[0], pixel[1], 1.0, 0.0])
            ray_org = Minv @ np.array([0.0, 0.0, 0.0, 1.0])
            if abs(ray_dir[2]) < 1e-12:
                continue
            z_star = -ray_org[2] / ray_dir[2]
            q = ray_org + z_star * ray_dir
            np.testing.assert_allclose(uv, q[:2], atol=1e-6)
            checked += 1
        assert checked > 500


class TestRender:
    def test_empty_map_is_background(self):
        cam = make_cam()
        buf = renderer.render(GaussianMap(), SE3Pose.identity(), cam)
        assert np.array_equal(buf.color, np.zeros((8, 8, 3)))
        assert np.array_equal(buf.alpha, np.zeros((8, 8)))
        assert not buf.normal_valid.any()

    def test_single_opaque_splat(self):
        cam = PinholeCamera(fx=15, fy=15, cx=4.5, cy=4.5, width=8, height=8, near=0.05, far=50)
        g = fronto_splat(z=1.2, scale=2.0, opacity=0.9999, color=(0.7, 0.2, 0.5))
        buf = renderer.render(map_from([g]), SE3Pose.identity(), cam)
        y, x = 4, 4  # pixel center (4.5, 4.5) is the projected mean
        np.testing.assert_allclose(buf.color[y, x], [0.7, 0.2, 0.5], atol=1e-3)
        assert abs(buf.depth[y, x] - 1.2) < 1e-3
        np.testing.assert_allclose(buf.normal[y, x], [0, 0, -1], atol=1e-3)
        assert abs(buf.alpha[y, x] - 1.0) < 1e-3

    def test_two_splat_blend_matches_closed_form(self):
        cam = PinholeCamera(fx=15, fy=15, cx=4.5, cy=4.5, width=8, height=8, near=0.05, far=50)
        a, b = 0.6, 0.4
        c1, c2 = np.array([0.9, 0.1, 0.2]), np.array([0.2, 0.8, 0.5])
        front = fronto_splat(z=1.0, scale=3.0, opacity=a, color=c1)
        back = fronto_splat(z=2.0, scale=6.0, opacity=b, color=c2)
        buf = renderer.render(map_from([front, back]), SE3Pose.identity(), cam)
        # At the shared projected center both responses are exactly 1.
        expected = a * c1 + b * (1 - a) * c2
        np.testing.assert_allclose(buf.color[4, 4], expected, atol=1e-6)
        assert abs(buf.alpha[4, 4] - (a + b * (1 - a))) < 1e-6

    def test_weight_sums_bounded_by_one(self):
        cam = make_cam()
        gmap = map_from([random_splat() for _ in range(40)])
        buf = renderer.render(gmap, SE3Pose.identity(), cam)
        assert (buf.alpha <= 1.0 + 1e-12).all()

    def test_insertion_order_invariance(self):
        cam = make_cam()
        gaussians = [random_splat() for _ in range(25)]
        perm = RNG.permutation(25)
        buf_a = renderer.render(map_from(gaussians), SE3Pose.identity(), cam)
        buf_b = renderer.render(map_from([gaussians[i] for i in perm]), SE3Pose.identity(), cam)
        np.testing.assert_allclose(buf_a.color, buf_b.color, atol=1e-12)
        np.testing.assert_allclose(buf_a.depth, buf_b.depth, atol=1e-12)

    def test_world_camera_consistency(self):
        cam = make_cam()
        gaussians = [random_splat() for _ in range(15)]
        pose = se3_exp(RNG.normal(size=6) * 0.2)
        buf_posed = renderer.render(map_from(gaussians), pose, cam)
        moved = []
        for g in gaussians:
            moved.append(
                Gaussian2D(
                    mean=transform_point(pose, g.mean),
                    frame=pose.rotation @ g.frame,
                    scale_log=g.scale_log.copy(),
                    color_logit=g.color_logit.copy(),
                    opacity_logit=g.opacity_logit,
                )
            )
        buf_identity = renderer.render(map_from(moved), SE3Pose.identity(), cam)
        np.testing.assert_allclose(buf_posed.color, buf_identity.color, atol=1e-5)

    def test_tile_size_independence(self):
        cam = make_cam(32, 32, f=40.0)
        gmap = map_from([random_splat() for _ in range(30)])
        buf16 = renderer.render(gmap, SE3Pose.identity(), cam, tile=16)
        buf32 = renderer.render(gmap, SE3Pose.identity(), cam, tile=32)
        buf8 = renderer.render(gmap, SE3Pose.identity(), cam, tile=8)
        np.testing.assert_array_equal(buf16.color, buf32.color)
        np.testing.assert_array_equal(buf16.color, buf8.color)
        np.testing.assert_array_equal(buf16.depth, buf32.depth)
        np.testing.assert_array_equal(buf16.alpha, buf8.alpha)

    def test_kernel_agrees_with_scalar_intersect(self):
        cam = make_cam()
        gmap = map_from([random_splat() for _ in range(10)])
        pose = se3_exp(RNG.normal(size=6) * 0.1)
        buf = renderer.render(gmap, pose, cam, record=True)
        rec = buf.record
        checked = 0
        for lin in range(cam.height * cam.width):
            y, x = divmod(lin, cam.width)
            for r in range(rec.offsets[lin], rec.offsets[lin + 1]):
                k = rec.prim[r]
                orig = rec.scene.prim_orig[k]
                uv = renderer.ray_splat_intersect(
                    gmap.primitive(int(orig)), pose, cam, (x + 0.5, y + 0.5)
                )
                np.testing.assert_allclose(uv, (rec.u[r], rec.v[r]), atol=1e-9)
                checked += 1
        assert checked > 20

    def test_uncovered_pixels_have_zero_depth_invalid_normal(self):
        cam = make_cam(16, 16, f=30.0)
        g = fronto_splat(z=1.0, scale=0.02, opacity=0.9)
        buf = renderer.render(map_from([g]), SE3Pose.identity(), cam)
        empty = buf.alpha == 0
        assert empty.any()
        assert (buf.depth[empty] == 0).all()
        assert not buf.normal_valid[empty].any()


class TestInsertThenRender:
    def test_depth_reproduction_on_plane(self):
        cam = make_cam(64, 64, f=80.0)
        gx, gy = np.meshgrid(np.arange(64) + 0.5, np.arange(64) + 0.5)
        xn = (gx - cam.cx) / cam.fx
        yn = (gy - cam.cy) / cam.fy
        depth = 1.5 / (1.0 - 0.15 * xn - 0.1 * yn)
        nm = normals_from_depth(depth, cam)
        gmap = GaussianMap()
        splat.insert_from_rgbd(
            gmap, cam, np.full((64, 64, 3), 0.5), depth, nm, SE3Pose.identity(),
            np.ones((64, 64), dtype=bool), stride=4,
        )
        buf = renderer.render(gmap, SE3Pose.identity(), cam)
        covered = buf.alpha > 0.5
        assert covered.mean() > 0.8
        err = np.abs(buf.depth - depth)[covered]
        dy, dx = np.gradient(depth)
        local_grad = np.hypot(dx, dy)[covered]
        assert np.median(err) < 2.0 * np.median(local_grad) + 1e-6


class TestImageIO(object):
    def test_pfm_round_trip(self, tmp_path):
        img = RNG.normal(size=(9, 7)).astype(np.float32).astype(np.float64)
        p = tmp_path / "x.pfm"
        from splat4d import imgio

        imgio.write_pfm(p, img)
        np.testing.assert_array_equal(imgio.read_pfm(p), img)
        rgb = RNG.random(size=(5, 6, 3)).astype(np.float32).astype(np.float64)
        imgio.write_pfm(p, rgb)
        np.testing.assert_array_equal(imgio.read_pfm(p), rgb)

    def test_png_color_quantized_round_trip(self, tmp_path):
        from splat4d import imgio

        img = RNG.random(size=(8, 8, 3))
        p = tmp_path / "c.png"
        imgio.write_png_color(p, img)
        back = imgio.read_png_color(p)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_png_depth16_round_trip(self, tmp_path):
        from splat4d import imgio

        depth = RNG.uniform(0, 5, size=(8, 8))
        p = tmp_path / "d.png"
        imgio.write_png_depth16(p, depth)
        back = imgio.read_png_depth16(p)
        assert np.abs(back - depth).max() <= 0.5 / 5000 + 1e-12
