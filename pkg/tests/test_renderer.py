"""Rasterizer correctness: projection oracle, symmetry, occlusion, PPM I/O."""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

import mvshape.geometry as geo
import mvshape.renderer as ren
from mvshape.errors import TruncatedPixelData, UnsupportedMagic, ViewIndexOutOfRange


def quant_diff(a, b):
    return int(np.abs(ren.quantize(a).astype(int) - ren.quantize(b).astype(int)).max())


def unit_shape(kind, seed=1):
    spec = geo.ShapeClassSpec(0, kind, kind, (1.0, 1.0))
    return geo.normalize_mesh(geo.generate_shape(spec, seed))


class TestCamera:
    def test_azimuth_steps(self):
        params = ren.RenderParams(image_size=32, n_views=12)
        assert ren.make_camera(3, params).azimuth == pytest.approx(90.0)

    def test_view_zero_eye_position(self):
        params = ren.RenderParams(image_size=32, n_views=12, elevation=30.0, distance=2.5)
        cam = ren.make_camera(0, params)
        e = math.radians(30.0)
        np.testing.assert_allclose(cam.eye, [0.0, 2.5 * math.sin(e), 2.5 * math.cos(e)], atol=1e-12)

    def test_index_out_of_range(self):
        params = ren.RenderParams(image_size=32, n_views=12)
        with pytest.raises(ViewIndexOutOfRange):
            ren.make_camera(12, params)

    def test_degenerate_camera_rejected(self):
        params = ren.RenderParams(image_size=32, n_views=1, supersample=1)
        cam = ren.make_camera(0, params)
        cam.up = cam.target - cam.eye  # parallel to the view direction
        with pytest.raises(ren.DegenerateCamera):
            ren.render_view(unit_shape("cube"), cam, params)

    def test_invalid_fov_rejected(self):
        with pytest.raises(ren.DegenerateCamera):
            ren.Camera(eye=np.array([0.0, 0.0, 2.0]), target=np.zeros(3),
                       up=np.array([0.0, 1.0, 0.0]), vertical_fov=200.0,
                       azimuth=0.0, elevation=0.0, distance=2.0)


class TestRenderView:
    def test_mesh_behind_camera_gives_background(self):
        v, f = geo._cube()
        mesh = geo.Mesh(v + np.array([0.0, 0.0, 10.0]), f)
        params = ren.RenderParams(image_size=32, n_views=1, elevation=0.0, distance=3.0,
                                  background=0.25, supersample=1)
        img = ren.render_view(mesh, ren.make_camera(0, params), params)
        assert np.all(img.pixels == 0.25)

    def test_projected_area_matches_analytic_estimate(self):
        # right triangle with unit legs in the z=0 plane, camera on +Z at
        # distance 3, fov 45: pixel area = world area * (focal/depth)^2
        size, dist = 1024, 3.0
        mesh = geo.Mesh(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
                        np.array([[0, 1, 2]]))
        params = ren.RenderParams(image_size=size, n_views=1, elevation=0.0,
                                  distance=dist, supersample=1)
        img = ren.render_view(mesh, ren.make_camera(0, params), params)
        focal = (size / 2.0) / math.tan(math.radians(45.0) / 2.0)
        expected = 0.5 * (focal / dist) ** 2
        count = int((img.pixels > 0).sum())
        assert abs(count - expected) / expected < 0.02

    def test_cube_quarter_turn_symmetry(self):
        params = ren.RenderParams(image_size=64, n_views=12, elevation=30.0,
                                  distance=2.5, supersample=1)
        cube = unit_shape("cube")
        views = [ren.render_view(cube, ren.make_camera(i, params), params) for i in range(12)]
        for k in range(9):
            assert quant_diff(views[k], views[k + 3]) <= 1

    def test_sphere_view_invariance(self):
        params = ren.RenderParams(image_size=64, n_views=12, elevation=30.0,
                                  distance=2.5, supersample=1)
        sphere = unit_shape("sphere")
        ref = ren.render_view(sphere, ren.make_camera(0, params), params)
        for i in range(1, 12):
            assert quant_diff(ref, ren.render_view(sphere, ren.make_camera(i, params), params)) <= 1

    def test_occluded_triangle_contributes_nothing(self):
        front = geo.Mesh(np.array([[-0.4, -0.4, 0.2], [0.4, -0.4, 0.2], [0.0, 0.45, 0.2]]),
                         np.array([[0, 1, 2]]))
        both = geo.Mesh(np.vstack([front.vertices,
                                   [[-0.1, -0.1, -0.2], [0.1, -0.1, -0.2], [0.0, 0.12, -0.2]]]),
                        np.array([[0, 1, 2], [3, 4, 5]]))
        params = ren.RenderParams(image_size=64, n_views=1, elevation=0.0,
                                  distance=2.5, supersample=1)
        cam = ren.make_camera(0, params)
        a = ren.render_view(front, cam, params)
        b = ren.render_view(both, cam, params)
        assert np.array_equal(a.pixels, b.pixels)

    def test_determinism_bit_identical(self):
        params = ren.RenderParams(image_size=48, n_views=12, supersample=2)
        torus = unit_shape("torus")
        cam = ren.make_camera(5, params)
        a = ren.render_view(torus, cam, params)
        b = ren.render_view(torus, cam, params)
        assert np.array_equal(a.pixels, b.pixels)

    def test_determinism_under_concurrency(self):
        params = ren.RenderParams(image_size=32, n_views=4, supersample=1)
        mesh = unit_shape("cylinder")
        serial = [ren.render_view(mesh, ren.make_camera(i, params), params).pixels
                  for i in range(4)]
        with ThreadPoolExecutor(max_workers=4) as pool:
            parallel = list(pool.map(
                lambda i: ren.render_view(mesh, ren.make_camera(i, params), params).pixels,
                range(4)))
        for s, p in zip(serial, parallel):
            assert np.array_equal(s, p)

    def test_coverage_monotone_in_distance(self):
        cube = unit_shape("cube")
        counts = []
        for dist in (3.0, 1.5):
            params = ren.RenderParams(image_size=64, n_views=1, elevation=20.0,
                                      distance=dist, supersample=1)
            img = ren.render_view(cube, ren.make_camera(0, params), params)
            counts.append(int((img.pixels > 0).sum()))
        assert counts[1] >= counts[0]

    def test_intensity_bounds(self):
        params = ren.RenderParams(image_size=48, n_views=3, supersample=2)
        for kind in geo.GENERATOR_KINDS:
            mesh = unit_shape(kind)
            img = ren.render_view(mesh, ren.make_camera(1, params), params)
            assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_cube_face_normals_axis_aligned(self):
        normals = ren.face_normals(geo.Mesh(*geo._cube()))
        np.testing.assert_allclose(np.abs(normals).max(axis=1), np.ones(12), atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), np.ones(12), atol=1e-12)


class TestMultiview:
    def test_twelve_views_ordered_by_azimuth(self):
        params = ren.RenderParams(image_size=32, n_views=12, supersample=1)
        vs = ren.render_multiview(unit_shape("cone"), "cone/c0", 3, params)
        assert len(vs.views) == 12 and len(vs.cameras) == 12
        assert [c.azimuth for c in vs.cameras] == [30.0 * i for i in range(12)]
        assert vs.shape_id == "cone/c0" and vs.label == 3

    def test_single_view(self):
        params = ren.RenderParams(image_size=32, n_views=1, supersample=1)
        vs = ren.render_multiview(unit_shape("cube"), "x", 0, params)
        assert len(vs.views) == 1 and vs.cameras[0].azimuth == 0.0


class TestPpm:
    def test_exact_bytes_two_pixels(self, tmp_path):
        img = ren.Image(2, 1, np.array([[0.0, 1.0]]))
        path = tmp_path / "t.ppm"
        ren.write_ppm(img, path)
        assert path.read_bytes() == b"P5\n2 1\n255\n\x00\xff"

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = ren.Image(17, 9, rng.uniform(0, 1, size=(9, 17)))
        path = tmp_path / "r.ppm"
        ren.write_ppm(img, path)
        back = ren.read_ppm(path)
        np.testing.assert_array_equal(ren.quantize(back), ren.quantize(img))
        # a second round trip is the identity
        ren.write_ppm(back, path)
        again = ren.read_ppm(path)
        assert np.array_equal(again.pixels, back.pixels)

    def test_p6_luma_conversion(self, tmp_path):
        path = tmp_path / "c.ppm"
        rgb = bytes([255, 0, 0, 0, 255, 0])  # red and green pixels
        path.write_bytes(b"P6\n2 1\n255\n" + rgb)
        img = ren.read_ppm(path)
        np.testing.assert_allclose(img.pixels[0], [0.299, 0.587], atol=1e-9)

    def test_unsupported_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0")
        with pytest.raises(UnsupportedMagic):
            ren.read_ppm(path)

    def test_truncated_pixels(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P5\n4 4\n255\nab")
        with pytest.raises(TruncatedPixelData):
            ren.read_ppm(path)

    def test_header_comments(self, tmp_path):
        path = tmp_path / "cmt.ppm"
        path.write_bytes(b"P5\n# made by hand\n1 1\n255\n\x80")
        img = ren.read_ppm(path)
        assert img.pixels[0, 0] == pytest.approx(128 / 255)
