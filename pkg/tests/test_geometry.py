import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from affnet.errors import ContractError, DegenerateLandmarksError, GeometryError
from affnet.geometry import (BoundingBox, Calibration, DeviceScreen, Landmarks, angular_error_deg,
                             boxes_from_landmarks, camera_cm_to_pixels, crop_resize_normalize, hflip,
                             normalize_rects, pixels_to_camera_cm, point_to_direction, random_shift)

# one eye at (100,200)-(140,200); the other mirrored so both boxes are 68 wide
LM = Landmarks(left_eye_outer=(100, 200), left_eye_inner=(140, 200), right_eye_inner=(100, 200),
               right_eye_outer=(140, 200), mouth_left=(100, 260), mouth_right=(140, 260))
PHONE = DeviceScreen(6.0, 10.0, 600, 1000, (3.0, 0.0))

coords = st.floats(-500, 500, allow_nan=False)


def random_landmarks(draw_floats):
    pts = np.asarray(draw_floats, dtype=float).reshape(6, 2)
    pts[1, 0] = pts[0, 0] + 20 + abs(pts[1, 0]) % 50
    pts[3, 0] = pts[2, 0] + 20 + abs(pts[3, 0]) % 50
    return Landmarks(*[tuple(p) for p in pts])


class TestBoxes:
    def test_eye_box(self):
        _, left, _ = boxes_from_landmarks(LM)
        assert left.as_list() == pytest.approx([86, 166, 154, 234], abs=1e-12)
        assert left.width == pytest.approx(68)

    def test_face_box(self):
        face, _, _ = boxes_from_landmarks(LM)
        assert face.center == pytest.approx((120, 230))
        assert face.width == pytest.approx(68 / 0.3)
        assert face.as_list() == pytest.approx([120 - 34 / 0.3, 230 - 34 / 0.3, 120 + 34 / 0.3, 230 + 34 / 0.3])
        assert face.x1 == pytest.approx(6.6667, abs=1e-4) and face.y2 == pytest.approx(343.3333, abs=1e-4)

    def test_face_uses_mean_eye_size(self):
        lm = Landmarks((0, 0), (40, 0), (100, 0), (120, 0), (0, 50), (120, 50))
        face, left, right = boxes_from_landmarks(lm)
        assert face.width == pytest.approx((68 + 34) / 2 / 0.3)

    def test_degenerate(self):
        lm = Landmarks((100, 200), (100, 210), (150, 200), (190, 200), (100, 260), (140, 260))
        with pytest.raises(DegenerateLandmarksError):
            boxes_from_landmarks(lm)

    def test_box_invariant(self):
        with pytest.raises(GeometryError):
            BoundingBox(5, 0, 5, 1)

    @given(st.lists(coords, min_size=12, max_size=12), coords, coords)
    def test_translation_equivariant(self, pts, tx, ty):
        lm = random_landmarks(pts)
        for a, b in zip(boxes_from_landmarks(lm), boxes_from_landmarks(lm.translated(tx, ty))):
            np.testing.assert_allclose(b.as_list(), a.translated(tx, ty).as_list(), atol=1e-9)

    @given(st.lists(coords, min_size=12, max_size=12), st.floats(0.1, 10))
    def test_scale_equivariant(self, pts, s):
        lm = random_landmarks(pts)
        for a, b in zip(boxes_from_landmarks(lm), boxes_from_landmarks(lm.scaled(s))):
            np.testing.assert_allclose(b.as_list(), np.array(a.as_list()) * s, rtol=1e-9, atol=1e-9)


class TestFlipAndRects:
    def test_involution(self, rng):
        img = rng.uniform(size=(3, 5, 7))
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_pixel_moves(self):
        img = np.zeros((3, 4, 6))
        img[:, 2, 0] = 1
        assert np.all(hflip(img)[:, 2, 5] == 1)

    def test_symmetric_unchanged(self, rng):
        half = rng.uniform(size=(3, 4, 3))
        img = np.concatenate([half, half[..., ::-1]], axis=-1)
        np.testing.assert_array_equal(hflip(img), img)

    def test_full_frame(self):
        full = BoundingBox(0, 0, 640, 480)
        np.testing.assert_array_equal(normalize_rects(full, full, full, 640, 480), [0, 0, 1, 1] * 3)

    def test_example_box(self):
        b = BoundingBox(86, 166, 154, 234)
        r = normalize_rects(b, b, b, 640, 480)
        assert r.shape == (12,)
        np.testing.assert_allclose(r[:4], [0.134375, 166 / 480, 0.240625, 0.4875], rtol=1e-15)

    def test_mirror(self, rng):
        boxes = [BoundingBox(x, y, x + w, y + w) for x, y, w in rng.uniform(10, 200, size=(3, 3))]
        mirrored = [BoundingBox(640 - b.x2, b.y1, 640 - b.x1, b.y2) for b in boxes]
        r = normalize_rects(*boxes, 640, 480).reshape(3, 4)
        m = normalize_rects(*mirrored, 640, 480).reshape(3, 4)
        np.testing.assert_allclose(m[:, [0, 2]], 1 - r[:, [2, 0]], atol=1e-15)
        np.testing.assert_array_equal(m[:, [1, 3]], r[:, [1, 3]])

    def test_bad_frame(self):
        b = BoundingBox(0, 0, 1, 1)
        with pytest.raises(ContractError):
            normalize_rects(b, b, b, 0, 10)


class TestShift:
    def boxes(self):
        return (BoundingBox(100, 100, 300, 300), BoundingBox(120, 120, 170, 170), BoundingBox(230, 120, 280, 170))

    def test_deterministic(self):
        a = random_shift(self.boxes(), np.random.default_rng(5), 640, 480)
        b = random_shift(self.boxes(), np.random.default_rng(5), 640, 480)
        assert a == b

    def test_distribution_and_bounds(self):
        rng = np.random.default_rng(0)
        base = self.boxes()
        seen = set()
        for _ in range(10_000):
            moved = random_shift(base, rng, 640, 480)
            for b0, b in zip(base, moved):
                dx, dy = b.x1 - b0.x1, b.y1 - b0.y1
                assert -30 <= dx <= 30 and -30 <= dy <= 30 and dx == int(dx)
                assert b.x1 >= 0 and b.y1 >= 0 and b.x2 <= 640 and b.y2 <= 480
                seen.add(dx)
        assert seen == set(range(-30, 31))

    def test_clamped_at_edge(self):
        edge = (BoundingBox(0, 0, 50, 50),) * 3
        for seed in range(50):
            for b in random_shift(edge, np.random.default_rng(seed), 60, 60):
                assert 0 <= b.x1 and b.x2 <= 60 and 0 <= b.y1 and b.y2 <= 60


class TestCrop:
    def test_constant_frame(self):
        frame = np.full((40, 50, 3), 200, dtype=np.uint8)
        out = crop_resize_normalize(frame, BoundingBox(5, 5, 35, 25), (7, 9))
        assert out.shape == (3, 7, 9)
        np.testing.assert_allclose(out, 200 / 255, rtol=1e-15)

    def test_identity(self, rng):
        frame = rng.integers(0, 256, size=(30, 40, 3), dtype=np.uint8)
        out = crop_resize_normalize(frame, BoundingBox(3, 4, 19, 16), (12, 16))
        assert np.max(np.abs(out - frame[4:16, 3:19].transpose(2, 0, 1) / 255.0)) == 0

    def checker(self):
        frame = np.zeros((2, 2, 3), dtype=np.uint8)
        frame[0, 1] = frame[1, 0] = 255
        return frame

    def test_checkerboard_3x3_midpoints(self):
        out = crop_resize_normalize(self.checker(), BoundingBox(0, 0, 2, 2), (3, 3))[0]
        np.testing.assert_allclose(out, [[0, 0.5, 1], [0.5, 0.5, 0.5], [1, 0.5, 0]], atol=1e-15)

    def test_checkerboard_4x4(self):
        out = crop_resize_normalize(self.checker(), BoundingBox(0, 0, 2, 2), (4, 4))[0]
        assert [out[0, 0], out[0, 3], out[3, 0], out[3, 3]] == [0, 1, 1, 0]
        # corner-aligned: samples at thirds of the pixel span
        np.testing.assert_allclose(out[1:3, 1:3], [[4 / 9, 5 / 9], [5 / 9, 4 / 9]], atol=1e-15)
        assert out[1:3, 1:3].mean() == pytest.approx(0.5)

    def test_out_of_frame_zero(self):
        frame = np.full((10, 10, 3), 255, dtype=np.uint8)
        out = crop_resize_normalize(frame, BoundingBox(-10, 0, 10, 10), (10, 20))
        assert np.all(out[:, :, :9] == 0) and np.all(out[:, :, 10:] == 1)

    def test_fully_outside(self):
        with pytest.raises(GeometryError):
            crop_resize_normalize(np.zeros((10, 10, 3), np.uint8), BoundingBox(20, 20, 30, 30), (4, 4))

    def test_range(self, rng):
        frame = rng.integers(0, 256, size=(60, 80, 3), dtype=np.uint8)
        out = crop_resize_normalize(frame, BoundingBox(-5.5, 3.2, 70.1, 66.6), (33, 21))
        assert out.min() >= 0 and out.max() <= 1


class TestUnits:
    def test_camera_point(self):
        assert pixels_to_camera_cm((300, 0), PHONE) == (0.0, 0.0)

    def test_example(self):
        assert pixels_to_camera_cm((300, 500), PHONE) == pytest.approx((0.0, 5.0), abs=1e-15)

    @given(st.floats(-100, 1100), st.floats(-100, 1100))
    def test_round_trip(self, x, y):
        back = camera_cm_to_pixels(pixels_to_camera_cm((x, y), PHONE), PHONE)
        assert abs(back[0] - x) < 1e-9 and abs(back[1] - y) < 1e-9

    def test_bad_device(self):
        with pytest.raises(ContractError):
            DeviceScreen(0, 1, 1, 1, (0, 0))


class TestDirections:
    def test_straight_ahead(self):
        d = point_to_direction((0, 0), Calibration.identity(), (0, 0, -60))
        np.testing.assert_allclose(d, [0, 0, 1], atol=1e-15)

    @given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-20, 20), st.floats(-20, 20), st.floats(-90, -5))
    def test_unit_norm(self, x, y, ox, oy, oz):
        assert abs(np.linalg.norm(point_to_direction((x, y), Calibration.identity(), (ox, oy, oz))) - 1) < 1e-12

    def test_rotated_calibration(self):
        c, s = math.cos(0.3), math.sin(0.3)
        calib = Calibration(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]), np.array([1.0, 2.0, 0.0]))
        d = point_to_direction((2, 0), calib, (0, 0, -10))
        target = np.array([2 * c + 1, 2 * s + 2, 10.0])
        np.testing.assert_allclose(d, target / np.linalg.norm(target), atol=1e-15)

    def test_scale_invariance(self):
        # origin and calibration shift both scaled: direction unchanged
        a = point_to_direction((3, 4), Calibration.identity(), (0, 0, -10))
        b = point_to_direction((6, 8), Calibration.identity(), (0, 0, -20))
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_zero_length(self):
        with pytest.raises(GeometryError):
            point_to_direction((1, 2), Calibration.identity(), (1, 2, 0))

    def test_non_orthonormal(self):
        with pytest.raises(ContractError):
            Calibration(np.diag([1.0, 2.0, 1.0]), np.zeros(3))

    def test_angles(self):
        z = np.array([0.0, 0.0, 1.0])
        assert angular_error_deg(z, z) == 0
        assert angular_error_deg(z, [1.0, 0, 0]) == pytest.approx(90)
        assert angular_error_deg(z, np.array([0, 1, 1]) / math.sqrt(2)) == pytest.approx(45, abs=1e-12)

    def test_45_degree_gaze(self):
        calib, origin = Calibration.identity(), (0, 0, -60)
        err = angular_error_deg(point_to_direction((0, 60), calib, origin), point_to_direction((0, 0), calib, origin))
        assert err == pytest.approx(45, abs=1e-12)

    def test_non_unit(self):
        with pytest.raises(ContractError):
            angular_error_deg([0, 0, 2.0], [0, 0, 1.0])

    @given(st.integers(0, 2**31))
    def test_symmetry_and_triangle(self, seed):
        v = np.random.default_rng(seed).standard_normal((3, 3))
        a, b, c = (x / np.linalg.norm(x) for x in v)
        assert angular_error_deg(a, b) == angular_error_deg(b, a)
        assert angular_error_deg(a, c) <= angular_error_deg(a, b) + angular_error_deg(b, c) + 1e-9
        assert 0 <= angular_error_deg(a, b) <= 180
