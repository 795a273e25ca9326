import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lumikit.geometry import (
    Camera, ImageBuffer, Rng, camera_rays, frame_to_quat, pixel_ray, positional_encode,
    quat_from_axis_angle, quat_normalize, quat_to_frame, quat_to_rotmat,
)

floats = st.floats(-5, 5, allow_nan=False)
quat_st = st.tuples(floats, floats, floats, floats).filter(lambda q: np.linalg.norm(q) > 1e-3)


def test_encode_zero_input():
    enc = positional_encode(0.0, 4)
    assert enc.shape == (8,)
    np.testing.assert_array_equal(enc[:4], 0.0)
    np.testing.assert_array_equal(enc[4:], 1.0)


def test_encode_half():
    np.testing.assert_allclose(positional_encode(0.5, 1), [1.0, 0.0], atol=1e-15)


def test_encode_matches_scalar_loop():
    x = (0.3, -0.2, 0.7)
    enc = positional_encode(np.array(x), 10)
    assert enc.shape == (60,)
    ref = []
    for xi in x:
        ref += [math.sin(2 ** k * math.pi * xi) for k in range(10)]
        ref += [math.cos(2 ** k * math.pi * xi) for k in range(10)]
    np.testing.assert_allclose(enc, ref, atol=1e-12)
    enc_t = positional_encode(torch.tensor(x, dtype=torch.float64), 10)
    np.testing.assert_allclose(enc_t.numpy(), ref, atol=1e-12)


def test_encode_rejects_zero_freqs():
    with pytest.raises(ValueError):
        positional_encode(0.1, 0)


@given(st.lists(floats, min_size=1, max_size=3), st.integers(1, 8))
def test_encode_bounded_deterministic(x, L):
    a = positional_encode(np.array(x), L)
    b = positional_encode(np.array(x), L)
    assert a.shape == (len(x) * 2 * L,)
    assert np.all(np.abs(a) <= 1.0)
    np.testing.assert_array_equal(a, b)


def test_identity_frame():
    tu, tv, n = quat_to_frame(np.array([1.0, 0, 0, 0]))
    np.testing.assert_array_equal(tu, [1, 0, 0])
    np.testing.assert_array_equal(tv, [0, 1, 0])
    np.testing.assert_array_equal(n, [0, 0, 1])


def test_rot_z_90():
    q = quat_from_axis_angle([0, 0, 1], math.pi / 2)
    tu, _, _ = quat_to_frame(q)
    np.testing.assert_allclose(tu, [0, 1, 0], atol=1e-12)


def test_random_frames_orthonormal(rng):
    q = quat_normalize(rng.normal(size=(1000, 4)))
    tu, tv, n = quat_to_frame(q)
    assert np.abs((tu * tv).sum(-1)).max() < 1e-6
    assert np.abs(n - np.cross(tu, tv)).max() < 1e-6
    m = quat_to_rotmat(q)
    eye = np.einsum("nij,nik->njk", m, m)
    assert np.abs(eye - np.eye(3)).max() < 1e-6


@given(quat_st)
def test_normalize_unit(q):
    assert abs(np.linalg.norm(quat_normalize(q)) - 1) < 1e-6
    qt = quat_normalize(torch.tensor(q, dtype=torch.float64))
    assert abs(float(qt.norm()) - 1) < 1e-6


@given(quat_st)
def test_frame_quat_round_trip(q):
    q = quat_normalize(np.array(q))
    back = frame_to_quat(*quat_to_frame(q))
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-6


def test_torch_numpy_rotmat_agree(rng):
    q = quat_normalize(rng.normal(size=(50, 4)))
    np.testing.assert_allclose(quat_to_rotmat(torch.tensor(q)).numpy(), quat_to_rotmat(q), atol=1e-12)


def _cam4():
    # identity pose, 4x4 image, principal point on a pixel centre
    return Camera(np.eye(4), fx=2.0, fy=4.0, cx=1.5, cy=1.5, width=4, height=4)


def test_principal_ray_is_forward():
    o, d = pixel_ray(_cam4(), (1, 1))
    np.testing.assert_allclose(o, 0)
    np.testing.assert_allclose(d, [0, 0, 1])


def test_corner_ray_hand_value():
    # pixel (0, 0): centre (0.5, 0.5) -> ((0.5-1.5)/2, (0.5-1.5)/4, 1)
    _, d = pixel_ray(_cam4(), (0, 0))
    v = np.array([-0.5, -0.25, 1.0])
    np.testing.assert_allclose(d, v / np.linalg.norm(v), atol=1e-12)


def test_pixel_ray_out_of_bounds():
    with pytest.raises(ValueError):
        pixel_ray(_cam4(), (4, 0))
    with pytest.raises(ValueError):
        pixel_ray(_cam4(), (0, -1))


@given(st.integers(0, 63), st.integers(0, 47))
def test_pixel_ray_unit(col, row):
    cam = Camera.look_at([3, 1, 2], [0, 0, 0], width=64, height=48)
    _, d = pixel_ray(cam, (col, row))
    assert abs(np.linalg.norm(d) - 1) < 1e-9


def test_camera_rays_match_pixel_ray():
    cam = Camera.look_at([3, 1, 2], [0, 0, 0], width=5, height=3)
    o, d = camera_rays(cam)
    for row in range(3):
        for col in range(5):
            np.testing.assert_allclose(d[row * 5 + col], pixel_ray(cam, (col, row))[1], atol=1e-12)


def test_look_at_points_at_target():
    cam = Camera.look_at([4, 0, 3], [0, 0, 0])
    np.testing.assert_allclose(cam.forward, -np.array([4, 0, 3]) / 5, atol=1e-12)
    np.testing.assert_allclose(cam.world_to_camera([[0, 0, 0]])[0], [0, 0, 5], atol=1e-12)


def test_camera_invariants():
    with pytest.raises(ValueError):
        Camera(np.eye(4), 0.0, 1.0, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        Camera(np.eye(4), 1.0, 1.0, 0, 0, 4, 4, time=1.5)


def test_camera_json_round_trip():
    cam = Camera.look_at([3, 1, 2], [0, 0, 0], time=0.25)
    back = Camera.from_json(cam.to_json())
    np.testing.assert_array_equal(back.transform, cam.transform)
    assert back.time == 0.25 and back.fx == cam.fx


def test_image_buffer_sample_count():
    ImageBuffer(3, 2, 3, np.zeros(18))
    with pytest.raises(ValueError):
        ImageBuffer(3, 2, 3, np.zeros(17))
    with pytest.raises(ValueError):
        ImageBuffer(3, 2, 2, np.zeros(12))


def test_rng_reproducible_million():
    a = Rng(42).uniform(10 ** 6)
    b = Rng(42).uniform(10 ** 6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a[:100], Rng(43).uniform(100))


def test_rng_streams_independent_of_call_order():
    r = Rng(7)
    first = r.spawn(3).normal(5)
    r.spawn(1).normal(100)
    np.testing.assert_array_equal(first, r.spawn(3).normal(5))
    u = Rng(0).open_uniform(10 ** 5)
    assert u.min() > 0 and u.max() < 1
