import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lumikit.geometry import Camera, camera_rays, quat_normalize, quat_to_frame
from lumikit.splat import (
    EXACT_SETTINGS, Gaussian2D, GaussianCloud, composite_pixel, cull_and_sort, rasterize,
    ray_splat_intersect,
)

D = torch.float64


def front_cam(w=16, h=16, dist=4.0):
    return Camera.look_at([0, 0, dist], [0, 0, 0], up=(0, 1, 0), fov_deg=40, width=w, height=h)


def test_center_hit():
    g = Gaussian2D(mean=(0, 0, 0), scale_u=0.3, scale_v=0.2)
    u, v, t, w = ray_splat_intersect([0, 0, 5], [0, 0, -1], g)
    assert (u, v, w) == (0.0, 0.0, 1.0) and t == 5.0


def test_offset_one_sigma():
    g = Gaussian2D(mean=(1, 2, 0), scale_u=0.3, scale_v=0.2)
    u, v, _, w = ray_splat_intersect([1.3, 2, 5], [0, 0, -1], g)
    assert abs(u - 1) < 1e-12 and abs(v) < 1e-12
    assert abs(w - math.exp(-0.5)) < 1e-12


def test_parallel_and_behind():
    g = Gaussian2D(mean=(0, 0, 0))
    assert ray_splat_intersect([0, 0, 1], [1, 0, 0], g) is None
    assert ray_splat_intersect([0, 0, 1], [0, 0, 1], g) is None


def test_intersection_matches_ray_march(rng):
    """Independent oracle: march along the ray until the signed plane distance
    changes sign, then compare hit points."""
    worst = 0.0
    for _ in range(1000):
        q = quat_normalize(rng.normal(size=4))
        mu = rng.uniform(-1, 1, 3)
        o = rng.uniform(-1, 1, 3) + np.array([0, 0, 3])
        d = mu + rng.normal(scale=0.3, size=3) - o
        d /= np.linalg.norm(d)
        g = Gaussian2D(mean=mu, quat=q, scale_u=0.2, scale_v=0.1)
        res = ray_splat_intersect(o, d, g)
        n = quat_to_frame(q)[2]
        ts = np.arange(0, 8, 1e-4)
        sd = (o + ts[:, None] * d - mu) @ n
        cross = np.nonzero(np.sign(sd[1:]) != np.sign(sd[:-1]))[0]
        if res is None or res[2] > ts[-1]:
            assert cross.size == 0
            continue
        t_march = ts[cross[0]]
        worst = max(worst, np.linalg.norm((o + res[2] * d) - (o + t_march * d)))
    assert worst < 1e-3


def test_cull_and_sort_order_and_culling():
    cam = Camera(np.eye(4), 10, 10, 8, 8, 16, 16)
    means = torch.tensor([[0, 0, 2.0], [0, 0, 1.0], [0, 0, -1.0]])
    scales = torch.full((3, 2), 0.1)
    assert cull_and_sort(means, scales, cam).tolist() == [1, 0]


@given(st.integers(0, 10_000))
def test_cull_and_sort_sorted_permutation(seed):
    r = np.random.default_rng(seed)
    cam = front_cam()
    means = torch.tensor(r.uniform(-2, 2, (30, 3)))
    scales = torch.tensor(r.uniform(0.01, 0.3, (30, 2)))
    idx = cull_and_sort(means, scales, cam)
    assert len(set(idx.tolist())) == len(idx)
    z = torch.as_tensor(cam.world_to_camera(means.numpy()))[:, 2][idx]
    assert torch.all(z[1:] >= z[:-1])


def _cloud(splats):
    return GaussianCloud.from_splats(splats, dtype=D)


def test_single_opaque_splat():
    cl = _cloud([Gaussian2D(mean=(0, 0, 0), opacity=0.999, scale_u=1, scale_v=1)])
    out, op, depth = composite_pixel([0, 0, 3], [0, 0, -1], cl, [0], {"color": cl.color})
    assert abs(op - 0.999) < 1e-12
    np.testing.assert_allclose(out["color"].numpy(), 0.999 * 0.5, atol=1e-12)
    assert abs(depth - 0.999 * 3) < 1e-12


def test_zero_hits():
    cl = _cloud([Gaussian2D(mean=(10, 0, 0))])
    out, op, depth = composite_pixel([0, 0, 3], [0, 0, -1], cl, [0], {"color": cl.color})
    assert op == 0 and depth == 0
    np.testing.assert_array_equal(out["color"].numpy(), 0)


def test_two_splat_closed_form():
    a1, a2 = 0.6, 0.3
    cl = _cloud([Gaussian2D(mean=(0, 0, 0), opacity=a1), Gaussian2D(mean=(0, 0, -1), opacity=a2)])
    _, op, _ = composite_pixel([0, 0, 3], [0, 0, -1], cl, [0, 1], {"color": cl.color})
    assert abs(op - (a1 + (1 - a1) * a2)) < 1e-12


def test_normal_faces_ray():
    cl = _cloud([Gaussian2D(mean=(0, 0, 0), quat=(0, 1, 0, 0), opacity=0.9)])  # n = -z
    out, _, _ = composite_pixel([0, 0, -3], [0, 0, 1], cl, [0], {})
    assert out["normal"][2] < 0
    out, _, _ = composite_pixel([0, 0, 3], [0, 0, -1], cl, [0], {})
    assert out["normal"][2] > 0


def test_empty_scene_black():
    gb = rasterize(GaussianCloud.empty(D), front_cam(), "all")
    assert float(gb.color.abs().max()) == 0 and float(gb.opacity.max()) == 0


def test_flat_coverage():
    g = Gaussian2D(mean=(0, 0, 0), opacity=0.999, color=(1, 0, 0), scale_u=100, scale_v=100)
    gb = rasterize(_cloud([g]), front_cam(), "color")
    np.testing.assert_allclose(gb.color.numpy().reshape(-1, 3), np.tile([0.999, 0, 0], (256, 1)), atol=1e-3)


def reference_raster(cl, cam):
    """Straight-line per-pixel reference: sort by centre depth, loop over all
    splats, no early exit, no thresholds besides the alpha clamp."""
    o, d = camera_rays(cam)
    z = cam.world_to_camera(cl.means.numpy())[:, 2]
    order = [i for i in np.argsort(z, kind="stable") if z[i] > 0.01]
    img = np.zeros((o.shape[0], 3))
    for p in range(o.shape[0]):
        trans = 1.0
        for i in order:
            res = ray_splat_intersect(o[p], d[p], cl[i])
            if res is None:
                continue
            a = min(float(cl.opacity[i]) * res[3], 0.999)
            img[p] += trans * a * cl.color[i].numpy()
            trans *= 1 - a
    return img.reshape(cam.height, cam.width, 3)


def three_splats():
    return _cloud([
        Gaussian2D(mean=(0, 0, 0), quat=quat_normalize([1, 0.2, 0.1, 0]), scale_u=0.6, scale_v=0.3,
                   opacity=0.8, color=(1, 0.2, 0.1)),
        Gaussian2D(mean=(0.3, 0.2, 0.5), quat=quat_normalize([1, -0.3, 0.2, 0.4]), scale_u=0.4,
                   scale_v=0.5, opacity=0.6, color=(0.1, 0.9, 0.3)),
        Gaussian2D(mean=(-0.4, -0.1, -0.6), scale_u=0.9, scale_v=0.7, opacity=0.95, color=(0.2, 0.3, 1)),
    ])


def test_matches_reference_rasterizer():
    cl, cam = three_splats(), front_cam()
    gb = rasterize(cl, cam, "color", settings=EXACT_SETTINGS)
    np.testing.assert_allclose(gb.color.numpy(), reference_raster(cl, cam), atol=1e-10)


def test_input_order_invariance():
    cl, cam = three_splats(), front_cam()
    perm = torch.tensor([2, 0, 1])
    a = rasterize(cl, cam, "all")
    b = rasterize(cl.subset(perm), cam, "all")
    torch.testing.assert_close(a.color, b.color, rtol=0, atol=1e-12)
    torch.testing.assert_close(a.opacity, b.opacity, rtol=0, atol=1e-12)


def test_alpha_conservation_and_normals():
    cl, cam = three_splats(), front_cam()
    gb = rasterize(cl, cam, "gbuffer", settings=EXACT_SETTINGS)
    h = gb.hits
    np.testing.assert_allclose((gb.opacity.reshape(-1) + h.final_trans).numpy(), 1.0, atol=1e-5)
    nrm = gb.normal.reshape(-1, 3).norm(dim=-1)
    cov = gb.opacity.reshape(-1) > 0.5
    assert cov.any()
    assert float((nrm[cov] - 1).abs().max()) < 1e-3
    assert float(gb.opacity.max()) <= 1 and float(gb.opacity.min()) >= 0


@given(st.integers(0, 10_000))
def test_adding_splat_never_reduces_opacity(seed):
    r = np.random.default_rng(seed)
    cam = front_cam(8, 8)

    def rand():
        return Gaussian2D(mean=r.uniform(-1, 1, 3), quat=quat_normalize(r.normal(size=4)),
                          scale_u=r.uniform(0.1, 0.8), scale_v=r.uniform(0.1, 0.8), opacity=r.uniform(0.1, 1))
    base = [rand() for _ in range(4)]
    a = rasterize(_cloud(base), cam, "color", settings=EXACT_SETTINGS).opacity
    b = rasterize(_cloud(base + [rand()]), cam, "color", settings=EXACT_SETTINGS).opacity
    assert torch.all(b >= a - 1e-12)


def test_gbuffer_attributes_blended():
    g = Gaussian2D(mean=(0, 0, 0), opacity=0.999, albedo=(0.2, 0.4, 0.6), roughness=0.3,
                   scale_u=100, scale_v=100)
    gb = rasterize(_cloud([g]), front_cam(4, 4), "gbuffer")
    # scale 100 leaves the Gaussian weight within 1e-4 of one over the image
    np.testing.assert_allclose(gb.albedo.numpy().reshape(-1, 3), np.tile([0.1998, 0.3996, 0.5994], (16, 1)),
                               atol=1e-3)
    np.testing.assert_allclose(gb.roughness.numpy().reshape(-1), 0.999 * 0.3, atol=1e-3)
    np.testing.assert_allclose(gb.normal.numpy().reshape(-1, 3), np.tile([0, 0, 1.0], (16, 1)), atol=1e-9)
    np.testing.assert_allclose((gb.depth / gb.opacity).numpy().reshape(-1), gb.extra["z_hit"].numpy(), atol=1e-9)
    np.testing.assert_allclose(gb.extra["z_hit"].numpy(), 4.0, atol=1e-12)


def test_bad_mode():
    with pytest.raises(ValueError):
        rasterize(three_splats(), front_cam(), "nope")
