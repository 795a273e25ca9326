import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lumikit.losses import (
    SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW, Stage1Weights, Stage2Weights, env_lower_penalty,
    loss_delta_reg, loss_depth_distortion, loss_l1, loss_opacity_mask, loss_reconstruction,
    loss_separation, ndc_depth, normal_consistency, ssim, ssim_map, total_stage1, total_stage2,
)

D = torch.float64


def ssim_loop(a, b):
    """Per-pixel SSIM by explicit window sums (zero padding outside)."""
    h, w, c = a.shape
    r = SSIM_WINDOW // 2
    x = np.arange(SSIM_WINDOW) - r
    g = np.exp(-x * x / (2 * SSIM_SIGMA ** 2))
    g /= g.sum()
    win = np.outer(g, g)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    out = np.zeros((h, w, c))
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                m1 = m2 = e11 = e22 = e12 = 0.0
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < h and 0 <= jj < w:
                            wt = win[di + r, dj + r]
                            p, q = a[ii, jj, ch], b[ii, jj, ch]
                            m1 += wt * p
                            m2 += wt * q
                            e11 += wt * p * p
                            e22 += wt * q * q
                            e12 += wt * p * q
                s11, s22, s12 = e11 - m1 * m1, e22 - m2 * m2, e12 - m1 * m2
                out[i, j, ch] = ((2 * m1 * m2 + c1) * (2 * s12 + c2)) / ((m1 ** 2 + m2 ** 2 + c1) * (s11 + s22 + c2))
    return out


def test_ssim_matches_loop(rng):
    a = rng.uniform(size=(9, 7, 2))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ours = ssim_map(torch.tensor(a), torch.tensor(b)).numpy()
    np.testing.assert_allclose(ours, ssim_loop(a, b), rtol=1e-10, atol=1e-12)


def test_ssim_identical_is_one(rng):
    a = torch.tensor(rng.uniform(size=(12, 12, 3)))
    assert abs(ssim(a, a).item() - 1.0) < 1e-12


def test_reconstruction_trivial():
    a = torch.full((8, 8, 3), 0.3, dtype=D)
    assert loss_reconstruction(a, a).item() == pytest.approx(0.0, abs=1e-12)
    # constant offset: L1 part is exact
    b = a + 0.1
    l1 = loss_l1(a, b).item()
    assert l1 == pytest.approx(0.1)
    with pytest.raises(ValueError):
        loss_l1(a, b[:4])


def test_distortion_two_hits():
    # w = (0.5, 0.5), z = (1, 2): sum_ij w_i w_j |z_i - z_j| = 2 * 0.25 * 1
    ray = torch.tensor([0, 0])
    z = torch.tensor([1.0, 2.0], dtype=D)
    w = torch.tensor([0.5, 0.5], dtype=D)
    assert loss_depth_distortion(ray, z, w, 1).item() == pytest.approx(0.5, abs=1e-15)


def test_distortion_single_hit_is_zero():
    assert loss_depth_distortion(torch.tensor([0]), torch.tensor([3.0], dtype=D),
                                 torch.tensor([0.9], dtype=D), 1).item() == 0.0


@given(st.integers(1, 6), st.integers(0, 40), st.integers(0, 10 ** 6))
def test_distortion_matches_pairwise(num_rays, k, seed):
    g = np.random.default_rng(seed)
    ray = np.sort(g.integers(0, num_rays, size=k))
    z = g.uniform(0, 1, size=k)
    w = g.uniform(0, 1, size=k)
    ref = 0.0
    for r in range(num_rays):
        s = ray == r
        ref += np.sum(w[s][:, None] * w[s][None] * np.abs(z[s][:, None] - z[s][None]))
    ref /= num_rays
    shuffled = g.permutation(k)
    ours = loss_depth_distortion(torch.tensor(ray[shuffled]), torch.tensor(z[shuffled]),
                                 torch.tensor(w[shuffled]), num_rays).item()
    assert ours == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_ndc_depth_monotone():
    z = torch.tensor([0.01, 0.5, 1.0, 10.0, 100.0], dtype=D)
    d = ndc_depth(z)
    assert d[0].item() == pytest.approx(0.0, abs=1e-15)
    assert d[-1].item() == pytest.approx(1.0)
    assert torch.all(d[1:] > d[:-1])


def test_opacity_bce():
    o = torch.tensor([0.9, 0.2], dtype=D)
    m = torch.tensor([1.0, 0.0], dtype=D)
    expected = -(math.log(0.9) + math.log(0.8)) / 2
    assert loss_opacity_mask(o, m).item() == pytest.approx(expected, rel=1e-12)
    # clamped at the ends, finite
    assert math.isfinite(loss_opacity_mask(torch.tensor([0.0, 1.0], dtype=D), torch.tensor([1.0, 0.0], dtype=D)).item())


def test_separation_is_mean_abs():
    p = torch.tensor([0.5, -1.5, 0.0, 2.0], dtype=D)
    assert loss_separation(p).item() == pytest.approx(1.0)
    assert loss_separation(torch.zeros(0, dtype=D)).item() == 0.0


def test_delta_reg():
    dc = torch.tensor([[0.1, 0.2, 0.2], [0.0, 0.0, 0.0]], dtype=D)
    dmu = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], dtype=D)
    lc, lm = loss_delta_reg(dc, dmu)
    assert lc.item() == pytest.approx(0.09 / 2)
    assert lm.item() == pytest.approx(5.0 / 2)


def test_normal_consistency_aligned_is_zero():
    op = torch.ones(4, 4, 1, dtype=D)
    n = torch.zeros(4, 4, 3, dtype=D)
    n[..., 2] = 1
    valid = torch.ones(4, 4, dtype=torch.bool)
    assert normal_consistency(op, n, n, valid).item() == pytest.approx(0.0, abs=1e-15)
    tilted = torch.zeros_like(n)
    tilted[..., 0] = 1
    assert normal_consistency(op, n, tilted, valid).item() == pytest.approx(1.0)


def _terms(seed=0):
    g = np.random.default_rng(seed)
    return {k: torch.tensor(g.uniform(0.1, 1.0), dtype=D)
            for k in ("recon", "normal", "distortion", "opacity", "separation", "delta_c", "delta_mu")}


def test_total_stage1_weighting():
    t = _terms()
    w = Stage1Weights(separation_start_iter=10)
    before = total_stage1(t, w, iteration=9).item()
    after = total_stage1(t, w, iteration=10).item()
    expected = (t["recon"] + 0.002 * t["normal"] + 1000 * t["distortion"] + 0.1 * t["opacity"]
                + 0.01 * t["delta_c"] + 0.001 * t["delta_mu"]).item()
    assert before == pytest.approx(expected, rel=1e-12)
    assert after - before == pytest.approx(0.001 * t["separation"].item(), rel=1e-9)


@given(st.sampled_from(["normal", "distortion", "opacity", "separation", "delta_c", "delta_mu"]),
       st.floats(0, 10), st.floats(0, 10))
def test_total_stage1_monotone_in_weights(name, a, b):
    t = _terms(1)
    lo, hi = sorted((a, b))
    w_lo = Stage1Weights(**{name: lo, "separation_start_iter": 0})
    w_hi = Stage1Weights(**{name: hi, "separation_start_iter": 0})
    assert total_stage1(t, w_lo).item() <= total_stage1(t, w_hi).item() + 1e-12


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        Stage1Weights(separation=-1.0)
    with pytest.raises(ValueError):
        Stage2Weights(env=-1.0)


def test_env_lower_penalty_only_counts_lower_rows():
    env = torch.zeros(16, 32, 3, dtype=D)
    env[:8] = 5.0
    assert env_lower_penalty(env).item() == 0.0
    env[12, 3] = torch.tensor([1.0, 2.0, 0.0], dtype=D)
    assert env_lower_penalty(env).item() == pytest.approx(5.0)


def test_total_stage2_terms():
    g = torch.Generator().manual_seed(0)
    render = torch.rand(8, 8, 3, generator=g, dtype=D)
    gt = torch.rand(8, 8, 3, generator=g, dtype=D)
    pbr = torch.rand(5, 3, generator=g, dtype=D)
    gt_pix = torch.rand(5, 3, generator=g, dtype=D)
    env = torch.rand(16, 32, 3, generator=g, dtype=D)
    total, terms = total_stage2(render, gt, pbr, gt_pix, env, Stage2Weights(env=0.5))
    expected = loss_reconstruction(render, gt) + (pbr - gt_pix).abs().mean() + 0.5 * env_lower_penalty(env)
    assert total.item() == pytest.approx(expected.item(), rel=1e-12)
    assert set(terms) == {"recon", "pbr_l1", "env_reg"}


def test_stage2_albedo_only_through_pbr():
    albedo = torch.rand(5, 3, dtype=D, requires_grad=True)
    render = torch.rand(8, 8, 3, dtype=D, requires_grad=True)
    pbr = albedo * 0.7
    total, terms = total_stage2(render, torch.zeros(8, 8, 3, dtype=D), pbr, torch.zeros(5, 3, dtype=D),
                                torch.zeros(16, 32, 3, dtype=D), Stage2Weights())
    (g_recon,) = torch.autograd.grad(terms["recon"], [albedo], allow_unused=True)
    assert g_recon is None
    (g_tot,) = torch.autograd.grad(total, [albedo])
    np.testing.assert_allclose(g_tot.numpy(), 0.7 / 15, rtol=1e-12)
