import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lumikit.deformation import (
    DeformationField, apply_deformation, concrete_sample, deform, gate_inference, mlp_forward,
    modulate_color,
)
from lumikit.geometry import positional_encode

D = torch.float64


def test_zero_heads_output_zero():
    f = DeformationField()
    mu = torch.randn(20, 3)
    with torch.no_grad():
        outs = mlp_forward(f, 0.3, mu)
    for out in outs:
        assert out.shape == (20, 3)
        assert float(out.abs().max()) == 0.0


def test_matches_scalar_loop_reference():
    torch.manual_seed(0)
    f = DeformationField(depth=3, width=16, zero_heads=False).double()
    mu = torch.randn(4, 3, dtype=D)
    t = 0.37
    dmu, dr, dc = mlp_forward(f, t, mu)
    W = [(l.weight.detach().numpy(), l.bias.detach().numpy()) for l in f.trunk]
    heads = {k: (f.heads[k].weight.detach().numpy(), f.heads[k].bias.detach().numpy()) for k in f.heads}
    for i in range(4):
        h = list(positional_encode(t, 6)) + list(positional_encode(mu[i].numpy(), 10))
        for w, b in W:
            h = [max(0.0, sum(w[r, c] * h[c] for c in range(len(h))) + b[r]) for r in range(w.shape[0])]
        for name, out in (("dmu", dmu), ("dr", dr), ("dc", dc)):
            w, b = heads[name]
            ref = [sum(w[r, c] * h[c] for c in range(len(h))) + b[r] for r in range(3)]
            np.testing.assert_allclose(out[i].detach().numpy(), ref, atol=1e-6)


def test_forward_deterministic():
    torch.manual_seed(1)
    f = DeformationField(zero_heads=False)
    mu = torch.randn(10, 3)
    a = mlp_forward(f, 0.25, mu)
    b = mlp_forward(f, 0.25, mu)
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_save_load_round_trip(tmp_path):
    torch.manual_seed(2)
    f = DeformationField(depth=2, width=8, zero_heads=False)
    f.save(tmp_path / "mlp.bin")
    g = DeformationField.load(tmp_path / "mlp.bin")
    mu = torch.randn(5, 3)
    for x, y in zip(f(0.5, mu), g(0.5, mu)):
        assert torch.equal(x, y)


def test_concrete_cases():
    assert concrete_sample(1.0, 0.5, 0.5) == 0.5
    assert concrete_sample(1e-12, 0.5, 0.5) < 1e-15
    assert abs(concrete_sample(math.e ** 2, 0.5, 0.5) - 0.9820137900379085) < 1e-12
    assert abs(float(gate_inference(torch.tensor(math.e ** 2, dtype=D))) - 0.9820137900379085) < 1e-12


def test_concrete_rejects_bad_temperature():
    with pytest.raises(ValueError):
        concrete_sample(1.0, 0.0, 0.5)


@given(st.floats(-50, 50, allow_nan=False), st.floats(1e-3, 1 - 1e-3), st.floats(0.1, 2.0))
def test_gate_bounds_and_sign_symmetry(p, u, T):
    g = concrete_sample(p, T, u)
    assert 0.0 <= g <= 1.0
    assert concrete_sample(-p, T, u) == g


@given(st.floats(1e-6, 1e3), st.floats(1e-6, 1e3), st.floats(0.05, 0.95))
def test_gate_monotone_in_magnitude(a, b, u):
    lo, hi = sorted((a, b))
    assert concrete_sample(lo, 0.5, u) <= concrete_sample(hi, 0.5, u)


@given(st.floats(1e-6, 1e3))
def test_inference_equals_sigmoid_log(p):
    x = math.log(p) / 0.5
    assert abs(gate_inference(p) - 1 / (1 + math.exp(-x))) < 1e-15


def test_torch_numpy_gate_agree():
    p = np.array([0.01, -0.3, 2.0, 7.5])
    u = np.array([0.1, 0.5, 0.7, 0.99])
    np.testing.assert_allclose(concrete_sample(torch.tensor(p), 0.5, torch.tensor(u)).numpy(),
                               concrete_sample(p, 0.5, u), rtol=1e-14)


def _q(n):
    return torch.tensor([[1.0, 0, 0, 0]] * n, dtype=D)


def test_gate_zero_keeps_geometry():
    mu = torch.randn(3, 3, dtype=D)
    q = torch.nn.functional.normalize(torch.randn(3, 4, dtype=D), dim=-1)
    m2, q2 = apply_deformation(mu, q, torch.randn(3, 3, dtype=D), torch.randn(3, 3, dtype=D), torch.zeros(3, dtype=D))
    assert torch.equal(m2, mu)
    torch.testing.assert_close(q2, q, rtol=0, atol=1e-15)


def test_gate_full_and_half():
    mu = torch.zeros(1, 3, dtype=D)
    m2, _ = apply_deformation(mu, _q(1), torch.tensor([[0, 0, 1.0]], dtype=D), torch.zeros(1, 3, dtype=D),
                              torch.ones(1, dtype=D))
    assert m2.tolist() == [[0, 0, 1]]
    m2, _ = apply_deformation(mu, _q(1), torch.tensor([[2.0, 0, 0]], dtype=D), torch.zeros(1, 3, dtype=D),
                              torch.full((1,), 0.5, dtype=D))
    assert m2.tolist() == [[1, 0, 0]]


def test_rotation_delta_added_to_vector_part():
    _, q2 = apply_deformation(torch.zeros(1, 3, dtype=D), _q(1), torch.zeros(1, 3, dtype=D),
                              torch.tensor([[0, 0, 1.0]], dtype=D), torch.ones(1, dtype=D))
    np.testing.assert_allclose(q2.numpy(), [[2 ** -0.5, 0, 0, 2 ** -0.5]], atol=1e-15)


def test_modulate_color():
    c = torch.full((1, 3), 0.8, dtype=D)
    assert torch.equal(modulate_color(c, torch.zeros(1, 3, dtype=D)), c)
    torch.testing.assert_close(modulate_color(c, torch.full((1, 3), 0.5, dtype=D)), torch.full((1, 3), 0.4, dtype=D))
    assert float(modulate_color(c, torch.ones(1, 3, dtype=D)).abs().max()) == 0.0
    assert float(modulate_color(c, torch.full((1, 3), -5.0, dtype=D)).max()) == 1.0


def test_deform_never_touches_scales_or_opacity():
    # structural: deform receives neither and returns neither
    torch.manual_seed(3)
    f = DeformationField(zero_heads=False)
    out = deform(f, torch.randn(6, 3), _q(6).float(), torch.rand(6, 3), torch.full((6,), 0.5), 0.4)
    assert set(out) == {"means", "quats", "color", "dmu", "dr", "dc", "gate"}


def test_zero_gate_equals_canonical_when_dc_off():
    torch.manual_seed(4)
    f = DeformationField(zero_heads=False)
    mu, q, c = torch.randn(6, 3), _q(6).float(), torch.rand(6, 3)
    for t in (0.0, 0.5, 1.0):
        out = deform(f, mu, q, c, torch.zeros(6), t, gate="zero", use_dc=False)
        assert torch.equal(out["means"], mu) and torch.equal(out["color"], c)


def test_dc_is_not_gated():
    torch.manual_seed(5)
    f = DeformationField(zero_heads=False)
    out = deform(f, torch.randn(4, 3), _q(4).float(), torch.full((4, 3), 0.5), torch.zeros(4), 0.3, gate="zero")
    assert not torch.equal(out["color"], torch.full((4, 3), 0.5))


def test_bad_gate_mode():
    with pytest.raises(ValueError):
        deform(None, torch.zeros(1, 3), _q(1).float(), torch.zeros(1, 3), torch.zeros(1), 0.1, gate="maybe")
