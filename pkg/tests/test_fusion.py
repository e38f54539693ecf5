import numpy as np
import pytest

from riskcap import tensor as T
from riskcap.fusion import ConcatFusion, GateFusion
from riskcap.gradcheck import grad_check
from riskcap.nn import Parameter


def streams(seed, b=2, q=4, c=8):
    rng = np.random.default_rng(seed)
    return [Parameter(rng.normal(size=(b, q, c))) for _ in range(3)]


def gate(seed=0, q=4, c=8, use_hi=True):
    return GateFusion(c, 16, 2, q, np.random.default_rng(seed), use_hi=use_hi)


def test_zero_gate_identity_at_init():
    for seed in range(20):
        f = gate(seed)
        L_g, H_g, L_r = streams(seed)
        out = f(L_g, H_g, L_r)
        assert f.w.data == 0.0
        assert np.array_equal(out.v_hat.data, L_r.data)
        assert out.c_g.shape == (2, 4, 16)


def test_single_query_attention_returns_projected_value():
    f = gate(q=1)
    L_g, H_g, L_r = streams(1, q=1)
    out = f(L_g, H_g, L_r)
    expected = f.ca.wo(f.ca.wv(out.c_g)).data
    assert np.allclose(out.v.data, expected, atol=1e-12)


def test_gate_gradient_nonzero_and_checked():
    f = gate()
    L_g, H_g, L_r = streams(2)
    r = np.random.default_rng(3).normal(size=(2, 4, 16))
    (f(L_g, H_g, L_r).tokens * r).sum().backward()
    assert f.w.grad != 0.0
    f.w.data = np.array(0.3)
    assert grad_check(lambda xs: (f(L_g, H_g, L_r).tokens * r).sum(), [f.w, L_g, H_g, L_r]) < 1e-4


def test_pinned_zero_gate_blocks_grid_gradients():
    f = gate()
    L_g, H_g, L_r = streams(4)
    r = np.random.default_rng(5).normal(size=(2, 4, 16))
    (f(L_g, H_g, L_r).tokens * r).sum().backward()
    assert not np.any(L_g.grad) and not np.any(H_g.grad)
    assert np.any(L_r.grad)


@pytest.mark.parametrize("bad", ["tokens", "width"])
def test_shape_mismatch_rejected(bad):
    f = gate()
    L_g, H_g, L_r = streams(0)
    other = Parameter(np.zeros((2, 5, 8)) if bad == "tokens" else np.zeros((2, 4, 6)))
    with pytest.raises(ValueError):
        f(L_g, other, L_r)


def test_without_hi_branch_uses_lo_grid_only():
    f = gate(use_hi=False)
    L_g, _, L_r = streams(0)
    out = f(L_g, None, L_r)
    assert out.c_g.shape == (2, 4, 8)
    assert np.array_equal(out.v_hat.data, L_r.data)


def test_project_to_lm_affine():
    f = gate()
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    zero = f.project_to_lm(T.Tensor(np.zeros((3, 8)))).data
    assert np.array_equal(zero, np.tile(f.proj.bias.data, (3, 1)))
    lhs = f.project_to_lm(T.Tensor(a + b)).data
    rhs = f.project_to_lm(T.Tensor(a)).data + f.project_to_lm(T.Tensor(b)).data - f.proj.bias.data
    assert np.allclose(lhs, rhs, atol=1e-12)
    x = Parameter(a)
    assert grad_check(lambda xs: (f.project_to_lm(xs[0]) ** 2).sum(), [x, f.proj.weight]) < 1e-4


def test_concat_fusion_stream_count():
    L_g, H_g, L_r = streams(0)
    f = ConcatFusion(8, 16, 3, 4, np.random.default_rng(0))
    assert f(L_g, H_g, L_r).tokens.shape == (2, 4, 16)
    with pytest.raises(ValueError):
        f(L_g, None, L_r)
