import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from loopformer import numerics as nx


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def test_matmul_identity():
    x = t64([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(nx.matmul(torch.eye(2, dtype=torch.float64), x), x)


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(nx.ShapeError) as exc:
        nx.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
    assert "matmul" in str(exc.value)
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_add_mul_shape_errors():
    with pytest.raises(nx.ShapeError):
        nx.add(torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(nx.ShapeError):
        nx.mul(torch.zeros(3), torch.zeros(2))


def test_softmax_uniform():
    out = nx.softmax(t64([0.0, 0.0, 0.0]))
    assert torch.allclose(out, torch.full((3,), 1 / 3, dtype=torch.float64), atol=0, rtol=1e-15)


def test_concat_shape():
    v, t = torch.zeros(2, 8), torch.zeros(3, 8)
    assert nx.concat_tokens([v, t]).shape == (5, 8)


def test_concat_rejects_width_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.concat_tokens([torch.zeros(2, 8), torch.zeros(3, 7)])


def test_split_rejects_bad_boundary():
    with pytest.raises(nx.ShapeError):
        nx.split_tokens(torch.zeros(4, 2), 5)


@given(n=st.integers(1, 12), d=st.integers(1, 6), data=st.data())
@settings(max_examples=40, deadline=None)
def test_concat_split_roundtrip(n, d, data):
    b = data.draw(st.integers(0, n))
    x = torch.randn(2, n, d, dtype=torch.float64)
    a, c = nx.split_tokens(x, b)
    assert torch.equal(nx.concat_tokens([a, c]), x)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one(vals):
    out = nx.softmax(t64(vals))
    assert abs(float(out.sum()) - 1.0) < 1e-12


def test_rms_norm_unit_input():
    out = nx.rms_norm(t64([1.0, 1.0, 1.0, 1.0]), torch.ones(4, dtype=torch.float64), eps=0.0)
    assert torch.allclose(out, torch.ones(4, dtype=torch.float64), atol=1e-15)


def test_rms_norm_three_four():
    # rms = sqrt((9 + 16) / 2) = sqrt(12.5)
    out = nx.rms_norm(t64([3.0, 4.0]), torch.ones(2, dtype=torch.float64), eps=0.0)
    assert out.tolist() == pytest.approx([0.84852814, 1.13137085], abs=1e-8)


@given(c=st.floats(1e-3, 1e3), d=st.integers(1, 10))
@settings(max_examples=40, deadline=None)
def test_rms_norm_constant_vector_is_ones(c, d):
    out = nx.rms_norm(torch.full((d,), c, dtype=torch.float64), torch.ones(d, dtype=torch.float64), eps=0.0)
    assert torch.allclose(out, torch.ones(d, dtype=torch.float64), atol=1e-12)


def test_rms_norm_gain_shape_error():
    with pytest.raises(nx.ShapeError):
        nx.rms_norm(torch.zeros(3, 4), torch.ones(3))


def test_cross_entropy_uniform():
    losses = nx.per_token_cross_entropy(torch.zeros(3, 4, dtype=torch.float64), torch.tensor([0, 2, 3]))
    assert torch.allclose(losses, torch.full((3,), math.log(4), dtype=torch.float64))


def test_cross_entropy_confident():
    logits = torch.zeros(1, 5, dtype=torch.float64)
    logits[0, 3] = 1e6
    assert float(nx.per_token_cross_entropy(logits, torch.tensor([3]))[0]) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_hand_value():
    # -log(e^3 / (e + e^2 + e^3)) = log(1 + e^-1 + e^-2)
    loss = nx.per_token_cross_entropy(t64([[1.0, 2.0, 3.0]]), torch.tensor([2]))
    assert float(loss[0]) == pytest.approx(0.40761, abs=1e-5)
    assert float(loss[0]) == pytest.approx(math.log(1 + math.exp(-1) + math.exp(-2)), abs=1e-14)


def test_cross_entropy_nonnegative():
    losses = nx.per_token_cross_entropy(torch.randn(20, 7, dtype=torch.float64) * 5, torch.randint(0, 7, (20,)))
    assert (losses >= 0).all()


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        nx.per_token_cross_entropy(torch.zeros(2, 4), torch.tensor([1, 4]))


def test_embedding_lookup_out_of_range():
    with pytest.raises(IndexError):
        nx.embedding_lookup(torch.zeros(5, 3), torch.tensor([0, 5]))


def test_causal_attention_matches_reference():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(2, 3, 7, 4, generator=g, dtype=torch.float64) for _ in range(3))
    assert torch.allclose(nx.causal_attention(q, k, v), nx.causal_attention_reference(q, k, v), atol=1e-12)


def test_causal_attention_first_token_sees_only_itself():
    q, k, v = torch.randn(5, 4), torch.randn(5, 4), torch.randn(5, 4)
    out = nx.causal_attention(q, k, v)
    assert torch.allclose(out[0], v[0], atol=1e-6)


def test_grad_check_square():
    x = torch.randn(6, dtype=torch.float64)
    assert nx.grad_check(lambda a: (a * a).sum(), x, 1e-6) < 1e-6


def test_grad_check_constant():
    x = torch.randn(4, dtype=torch.float64)
    assert nx.grad_check(lambda a: a.sum() * 0 + 3.0, x, 1e-6) == 0.0


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        nx.grad_check(lambda a: a.sum(), torch.randn(3), 1e-6)


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        nx.grad_check(lambda a: a.sum(), torch.randn(3, dtype=torch.float64), 1e-2)


def test_grad_check_non_finite():
    with pytest.raises(nx.NonFiniteError):
        nx.grad_check(lambda a: a.sum() / 0.0, torch.ones(3, dtype=torch.float64), 1e-6)


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x**2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=torch.float64)

    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    assert nx.grad_check(Wrong.apply, x, 1e-6) > 0.1


def _ops():
    g = torch.Generator().manual_seed(3)

    def r(*s):
        return torch.randn(*s, generator=g, dtype=torch.float64)

    w, w5, wa = r(3, 5), r(5, 5), r(2, 4, 3)
    return {
        "matmul": (lambda a, b: (nx.matmul(a, b) * w).sum(), [r(3, 4), r(4, 5)]),
        "add": (lambda a, b: (nx.add(a, b) ** 2).sum(), [r(3, 5), r(5)]),
        "mul": (lambda a, b: (nx.mul(a, b) * w).sum(), [r(3, 5), r(3, 5)]),
        "concat": (lambda a, b: (nx.concat_tokens([a, b]) ** 2 * w5).sum(), [r(2, 5), r(3, 5)]),
        "split": (lambda a: (nx.split_tokens(a, 2)[1] * w).sum(), [r(5, 5)]),
        "softmax": (lambda a: (nx.softmax(a) * w).sum(), [r(3, 5)]),
        "silu": (lambda a: (nx.silu(a) * w).sum(), [r(3, 5)]),
        "embedding": (lambda t: (nx.embedding_lookup(t, torch.tensor([0, 2, 2])) * w).sum(), [r(4, 5)]),
        "transpose": (lambda a: (nx.transpose(a) * w).sum(), [r(5, 3)]),
        "sum": (lambda a: nx.reduce_sum(a, 0).pow(2).sum(), [r(3, 5)]),
        "mean": (lambda a: nx.reduce_mean(a, 1).pow(3).sum(), [r(3, 5)]),
        "attention": (lambda q, k, v: (nx.causal_attention(q, k, v) * wa).sum(), [r(2, 4, 3) for _ in range(3)]),
        "rms_norm": (lambda x, gn: (nx.rms_norm(x, gn) * w).sum(), [r(3, 5), r(5)]),
        "cross_entropy": (lambda lg: nx.per_token_cross_entropy(lg, torch.tensor([1, 0, 4])).sum(), [r(3, 5)]),
    }


@pytest.mark.parametrize("name", list(_ops()))
def test_every_op_passes_grad_check(name):
    f, args = _ops()[name]
    assert nx.grad_check(f, args, 1e-5) < 1e-5
