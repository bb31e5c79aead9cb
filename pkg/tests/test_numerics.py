import math

import numpy as np
import pytest
import torch

from geostack.exceptions import ArgumentError, EvaluationError, ShapeError
from geostack.numerics import (
    Rng,
    causal_attention,
    cross_entropy,
    full_attention,
    gelu,
    grad_check,
    rms_norm,
    round_half_away,
    softmax_rows,
)


def test_rms_norm_formula():
    out = rms_norm(torch.tensor([3.0, 4.0]), torch.ones(2), eps=0.0)
    assert torch.allclose(out, torch.tensor([0.848528, 1.131371]), atol=1e-6)


def test_rms_norm_zero_and_constant_inputs():
    assert torch.equal(rms_norm(torch.zeros(2), torch.ones(2), eps=1e-6), torch.zeros(2))
    out = rms_norm(torch.full((5,), -2.5), torch.ones(5), eps=0.0)
    assert torch.allclose(out, torch.full((5,), -1.0), atol=1e-15)


def test_rms_norm_errors():
    with pytest.raises(ShapeError):
        rms_norm(torch.ones(3), torch.ones(2))
    with pytest.raises(ArgumentError):
        rms_norm(torch.ones(3), torch.ones(3), eps=-1.0)


def test_softmax_rows():
    assert torch.allclose(softmax_rows(torch.zeros(2)), torch.tensor([0.5, 0.5]), atol=1e-15)
    out = softmax_rows(torch.tensor([math.log(2.0), 0.0]))
    assert torch.allclose(out, torch.tensor([2 / 3, 1 / 3]), atol=1e-15)

    x = torch.randn(4, 7, generator=torch.Generator().manual_seed(0)) * 50
    assert torch.allclose(softmax_rows(x + 10), softmax_rows(x), atol=1e-12)
    assert torch.allclose(softmax_rows(x).sum(dim=-1), torch.ones(4), atol=1e-12)
    with pytest.raises(ShapeError):
        softmax_rows(torch.zeros(3, 0))


def test_causal_attention_examples():
    v = torch.tensor([[1.0, 2.0]])
    assert torch.equal(causal_attention(torch.randn(1, 2), torch.randn(1, 2), v, 1.0), v)

    q = k = torch.zeros(2, 3)
    v = torch.tensor([[1.0, 0.0, 2.0], [3.0, 4.0, -2.0]])
    out = causal_attention(q, k, v, 0.5)
    assert torch.allclose(out[1], (v[0] + v[1]) / 2, atol=1e-15)


def test_causal_attention_never_looks_ahead():
    generator = torch.Generator().manual_seed(1)
    q, k, v = (torch.randn(4, 3, generator=generator) for _ in range(3))
    before = causal_attention(q, k, v, 0.7)
    v2 = v.clone()
    v2[2] += 10.0
    after = causal_attention(q, k, v2, 0.7)
    assert torch.allclose(before[:2], after[:2], rtol=0, atol=1e-12)
    assert not torch.equal(before[2], after[2])


def test_cached_query_matches_full_causal_row():
    generator = torch.Generator().manual_seed(2)
    q, k, v = (torch.randn(5, 4, generator=generator) for _ in range(3))
    full = causal_attention(q, k, v, 0.5)
    tail = causal_attention(q[-1:], k, v, 0.5)
    assert torch.allclose(full[-1:], tail, atol=1e-15)


def test_attention_errors():
    with pytest.raises(ShapeError):
        causal_attention(torch.zeros(0, 2), torch.zeros(0, 2), torch.zeros(0, 2), 1.0)
    with pytest.raises(ArgumentError):
        full_attention(torch.zeros(2, 2), torch.zeros(2, 2), torch.zeros(2, 2), 0.0)


def test_grad_check_polynomial():
    assert grad_check(lambda x: (x ** 2).sum(), torch.tensor([1.0, 2.0, 3.0])) < 1e-6


def test_grad_check_cross_entropy_head():
    generator = torch.Generator().manual_seed(3)
    weight = torch.randn(2, 4, generator=generator)
    target = torch.tensor([1])

    def loss(x):
        return cross_entropy((x @ weight.T).reshape(1, 2), target)

    assert grad_check(loss, torch.randn(4, generator=generator), floor=1e-6) < 1e-5


def test_grad_check_constant_function():
    assert grad_check(lambda x: x.sum() * 0.0 + 3.0, torch.tensor([1.0, -1.0])) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_composite_gradients(seed):
    generator = torch.Generator().manual_seed(seed)
    gain = torch.rand(6, generator=generator) + 0.5
    w1 = torch.randn(6, 6, generator=generator) / 3
    wq, wk, wv = (torch.randn(6, 6, generator=generator) / 3 for _ in range(3))
    head = torch.randn(5, 6, generator=generator) / 3
    targets = torch.randint(0, 5, (4,), generator=generator)

    def f(x):
        h = gelu(rms_norm(x, gain) @ w1.T)
        h = causal_attention(h @ wq.T, h @ wk.T, h @ wv.T, 0.4)
        return cross_entropy(h @ head.T, targets)

    assert grad_check(f, torch.randn(4, 6, generator=generator), h=1e-5) < 1e-5


def test_grad_check_rejects_bad_inputs():
    with pytest.raises(ArgumentError):
        grad_check(lambda x: x.sum(), torch.ones(2), h=0.1)
    with pytest.raises(EvaluationError):
        grad_check(lambda x: x.sum() / 0.0, torch.ones(2))


def test_rng_is_reproducible():
    a = Rng(42).generator().standard_normal(8)
    b = Rng(42).generator().standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, Rng(43).generator().standard_normal(8))
    assert not np.array_equal(a, Rng(42).advance(1).generator().standard_normal(8))
    assert Rng(10).split(3) == Rng(13)
    assert Rng(5).derive(1) == Rng(5).derive(1) != Rng(5).derive(2)


def test_round_half_away():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.5, -0.5, -2.5, 2.4)] == [1, 2, 3, -1, -3, 2]
