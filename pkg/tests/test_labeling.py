import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from darksurrogate.core import Rng, build_model, softmax, zero_parameters
from darksurrogate.labeling import LabelStrategy, dark_label, one_hot, reverse_dark, shuffle_dark, smooth_label


def _simplex(k, seed):
    return torch.from_numpy(Rng(seed, "simplex").numpy.dirichlet(np.ones(k)))


def test_one_hot_cases():
    assert one_hot(2, 4).tolist() == [0, 0, 1, 0]
    assert one_hot(0, 1).tolist() == [1]
    with pytest.raises(ValueError):
        one_hot(5, 3)


def test_smooth_label_cases():
    p = smooth_label(0, 10, 0.1)
    assert math.isclose(float(p[0]), 0.9, abs_tol=1e-12)
    assert torch.allclose(p[1:], torch.full((9,), 0.1 / 9, dtype=torch.float64), atol=1e-12)
    assert torch.equal(smooth_label(3, 5, 0.0), one_hot(3, 5))
    assert smooth_label(1, 2, 0.5).tolist() == [0.5, 0.5]


def test_smooth_label_rejects_single_class():
    with pytest.raises(ValueError):
        smooth_label(0, 1, 0.1)


def test_dark_label_zero_teacher_is_uniform():
    t = zero_parameters(build_model("linear", 4, (1, 3, 3), Rng(0)))
    p = dark_label(t, torch.rand(3, 1, 3, 3))
    assert torch.allclose(p, torch.full((3, 4), 0.25, dtype=p.dtype), atol=1e-7)


def test_dark_label_high_temperature_approaches_uniform():
    t = build_model("mlp", 5, (1, 4, 4), Rng(1))
    p = dark_label(t, torch.rand(4, 1, 4, 4), temperature=1e6)
    assert float((p - 0.2).abs().max()) < 1e-3


def test_dark_label_linear_teacher_closed_form():
    t = build_model("linear", 2, (1, 1, 2), Rng(0)).double()
    with torch.no_grad():
        t.head.weight.copy_(torch.tensor([[1.0, -2.0], [0.5, 3.0]]))
        t.head.bias.copy_(torch.tensor([0.25, -0.5]))
    x = torch.tensor([[[[0.2, 0.7]]]], dtype=torch.float64)
    z0 = 1.0 * 0.2 - 2.0 * 0.7 + 0.25
    z1 = 0.5 * 0.2 + 3.0 * 0.7 - 0.5
    p1 = 1 / (1 + math.exp(z0 - z1))
    assert torch.allclose(dark_label(t, x)[0], torch.tensor([1 - p1, p1], dtype=torch.float64), atol=1e-12)


def test_dark_label_matches_softmax_and_restores_mode():
    t = build_model("conv_a", 6, (3, 8, 8), Rng(2))
    t.train()
    x = torch.rand(5, 3, 8, 8)
    p = dark_label(t, x)
    assert t.training
    t.eval()
    assert torch.allclose(p, softmax(t(x).detach()).to(p.dtype), atol=1e-6)


def test_dark_label_class_mismatch():
    with pytest.raises(ValueError):
        dark_label(build_model("mlp", 3, (1, 4, 4), Rng(0)), torch.rand(1, 1, 4, 4), num_classes=4)


def test_shuffle_two_classes_is_identity():
    p = torch.tensor([0.3, 0.7], dtype=torch.float64)
    assert torch.equal(shuffle_dark(p, 1, Rng(0)), p)


def test_shuffle_three_classes_enumeration():
    p = torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64)
    seen = {tuple(shuffle_dark(p, 0, Rng(s)).tolist()) for s in range(40)}
    assert seen == {(0.5, 0.3, 0.2), (0.5, 0.2, 0.3)}


def test_shuffle_preserves_sum_on_draws():
    g = Rng(3, "draws")
    p = torch.from_numpy(g.numpy.dirichlet(np.ones(7), size=1000))
    y = torch.from_numpy(g.integers(0, 7, 1000))
    q = shuffle_dark(p, y, g)
    assert torch.allclose(q.sum(1), torch.ones(1000, dtype=torch.float64), atol=1e-12)


def test_reverse_cases():
    assert reverse_dark(torch.tensor([0.5, 0.3, 0.2]), 0).tolist() == pytest.approx([0.5, 0.2, 0.3])
    flat = torch.tensor([0.4, 0.2, 0.2, 0.2], dtype=torch.float64)
    assert torch.equal(reverse_dark(flat, 0), flat)
    two = torch.tensor([0.9, 0.1], dtype=torch.float64)
    assert torch.equal(reverse_dark(two, 0), two)


def test_reverse_inverts_rank_order():
    p = torch.tensor([0.05, 0.4, 0.1, 0.3, 0.15], dtype=torch.float64)
    q = reverse_dark(p, 1)
    assert q.tolist() == [0.3, 0.4, 0.15, 0.05, 0.1]


@given(st.integers(2, 12), st.integers(0, 10_000), st.data())
def test_corruptions_keep_true_class_and_multiset(k, seed, data):
    p = _simplex(k, seed)
    y = data.draw(st.integers(0, k - 1))
    for q in (shuffle_dark(p, y, Rng(seed)), reverse_dark(p, y)):
        assert q[y] == p[y]
        rest = lambda v: sorted(v[torch.arange(k) != y].tolist())
        assert rest(q) == rest(p)
        assert abs(float(q.sum()) - 1) < 1e-12


def test_strategy_requires_teacher():
    with pytest.raises(ValueError):
        LabelStrategy("dark")
    with pytest.raises(ValueError):
        LabelStrategy("smooth", gamma=1.0)


def test_dark_strategy_never_reads_labels():
    t = build_model("mlp", 3, (1, 4, 4), Rng(0))
    calls = []
    s = LabelStrategy("dark", teacher=t)
    s.from_teacher(torch.rand(2, 1, 4, 4), lambda: calls.append(1), Rng(0), 3)
    assert calls == []
