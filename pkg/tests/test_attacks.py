import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from darksurrogate.attacks import (
    AttackConfig,
    attack,
    clip_project,
    ensemble_attack,
    fgsm,
    input_diversity,
    mdi2_fgsm,
    mi_fgsm,
    targeted_logit_loss,
)
from darksurrogate.core import Rng, build_model, zero_parameters
from darksurrogate.evalharness import VictimOracle
from darksurrogate.training import TrainConfig, predict, train_normal

SHAPE = (3, 8, 8)


def _x(n=4, seed=0, shape=SHAPE):
    return torch.from_numpy(Rng(seed, "x").random((n, *shape))).float()


def _model(arch="conv_a", k=5, seed=0):
    return build_model(arch, k, SHAPE, Rng(seed, arch))


# projection


def test_clip_project_cases():
    x = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    assert torch.equal(clip_project(x, x, 0.1), x)
    assert torch.allclose(clip_project(torch.ones_like(x), x, 0.1), torch.full_like(x, 0.6), atol=1e-15)
    low = torch.full_like(x, 0.01)
    assert torch.equal(clip_project(torch.full_like(x, -0.5), low, 0.1), torch.zeros_like(x))


# FGSM


def test_fgsm_linear_closed_form():
    m = build_model("linear", 2, (1, 1, 1), Rng(0)).double()
    with torch.no_grad():
        m.head.weight.copy_(torch.tensor([[2.0], [-1.0]]))
        m.head.bias.zero_()
    x = torch.tensor([[[[0.5]]]])
    # y = 0: dCE/dx = 2 (p0 - 1) - p1 = -3 p1 < 0, so the pixel moves down by eps
    adv = fgsm(m, x, torch.tensor([0]), 0.1).adversarial
    assert float(adv) == pytest.approx(0.4, abs=1e-12)
    adv1 = fgsm(m, x, torch.tensor([1]), 0.1).adversarial
    assert float(adv1) == pytest.approx(0.6, abs=1e-12)


def test_fgsm_zero_budget_and_zero_gradient():
    x = _x()
    y = torch.tensor([0, 1, 2, 3])
    assert torch.equal(fgsm(_model(), x, y, 0.0).adversarial.float(), x)
    flat = zero_parameters(_model())
    assert torch.equal(fgsm(flat, x, y, 0.1).adversarial.float(), x)


# reductions


@pytest.mark.parametrize("arch", ["conv_a", "conv_b", "mlp"])
def test_mi_fgsm_single_step_is_fgsm_bitwise(arch):
    m, x, y = _model(arch), _x(), torch.tensor([0, 1, 2, 3])
    eps = 16 / 255
    a = fgsm(m, x, y, eps).adversarial
    b = mi_fgsm(m, x, y, AttackConfig(epsilon=eps, beta=eps, mu=0.0, steps=1)).adversarial
    c = mdi2_fgsm(m, x, y, AttackConfig(epsilon=eps, beta=eps, mu=0.0, steps=1, p_t=0.0), Rng(1))
    assert torch.equal(a, b) and torch.equal(a, c.adversarial)


def test_mdi2_with_zero_probability_is_mi_fgsm():
    m, x, y = _model(), _x(), torch.tensor([0, 1, 2, 3])
    cfg = AttackConfig(p_t=0.0)
    assert torch.equal(mdi2_fgsm(m, x, y, cfg, Rng(4)).adversarial, mi_fgsm(m, x, y, cfg).adversarial)


def test_singleton_and_duplicate_ensembles_match_single_model():
    m, x, y = _model(), _x(), torch.tensor([0, 1, 2, 3])
    cfg = AttackConfig()
    single = mdi2_fgsm(m, x, y, cfg, Rng(2, "e")).adversarial
    assert torch.equal(ensemble_attack([m], x, y, cfg, Rng(2, "e")).adversarial, single)
    assert torch.equal(ensemble_attack([m, m], x, y, cfg, Rng(2, "e")).adversarial, single)


def test_ensemble_rejects_empty_and_mismatched():
    with pytest.raises(ValueError):
        ensemble_attack([], _x(), torch.zeros(4, dtype=torch.long), AttackConfig())
    with pytest.raises(ValueError):
        ensemble_attack([_model(k=5), _model(k=6)], _x(), torch.zeros(4, dtype=torch.long), AttackConfig())


def test_constant_model_leaves_input_unchanged():
    flat = zero_parameters(_model("mlp"))
    x = _x()
    out = mi_fgsm(flat, x, torch.zeros(4, dtype=torch.long), AttackConfig(steps=5))
    assert torch.equal(out.adversarial.float(), x)
    assert (out.grad_norms == 0).all()


def test_step_and_budget_bounds():
    m, x, y = _model(), _x(), torch.tensor([0, 1, 2, 3])
    cfg = AttackConfig(epsilon=16 / 255, beta=2 / 255, steps=10)
    adv = mi_fgsm(m, x, y, cfg).adversarial
    dist = float((adv - x.double()).abs().max())
    assert dist <= 16 / 255 + 1e-9 and dist <= 10 * 2 / 255 + 1e-9


@given(
    st.integers(0, 1000),
    st.floats(0.0, 0.2),
    st.floats(0.001, 0.1),
    st.floats(0.0, 2.0),
    st.integers(1, 6),
    st.floats(0.0, 1.0),
    st.sampled_from(["untargeted_ce", "targeted_ce", "targeted_logit"]),
    st.sampled_from(["fgsm", "mi_fgsm", "mdi2_fgsm"]),
)
def test_budget_and_range_hold_for_random_configs(seed, eps, beta, mu, steps, p_t, objective, optimizer):
    m = _model("conv_b", seed=seed % 3)
    x = _x(3, seed)
    label = torch.from_numpy(Rng(seed).integers(0, 5, 3))
    cfg = AttackConfig(epsilon=eps, beta=beta, mu=mu, steps=steps, p_t=p_t, objective=objective)
    adv = attack(optimizer, m, x, label, cfg, Rng(seed, "fuzz")).adversarial
    assert float((adv - x.double()).abs().max()) <= eps + 1e-9
    assert adv.min() >= 0 and adv.max() <= 1


def test_embedding_objectives_respect_budget():
    m, x, ref = _model(), _x(), _x(seed=9)
    for obj in ("embedding_dodge", "embedding_impersonate"):
        adv = mdi2_fgsm(m, x, ref, AttackConfig(epsilon=8 / 255, objective=obj, steps=5), Rng(0)).adversarial
        assert float((adv - x.double()).abs().max()) <= 8 / 255 + 1e-9


def test_attacks_are_deterministic_and_restore_mode():
    m, x, y = _model(), _x(), torch.tensor([0, 1, 2, 3])
    m.train()
    a = mdi2_fgsm(m, x, y, AttackConfig(), Rng(7)).adversarial
    assert m.training
    b = mdi2_fgsm(m, x, y, AttackConfig(), Rng(7)).adversarial
    assert torch.equal(a, b)


# input diversity


def test_input_diversity_identity_cases():
    x = _x(6, shape=(3, 16, 16))
    assert input_diversity(x, 0.0, Rng(0)) is x
    forced = input_diversity(x, 1.0, Rng(0), low=1.0)
    assert torch.equal(forced, x)


@given(st.integers(0, 1000), st.integers(4, 20), st.floats(0, 1))
def test_input_diversity_shape_and_support(seed, h, p_t):
    x = _x(5, seed, shape=(2, h, h)) + 0.01
    out = input_diversity(x.clamp(max=1), p_t, Rng(seed))
    assert out.shape == x.shape
    lo = int(np.ceil(0.75 * h))
    for i in range(5):
        nz = torch.nonzero(out[i, 0])
        rows = int(nz[:, 0].max() - nz[:, 0].min() + 1)
        assert lo <= rows <= h


def test_input_diversity_is_differentiable():
    x = _x(2, shape=(1, 8, 8)).double().requires_grad_(True)
    input_diversity(x, 1.0, Rng(3)).sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0


# targeted logit loss


def test_targeted_logit_linear_gradient_is_weight_row():
    m = build_model("linear", 4, (1, 2, 2), Rng(0)).double()
    x = torch.rand(3, 1, 2, 2, dtype=torch.float64)
    yt = torch.tensor([2, 0, 3])
    _, g = targeted_logit_loss(m, x, yt)
    W = m.head.weight.detach()
    for i in range(3):
        assert torch.allclose(g[i].view(-1), W[yt[i]], atol=1e-15)


def test_targeted_logit_identical_rows_give_identical_gradients():
    m = build_model("linear", 3, (1, 2, 2), Rng(0)).double()
    with torch.no_grad():
        m.head.weight[2] = m.head.weight[1]
    x = torch.rand(1, 1, 2, 2, dtype=torch.float64)
    _, g1 = targeted_logit_loss(m, x, torch.tensor([1]))
    _, g2 = targeted_logit_loss(m, x, torch.tensor([2]))
    assert torch.equal(g1, g2)


def test_targeted_logit_gradient_matches_finite_differences():
    m = _model("conv_b").double()
    x = _x(2).double()
    yt = torch.tensor([3, 1])
    _, g = targeted_logit_loss(m, x, yt)
    f = lambda z: float(targeted_logit_loss(m, z, yt)[0].sum())
    h = 1e-6
    for idx in Rng(8).permutation(x.numel())[:20]:
        xp, xm = x.clone(), x.clone()
        xp.view(-1)[idx] += h
        xm.view(-1)[idx] -= h
        fd = (f(xp) - f(xm)) / (2 * h)
        a = float(g.view(-1)[idx])
        assert abs(fd - a) <= 1e-3 * max(abs(fd), abs(a), 1e-4)


def test_targeted_logit_rejects_out_of_range():
    with pytest.raises(ValueError):
        targeted_logit_loss(_model(), _x(1), torch.tensor([5]))


# oracles and white-box harm


def test_attacks_refuse_victim_oracles():
    oracle = VictimOracle(_model(), "v")
    with pytest.raises(TypeError):
        mi_fgsm(oracle, _x(), torch.zeros(4, dtype=torch.long), AttackConfig())


def test_mi_fgsm_harms_at_least_as_much_as_fgsm():
    from darksurrogate.toydata import make_class_world

    world = make_class_world(0, num_classes=5, num_super=2, shape=SHAPE)
    train = world.sample(400, Rng(0, "harm-train"))
    test = world.sample(200, Rng(0, "harm-test"), split="test")
    x, y = test.images, test.labels
    eps = 4 / 255
    gaps = []
    for seed in (1, 2, 3):
        m = build_model("conv_b", 5, SHAPE, Rng(seed))
        train_normal(m, train, TrainConfig(epochs=4, batch_size=32, lr=0.05, milestones=(3,), flip=False, seed=seed))
        one = float((predict(m, fgsm(m, x, y, eps).adversarial.float()) != y).double().mean())
        it = float((predict(m, mi_fgsm(m, x, y, AttackConfig(epsilon=eps, beta=eps / 4)).adversarial.float()) != y).double().mean())
        gaps.append(it - one)
    assert np.mean(gaps) >= 0
