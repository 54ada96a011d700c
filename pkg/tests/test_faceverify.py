import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from darksurrogate.attacks import AttackConfig
from darksurrogate.core import Rng, build_model, zero_parameters
from darksurrogate.evalharness import FaceSetup
from darksurrogate.faceverify import (
    FACE_DEFAULTS,
    MarginLossConfig,
    VerificationOracle,
    attack_success,
    build_toy_identity_dataset,
    calibrate_threshold,
    cosine_sim,
    dodging_attack,
    eer_threshold,
    embed,
    face_transfer,
    impersonate_attack,
    margin_logits,
    margin_loss,
    read_pairs,
    train_face_classifier,
    verification_accuracy,
    write_pairs,
)
from darksurrogate.toydata import make_identity_world
from darksurrogate.training import TrainConfig

SHAPE = (3, 16, 16)


@pytest.fixture(scope="module")
def faces():
    world = make_identity_world(0)
    train = world.sample_identities(8, 30, Rng(0, "face-train"))
    data, protocol = build_toy_identity_dataset(8, 8, Rng(0, "face-eval"), world=world, pairs_per_kind=40)
    return train, data, protocol


@pytest.fixture(scope="module")
def trained(faces):
    train, _, _ = faces
    m = build_model("conv_a", 8, SHAPE, Rng(0, "face-init"))
    train_face_classifier(m, train, MarginLossConfig(), TrainConfig(epochs=6, batch_size=32, lr=0.05, milestones=(4,), flip=False, seed=0))
    return m


# embeddings and similarity


def test_embed_shape_determinism_and_zero_model():
    m = build_model("conv_b", 5, SHAPE, Rng(1))
    x = torch.rand(3, *SHAPE)
    e = embed(m, x)
    assert e.shape == (3, m.embed_dim)
    assert torch.equal(e, embed(m, x))
    assert torch.count_nonzero(embed(zero_parameters(m), x)) == 0


def test_embed_requires_penultimate_layer():
    with pytest.raises(TypeError):
        embed(torch.nn.Linear(3, 2), torch.rand(1, 3))


def test_cosine_cases():
    e = torch.tensor([0.3, -1.2, 2.0])
    assert float(cosine_sim(e, e)) == pytest.approx(1.0, abs=1e-12)
    assert float(cosine_sim(e, -e)) == pytest.approx(-1.0, abs=1e-12)
    assert float(cosine_sim([1.0, 0.0], [0.0, 1.0])) == 0.0


def test_cosine_zero_vector_warns():
    with pytest.warns(RuntimeWarning):
        assert float(cosine_sim([0.0, 0.0], [1.0, 2.0])) == 0.0


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_cosine_symmetric_and_scale_invariant(seed, c):
    a, b = torch.from_numpy(Rng(seed).normal(size=(2, 7)))
    assert float(cosine_sim(a, b)) == float(cosine_sim(b, a))
    assert abs(float(cosine_sim(a, c * b)) - float(cosine_sim(a, b))) < 1e-6


# thresholds


def test_eer_separable_scores():
    sims = np.array([0.9, 0.8, 0.85, 0.1, 0.2, 0.3])
    same = np.array([1, 1, 1, 0, 0, 0])
    tau, eer = eer_threshold(sims, same)
    assert eer == 0.0 and 0.3 < tau < 0.8


def test_eer_identical_distributions():
    sims = np.array([0.5, 0.5, 0.5, 0.5])
    _, eer = eer_threshold(sims, np.array([1, 0, 1, 0]))
    assert eer == 0.5


def test_eer_ties_break_toward_lower_threshold():
    # thresholds 0.25 and 0.75 both give |FAR - FRR| = 0.5; the lower one wins
    sims = np.array([0.0, 0.5, 1.0])
    tau, _ = eer_threshold(sims, np.array([1, 0, 1]))
    assert tau == 0.25


def test_eer_rejects_single_kind():
    with pytest.raises(ValueError):
        eer_threshold([0.1, 0.2], [1, 1])


def test_calibration_is_deterministic(faces, trained):
    _, _, protocol = faces
    assert calibrate_threshold(trained, protocol) == calibrate_threshold(trained, protocol)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_margin_trained_verifier_accuracy_at_calibrated_threshold(seed):
    data = FaceSetup().build_datasets()
    train, protocol = data["train"], data["protocol"]
    m = build_model("conv_a", train.num_classes, train.shape, Rng(seed, "face-init"))
    cfg = TrainConfig(epochs=12, milestones=(6, 10), batch_size=64, lr=0.05, flip=False, seed=seed)
    train_face_classifier(m, train, MarginLossConfig("am_softmax"), cfg)
    assert verification_accuracy(m, protocol, calibrate_threshold(m, protocol)) >= 0.9


# margin losses


@pytest.mark.parametrize("kind", ["am_softmax", "aaml"])
@given(seed=st.integers(0, 10_000), s=st.floats(0.5, 64))
def test_zero_margin_is_scaled_softmax_on_normalized_features(kind, seed, s):
    r = Rng(seed)
    f = torch.from_numpy(r.normal(size=(6, 9)))
    w = torch.from_numpy(r.normal(size=(4, 9)))
    y = torch.from_numpy(r.integers(0, 4, 6))
    plain = s * F.linear(F.normalize(f, dim=1), F.normalize(w, dim=1))
    got = margin_logits(f, w, y, MarginLossConfig(kind, scale=s, margin=0.0))
    assert abs(float(F.cross_entropy(got, y)) - float(F.cross_entropy(plain, y))) < 1e-6


def test_am_softmax_closed_form():
    f = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    w = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    got = margin_logits(f, w, torch.tensor([0]), MarginLossConfig("am_softmax", scale=2.0, margin=0.25))
    assert got.tolist() == [[1.5, 0.0]]


def test_aaml_angle_and_fallback():
    cfg = MarginLossConfig("aaml", scale=1.0, margin=0.5)
    w = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    for theta in (0.3, 1.2, 2.5):
        f = torch.tensor([[math.cos(theta), math.sin(theta)]], dtype=torch.float64)
        got = float(margin_logits(f, w, torch.tensor([0]), cfg)[0, 0])
        want = math.cos(theta + 0.5) if theta + 0.5 <= math.pi else math.cos(theta) - 0.5 * math.sin(0.5)
        assert got == pytest.approx(want, abs=1e-12)
    # past pi the fallback keeps the target logit decreasing in theta
    angles = np.linspace(2.5, 3.1, 20)
    vals = [float(margin_logits(torch.tensor([[math.cos(t), math.sin(t)]], dtype=torch.float64), w, torch.tensor([0]), cfg)[0, 0]) for t in angles]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_margin_config_validation():
    with pytest.raises(ValueError):
        MarginLossConfig("triplet")
    with pytest.raises(ValueError):
        MarginLossConfig("aaml", scale=0.0)
    with pytest.raises(ValueError):
        MarginLossConfig("am_softmax", margin=-0.1)
    assert (MarginLossConfig("aaml").scale, MarginLossConfig("aaml").margin) == (30.0, 0.5)
    with pytest.raises(ValueError):
        MarginLossConfig("aaml", warmup_epochs=-1)
    with pytest.raises(ValueError):
        MarginLossConfig("aaml", lr_scale=0.0)


def test_warmup_log_has_both_phases_in_order():
    world = make_identity_world(3)
    data = world.sample_identities(4, 12, Rng(3, "four"))
    m = build_model("conv_a", 4, SHAPE, Rng(3, "init"))
    cfg = TrainConfig(epochs=2, batch_size=16, lr=0.05, milestones=(), flip=False, seed=3)
    _, log = train_face_classifier(m, data, MarginLossConfig("aaml", warmup_epochs=3, lr_scale=0.1), cfg)
    assert [(r["phase"], r["epoch"]) for r in log.records] == [("warmup", 0), ("warmup", 1), ("warmup", 2), ("margin", 3), ("margin", 4)]


def test_aaml_victim_recipe_does_not_collapse():
    # conv_b's ReLU'd embedding collapses to one direction when AAML starts from scratch
    setup = FaceSetup()
    spec = {s.name: s for s in setup.victim_specs()}["conv_b_aaml"]
    data = setup.build_datasets()
    train, protocol = data[spec.data], data["protocol"]
    m = build_model(spec.arch, train.num_classes, train.shape, Rng(spec.seed, f"init/{spec.arch}"))
    cfg = TrainConfig(**{**setup.train, "seed": spec.seed})
    _, log = train_face_classifier(m, train, MarginLossConfig(spec.margin, **dict(spec.margin_opts)), cfg)
    tau = calibrate_threshold(m, protocol)
    assert log.records[-1]["train_acc"] > 0.2
    assert tau < 0.9
    assert verification_accuracy(m, protocol, tau) >= 0.8


@pytest.mark.parametrize("kind", ["plain_softmax", "am_softmax", "aaml"])
def test_training_decreases_loss_and_is_deterministic(kind):
    world = make_identity_world(3)
    data = world.sample_identities(4, 24, Rng(3, "four"))
    cfg = MarginLossConfig(kind)
    params, final = [], []
    for _ in range(2):
        m = build_model("conv_b", 4, SHAPE, Rng(3, "init"))
        with torch.no_grad():
            before = float(margin_loss(m.eval(), data.images, data._labels, cfg))
        train_face_classifier(m, data, cfg, TrainConfig(epochs=10, batch_size=16, lr=0.05, milestones=(8,), flip=False, seed=3))
        with torch.no_grad():
            final.append(float(margin_loss(m.eval(), data.images, data._labels, cfg)))
        params.append(torch.cat([p.detach().view(-1) for p in m.parameters()]))
    assert final[0] < before
    assert torch.equal(params[0], params[1])


def test_training_needs_two_identities():
    world = make_identity_world(0)
    one = world.sample_identities(1, 4, Rng(0))
    with pytest.raises(ValueError):
        train_face_classifier(build_model("mlp", 1, SHAPE, Rng(0)), one, MarginLossConfig(), TrainConfig(epochs=1))


# attacks


def _pairs(faces, same):
    _, data, protocol = faces
    rows = protocol.evaluation[protocol.evaluation[:, 2] == int(same)]
    return data.images[rows[:, 0]], data.images[rows[:, 1]]


def _surrogate_sim(model, x, ref):
    return cosine_sim(embed(model, x.float()), embed(model, ref)).numpy()


def test_zero_budget_leaves_similarity_unchanged(faces, trained):
    x, ref = _pairs(faces, True)
    cfg = AttackConfig(**{**FACE_DEFAULTS, "epsilon": 0.0})
    for fn in (dodging_attack, impersonate_attack):
        adv = fn(trained, x, ref, cfg, Rng(0)).adversarial
        assert torch.equal(adv.float(), x)


def test_white_box_dodging_and_impersonation_move_similarity(faces, trained):
    x, ref = _pairs(faces, True)
    dodge = dodging_attack(trained, x, ref, rng=Rng(0)).adversarial
    assert np.mean(_surrogate_sim(trained, dodge, ref) <= _surrogate_sim(trained, x, ref)) >= 0.95
    assert float((dodge - x.double()).abs().max()) <= 8 / 255 + 1e-9
    x, ref = _pairs(faces, False)
    imp = impersonate_attack(trained, x, ref, rng=Rng(0)).adversarial
    assert np.mean(_surrogate_sim(trained, imp, ref) >= _surrogate_sim(trained, x, ref)) >= 0.95


def test_single_small_step_moves_similarity_the_right_way(faces, trained):
    x, ref = _pairs(faces, True)
    cfg = AttackConfig(epsilon=1e-4, beta=1e-4, steps=1, p_t=0.0)
    before = _surrogate_sim(trained, x, ref)
    assert (_surrogate_sim(trained, dodging_attack(trained, x, ref, cfg).adversarial, ref) <= before + 1e-9).all()
    x, ref = _pairs(faces, False)
    before = _surrogate_sim(trained, x, ref)
    assert (_surrogate_sim(trained, impersonate_attack(trained, x, ref, cfg).adversarial, ref) >= before - 1e-9).all()


def test_face_attack_deterministic(faces, trained):
    x, ref = _pairs(faces, False)
    a = impersonate_attack(trained, x, ref, rng=Rng(5)).adversarial
    assert torch.equal(a, impersonate_attack(trained, x, ref, rng=Rng(5)).adversarial)


def test_oracle_success_semantics(faces, trained):
    _, _, protocol = faces
    x, ref = _pairs(faces, True)
    always = VerificationOracle(trained, -2.0)
    never = VerificationOracle(trained, 2.0)
    assert attack_success(always, x, ref, "impersonate").all()
    assert attack_success(never, x, ref, "dodging").all()
    assert not hasattr(always, "__dict__")


def test_face_transfer_self_victim_matches_whitebox(faces, trained):
    _, _, protocol = faces
    cfg = AttackConfig(**{**FACE_DEFAULTS, "steps": 3})
    success, adversarial = face_transfer(trained, {"self": trained}, protocol, cfg, Rng(2))
    for kind in ("dodging", "impersonate"):
        assert success[kind]["self"] == success[kind]["whitebox"]
        sel, adv = adversarial[kind]
        assert success[kind]["samples"] == len(sel) == len(adv)
        assert (sel[:, 2] == (1 if kind == "dodging" else 0)).all()
    with pytest.raises(ValueError, match="kind"):
        face_transfer(trained, {}, protocol, cfg, kinds=("spoof",))


# protocol


def test_toy_identity_protocol(faces):
    _, data, protocol = faces
    y = data._labels.numpy()
    for which in ("calibration", "evaluation"):
        rows = getattr(protocol, which)
        same = rows[:, 2] == 1
        assert (y[rows[same, 0]] == y[rows[same, 1]]).all()
        assert (y[rows[~same, 0]] != y[rows[~same, 1]]).all()
        assert (rows[same, 0] != rows[same, 1]).all()
    assert protocol.identities("calibration").isdisjoint(protocol.identities("evaluation"))
    assert len(protocol.identities("calibration") | protocol.identities("evaluation")) == 8


def test_toy_identity_dataset_deterministic_and_validated():
    world = make_identity_world(0)
    a = build_toy_identity_dataset(6, 3, Rng(2), world=world, pairs_per_kind=5)
    b = build_toy_identity_dataset(6, 3, Rng(2), world=world, pairs_per_kind=5)
    assert torch.equal(a[0].images, b[0].images) and np.array_equal(a[1].evaluation, b[1].evaluation)
    with pytest.raises(ValueError):
        build_toy_identity_dataset(6, 1, Rng(0), world=world)
    with pytest.raises(ValueError):
        build_toy_identity_dataset(1, 4, Rng(0), world=world)


def test_pair_file_round_trip(faces, tmp_path):
    _, data, protocol = faces
    path = write_pairs(tmp_path / "pairs.txt", protocol)
    assert np.array_equal(read_pairs(path, data), protocol.evaluation)
    first = path.read_text().splitlines()[0].split(",")
    assert len(first) == 3 and first[2] in ("0", "1")


def test_pair_file_errors(faces, tmp_path):
    _, data, _ = faces
    (tmp_path / "bad.txt").write_text("a,b\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        read_pairs(tmp_path / "bad.txt", data)
    (tmp_path / "unk.txt").write_text("nope,nada,1\n")
    with pytest.raises(ValueError, match="unknown sample id"):
        read_pairs(tmp_path / "unk.txt", data)
