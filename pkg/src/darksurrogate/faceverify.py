"""
Face verification on top of the classifier zoo.

A verifier embeds both images with a classifier's penultimate layer and
accepts the pair as the same identity when the cosine similarity reaches a
threshold calibrated at the equal error rate. Surrogates are attacked in
embedding space: dodging pushes a same-identity pair apart, impersonation
pulls a different-identity pair together.
"""

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackConfig, mdi2_fgsm, mi_fgsm
from .core.data import Dataset
from .core.rng import Rng
from .training import TrainLog, fit, train_normal

MARGIN_KINDS = ("plain_softmax", "am_softmax", "aaml")
MARGIN_DEFAULTS = {"plain_softmax": (1.0, 0.0), "am_softmax": (30.0, 0.35), "aaml": (30.0, 0.5)}


@dataclass
class MarginLossConfig:
    kind: str = "plain_softmax"
    scale: float = None
    margin: float = None
    # plain softmax epochs before the margin phase, and the margin phase's lr multiplier
    warmup_epochs: int = 0
    lr_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in MARGIN_KINDS:
            raise ValueError(f"unknown margin loss {self.kind!r}; expected one of {MARGIN_KINDS}")
        s, m = MARGIN_DEFAULTS[self.kind]
        self.scale = s if self.scale is None else float(self.scale)
        self.margin = m if self.margin is None else float(self.margin)
        if not self.scale > 0 or self.margin < 0:
            raise ValueError("margin losses need scale > 0 and margin >= 0")
        self.warmup_epochs = int(self.warmup_epochs)
        if self.warmup_epochs < 0 or not self.lr_scale > 0:
            raise ValueError("warm-up epochs must be non-negative and lr_scale positive")


@dataclass
class PairProtocol:
    """Verification pairs over ``dataset``; each row is ``(index1, index2, same)``.

    Calibration and evaluation pairs are drawn from disjoint identities.
    """

    dataset: Dataset
    calibration: np.ndarray
    evaluation: np.ndarray

    def identities(self, which):
        rows = getattr(self, which)
        y = self.dataset._labels.numpy()
        return set(y[rows[:, 0]]) | set(y[rows[:, 1]])


@torch.no_grad()
def embed(model, x):
    """Penultimate-layer activations, unnormalized."""
    if not hasattr(model, "features"):
        raise TypeError(f"{type(model).__name__} declares no penultimate layer")
    was_training = model.training
    model.eval()
    try:
        return model.features(x.to(next(model.parameters()).dtype))
    finally:
        model.train(was_training)


def cosine_sim(a, b):
    """Row-wise cosine similarity; a zero vector yields 0 (with a warning)."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    zero = (na == 0) | (nb == 0)
    if zero.any():
        warnings.warn("cosine similarity with a zero vector is defined as 0", RuntimeWarning, stacklevel=2)
    sim = (a * b).sum(-1) / torch.where(zero, torch.ones_like(na), na * nb)
    return torch.where(zero, torch.zeros_like(sim), sim).clamp(-1.0, 1.0)


def eer_threshold(similarities, same):
    """Threshold at the equal error rate and the EER itself.

    Candidates are the midpoints between consecutive distinct scores plus
    one point below and above the range. A pair is accepted when its score
    is ``>= tau``. Among candidates with minimal ``|FAR - FRR|`` the lowest
    threshold wins; the EER is reported as ``(FAR + FRR) / 2`` there.
    """
    s = np.asarray(similarities, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if same.all() or not same.any():
        raise ValueError("calibration needs both same-identity and different-identity pairs")
    u = np.unique(s)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    accept = s[None, :] >= cands[:, None]
    far = (accept & ~same).sum(1) / (~same).sum()
    frr = (~accept & same).sum(1) / same.sum()
    gap = np.abs(far - frr)
    best = int(np.flatnonzero(gap == gap.min())[0])
    return float(cands[best]), float((far[best] + frr[best]) / 2)


def pair_similarities(model, images, pairs):
    e = embed(model, images)
    return cosine_sim(e[pairs[:, 0]], e[pairs[:, 1]]).numpy()


def calibrate_threshold(model, protocol):
    """EER threshold of ``model`` on the calibration pairs."""
    pairs = protocol.calibration
    tau, _ = eer_threshold(pair_similarities(model, protocol.dataset.images, pairs), pairs[:, 2])
    return tau


def verification_accuracy(model, protocol, tau, which="evaluation"):
    pairs = getattr(protocol, which)
    sims = pair_similarities(model, protocol.dataset.images, pairs)
    return float(((sims >= tau) == pairs[:, 2].astype(bool)).mean())


class VerificationOracle:
    """Black-box verifier: answers only same/different for an image pair."""

    __slots__ = ("_verify",)

    def __init__(self, model, tau):
        def verify(x1, x2):
            with torch.no_grad():
                return torch.from_numpy(cosine_sim(embed(model, x1), embed(model, x2)).numpy() >= tau)

        self._verify = verify

    def verify(self, x1, x2):
        return self._verify(x1, x2)


def margin_logits(features, weight, labels, cfg):
    """Scaled cosine logits with an additive (AM-Softmax) or angular (AAML) margin on the true class.

    For AAML, when ``theta_y + m`` would pass pi the target logit falls back
    to ``cos(theta_y) - m * sin(m)`` to keep it monotonic in ``theta_y``.
    """
    cos = F.linear(F.normalize(features, dim=1), F.normalize(weight, dim=1))
    hot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
    m = cfg.margin
    if cfg.kind == "am_softmax":
        target = cos - m
    elif cfg.kind == "aaml":
        # floored so the sqrt gradient stays finite at |cos| = 1
        sine = torch.sqrt((1.0 - cos * cos).clamp_min(1e-12))
        phi = cos * math.cos(m) - sine * math.sin(m)
        target = torch.where(cos > math.cos(math.pi - m), phi, cos - m * math.sin(m))
    else:
        raise ValueError("plain_softmax uses the model's own logits")
    return cfg.scale * (hot * target + (1 - hot) * cos)


def margin_loss(model, x, labels, cfg):
    """Batch-mean training loss of a face classifier under ``cfg``."""
    if cfg.kind == "plain_softmax":
        return F.cross_entropy(model(x), labels)
    return F.cross_entropy(margin_logits(model.features(x), model.head.weight, labels, cfg), labels)


def train_face_classifier(model, dataset, margin_cfg, train_cfg, rng=None, eval_set=None):
    """Train an identity classifier with plain softmax, AM-Softmax or AAML.

    With ``margin_cfg.warmup_epochs`` the model first trains that many epochs
    with plain softmax at ``train_cfg.lr``, then ``train_cfg.epochs`` with the
    margin loss at ``lr * lr_scale``. Networks whose embedding starts out
    nearly constant (a ReLU'd linear layer) otherwise collapse under a
    scaled cosine loss. The returned log holds both phases, tagged by ``phase``.
    """
    if dataset.num_classes < 2:
        raise ValueError("face classifier training needs at least two identities")
    if margin_cfg.kind == "plain_softmax":
        return train_normal(model, dataset, train_cfg, rng=rng, eval_set=eval_set)
    if train_cfg.mix_strategy != "none":
        raise ValueError("margin losses are trained without mixing augmentation")
    labels = dataset.labels

    def batch_loss(m, mix, idx, _rng):
        y = labels[idx]
        logits = margin_logits(m.features(mix.mixed), m.head.weight, y, margin_cfg)
        return F.cross_entropy(logits, y), logits.argmax(1) == y

    if not margin_cfg.warmup_epochs:
        return fit(model, dataset, replace(train_cfg, lr=train_cfg.lr * margin_cfg.lr_scale), batch_loss, rng=rng)
    warm_cfg = replace(train_cfg, epochs=margin_cfg.warmup_epochs, milestones=())
    _, warm = train_normal(model, dataset, warm_cfg, rng=rng.child("warmup") if rng else Rng(train_cfg.seed, "train/warmup"))
    _, main = fit(model, dataset, replace(train_cfg, lr=train_cfg.lr * margin_cfg.lr_scale), batch_loss, rng=rng)
    log = TrainLog()
    for rec in warm.records:
        log.append(**rec, phase="warmup")
    for rec in main.records:
        log.append(**{**rec, "epoch": rec["epoch"] + warm_cfg.epochs}, phase="margin")
    return model, log


FACE_DEFAULTS = {"epsilon": 8 / 255, "beta": 2 / 255, "mu": 1.0, "steps": 20, "p_t": 0.7}


def _face_attack(objective, surrogate, x, x_ref, cfg, rng):
    cfg = AttackConfig(**{**(cfg or AttackConfig(**FACE_DEFAULTS)).to_dict(), "objective": objective})
    if cfg.diversity and cfg.p_t > 0:
        return mdi2_fgsm(surrogate, x, x_ref, cfg, rng or Rng(0, "face-attack"))
    return mi_fgsm(surrogate, x, x_ref, cfg)


def dodging_attack(surrogate, x, x_ref, cfg=None, rng=None):
    """Minimize embedding cosine similarity to ``x_ref`` (same identity)."""
    return _face_attack("embedding_dodge", surrogate, x, x_ref, cfg, rng)


def impersonate_attack(surrogate, x, x_ref, cfg=None, rng=None):
    """Maximize embedding cosine similarity to ``x_ref`` (different identity)."""
    return _face_attack("embedding_impersonate", surrogate, x, x_ref, cfg, rng)


def attack_success(oracle, x_adv, x_ref, kind):
    """Dodging succeeds when the verifier rejects the pair, impersonation when it accepts."""
    accepted = oracle.verify(x_adv.float(), x_ref.float())
    return ~accepted if kind == "dodging" else accepted


FACE_KINDS = ("dodging", "impersonate")


def face_transfer(surrogate, victims, protocol, cfg=None, rng=None, kinds=FACE_KINDS, pairs=None):
    """Attack evaluation pairs with ``surrogate`` and judge them with every verifier.

    Dodging uses the same-identity pairs, impersonation the different-identity
    pairs. Each judge (the surrogate itself under ``"whitebox"``, then every
    victim model) uses its own EER threshold from the calibration pairs.
    Returns ``(success, adversarial)``: per kind a judge -> rate mapping plus
    ``"samples"``, and per kind the adversarial batch.
    """
    rng = rng or Rng(0, "face-attack")
    rows = protocol.evaluation if pairs is None else pairs
    images = protocol.dataset.images
    judges = {"whitebox": VerificationOracle(surrogate, calibrate_threshold(surrogate, protocol))}
    judges.update({k: VerificationOracle(m, calibrate_threshold(m, protocol)) for k, m in victims.items()})
    success, adversarial = {}, {}
    for kind in kinds:
        if kind not in FACE_KINDS:
            raise ValueError(f"unknown face attack kind {kind!r}")
        sel = rows[rows[:, 2] == (1 if kind == "dodging" else 0)]
        x, x_ref = images[sel[:, 0]], images[sel[:, 1]]
        fn = dodging_attack if kind == "dodging" else impersonate_attack
        adv = fn(surrogate, x, x_ref, cfg, rng.child(kind)).adversarial.to(torch.float32)
        success[kind] = {name: float(attack_success(j, adv, x_ref, kind).double().mean()) for name, j in judges.items()}
        success[kind]["samples"] = len(sel)
        adversarial[kind] = (sel, adv)
    return success, adversarial


def _sample_pairs(labels, idx_pool, n_pairs, rng):
    by_id = {}
    for i in idx_pool:
        by_id.setdefault(int(labels[i]), []).append(int(i))
    ids = sorted(by_id)
    same, diff = [], []
    while len(same) < n_pairs:
        members = by_id[ids[int(rng.integers(len(ids)))]]
        a, b = rng.permutation(len(members))[:2]
        same.append((members[a], members[b], 1))
    while len(diff) < n_pairs:
        i, j = rng.permutation(len(ids))[:2]
        a = by_id[ids[i]][int(rng.integers(len(by_id[ids[i]])))]
        b = by_id[ids[j]][int(rng.integers(len(by_id[ids[j]])))]
        diff.append((a, b, 0))
    return np.asarray(same + diff, dtype=np.int64)


def build_toy_identity_dataset(n_ids, per_id, rng, world=None, pairs_per_kind=200):
    """Images of ``n_ids`` random identities and a verification protocol over them.

    Identities are split in half: the first half supplies calibration pairs,
    the second evaluation pairs. Each split gets ``pairs_per_kind`` same and
    different pairs.
    """
    from .toydata import make_identity_world

    if n_ids < 4:
        raise ValueError("need at least 4 identities (two per protocol split)")
    if per_id < 2:
        raise ValueError("need at least 2 samples per identity to form same pairs")
    world = world or make_identity_world(0)
    data = world.sample_identities(n_ids, per_id, rng.child("images"), split="test")
    labels = data._labels.numpy()
    order = rng.child("split").permutation(n_ids)
    cal_ids = set(order[: n_ids // 2].tolist())
    cal_pool = [i for i in range(len(labels)) if labels[i] in cal_ids]
    eval_pool = [i for i in range(len(labels)) if labels[i] not in cal_ids]
    cal = _sample_pairs(labels, cal_pool, pairs_per_kind, rng.child("cal-pairs"))
    ev = _sample_pairs(labels, eval_pool, pairs_per_kind, rng.child("eval-pairs"))
    return data, PairProtocol(data, cal, ev)


def write_pairs(path, protocol, which="evaluation"):
    """Pair file: one ``id1_sample,id2_sample,same_flag`` line per pair."""
    ids = protocol.dataset.ids
    rows = getattr(protocol, which)
    with open(path, "w") as fh:
        for a, b, s in rows:
            fh.write(f"{ids[a]},{ids[b]},{int(s)}\n")
    return Path(path)


def read_pairs(path, dataset):
    index = {sid: i for i, sid in enumerate(dataset.ids)}
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 'id1_sample,id2_sample,same_flag'")
            try:
                rows.append((index[parts[0]], index[parts[1]], int(parts[2])))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown sample id {exc.args[0]!r}") from None
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def write_similarity_csv(path, ids1, ids2, same, clean, adversarial=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id1", "id2", "same", "similarity"] + (["adv_similarity"] if adversarial is not None else []))
        for i in range(len(ids1)):
            row = [ids1[i], ids2[i], int(same[i]), f"{float(clean[i]):.8f}"]
            if adversarial is not None:
                row.append(f"{float(adversarial[i]):.8f}")
            w.writerow(row)
    return Path(path)
