"""
Transfer matrix runner and the CutMix alpha sweep.

Adversarial batches are crafted once per (surrogate, attack, seed) and then
shown to every victim oracle; the surrogate's own prediction on the same
batch is recorded as the white-box cell.
"""

import numpy as np
import torch

from ..attacks import attack
from ..core.models import build_model
from ..core.rng import Rng
from ..training import TrainConfig, train_dsm
from .oracle import VictimOracle, derive_targets, targeted_success, untargeted_success
from .report import WHITEBOX, Cell, TransferReport
from .zoo import STUDENT_OFFSET


def _members(surrogate):
    return list(surrogate) if isinstance(surrogate, (list, tuple)) else [surrogate]


def _whitebox_oracle(members, name):
    """Argmax of the fused logits, the white-box view of an ensemble."""
    if len(members) == 1:
        return VictimOracle(members[0], name)

    class _Mean(torch.nn.Module):
        def __init__(self, ms):
            super().__init__()
            self.ms = torch.nn.ModuleList(ms)
            self.num_classes = ms[0].num_classes

        def forward(self, x):
            return torch.stack([m(x) for m in self.ms]).mean(0)

    return VictimOracle(_Mean(members), name)


def run_matrix(surrogates, victims, dataset, attacks, seeds, targets=None, whitebox=True):
    """Evaluate every surrogate x attack x seed against every victim.

    ``surrogates``: name -> model or list of models (an ensemble).
    ``victims``: name -> :class:`VictimOracle`.
    ``attacks``: name -> ``(optimizer, AttackConfig)``.
    ``targets``: target labels for targeted objectives; derived from the
    seed when omitted.
    """
    if not surrogates or not victims or not attacks or not seeds:
        raise ValueError("empty evaluation grid")
    k = dataset.num_classes
    for name, s in surrogates.items():
        for m in _members(s):
            if m.num_classes != k:
                raise ValueError(f"surrogate {name!r} has {m.num_classes} classes, dataset has {k}")
    for name, v in victims.items():
        if v.num_classes != k:
            raise ValueError(f"victim {name!r} has {v.num_classes} classes, dataset has {k}")

    x = dataset.images
    y = dataset.labels
    n = len(y)
    report = TransferReport(
        clean_accuracy={name: float((v.predict(x) == y).double().mean()) for name, v in victims.items()},
        config={
            "attacks": {a: {"optimizer": o, **cfg.to_dict()} for a, (o, cfg) in attacks.items()},
            "seeds": list(seeds),
            "surrogates": sorted(surrogates),
            "victims": sorted(victims),
            "samples": n,
        },
    )
    # cells are emitted in sorted name order so the report does not depend on mapping order
    for sname in sorted(surrogates):
        members = _members(surrogates[sname])
        judges = {v: victims[v] for v in sorted(victims)}
        if whitebox:
            judges[WHITEBOX] = _whitebox_oracle(members, sname)
        for aname in sorted(attacks):
            optimizer, cfg = attacks[aname]
            steps = 1 if optimizer == "fgsm" else cfg.steps
            for seed in seeds:
                rng = Rng(seed, f"attack/{sname}/{aname}")
                if cfg.targeted:
                    label = targets if targets is not None else derive_targets(y, k, Rng(seed, "targets"))
                else:
                    label = y
                surrogate_arg = members if len(members) > 1 else members[0]
                adv = attack(optimizer, surrogate_arg, x, label, cfg, rng.child("craft")).adversarial.to(x.dtype)
                for vname, judge in judges.items():
                    hit = targeted_success(judge, adv, label) if cfg.targeted else untargeted_success(judge, adv, y)
                    report.add(Cell(sname, vname, aname, cfg.objective, float(cfg.epsilon), steps, seed, int(hit.sum()), n))
    return report


def sweep_alpha(teacher, dataset, alphas, seeds, *, victims, eval_set, attack_cfg, optimizer="mdi2_fgsm",
                student_arch="conv_a", train_cfg=None, baseline=True, train_student=None):
    """Train one CutMix-DSM per alpha and seed, and measure mean transfer success.

    ``teacher`` is a model or a ``seed -> model`` callable. Students use
    seed ``STUDENT_OFFSET + seed`` for initialization and training, the
    same convention as :meth:`Zoo.dsm`; ``train_student(alpha, seed)`` may
    supply the trained student instead (for example from a checkpoint cache).

    Returns a list of ``{"alpha", "seed", "mean_success"}`` points. With
    ``baseline`` a no-mixing DSM point (``alpha=None``) is added per seed.
    """
    if not alphas:
        raise ValueError("alphas must be non-empty")
    teacher_for = (lambda s: teacher) if isinstance(teacher, torch.nn.Module) else teacher
    base_cfg = train_cfg or TrainConfig()
    grid = [(a, s) for s in seeds for a in ([None] if baseline else []) + list(alphas)]
    points = []
    for alpha, seed in grid:
        if train_student is not None:
            student = train_student(alpha, seed)
        else:
            sseed = STUDENT_OFFSET + seed
            cfg_kw = {**base_cfg.to_dict(), "seed": sseed, "label_strategy": "dark"}
            if alpha is None:
                cfg_kw.update(mix_strategy="none")
            else:
                cfg_kw.update(mix_strategy="cutmix", alpha=float(alpha))
            student = build_model(student_arch, dataset.num_classes, dataset.shape, Rng(sseed, f"init/{student_arch}"))
            train_dsm(student, teacher_for(seed), dataset, TrainConfig(**cfg_kw))
        name = f"alpha={alpha}"
        report = run_matrix({name: student}, victims, eval_set, {optimizer: (optimizer, attack_cfg)}, [seed], whitebox=False)
        points.append({"alpha": alpha, "seed": seed, "mean_success": report.mean_transfer(name)})
    return points


def curve_summary(points):
    """Mean success per alpha (``None`` is the no-mixing baseline)."""
    keys = []
    for p in points:
        if p["alpha"] not in keys:
            keys.append(p["alpha"])
    return {a: float(np.mean([p["mean_success"] for p in points if p["alpha"] == a])) for a in keys}


def seeded_matrix(build_surrogates, victims, dataset, attacks, seeds, whitebox=True):
    """``run_matrix`` where the surrogates themselves depend on the seed.

    ``build_surrogates(seed)`` returns the name -> model mapping for that
    seed; the per-seed reports are merged, so a variant's mean transfer
    averages over seeds and victims.
    """
    report = None
    for seed in seeds:
        part = run_matrix(build_surrogates(seed), victims, dataset, attacks, [seed], whitebox=whitebox)
        report = part if report is None else report.merge(part)
    report.config["seeds"] = list(seeds)
    return report
