"""
Desk-scale model zoos for the transfer experiments.

A setup fixes the synthetic world, the dataset sizes and the base training
schedule; every model is then described by a small :class:`ModelSpec`
(architecture, seed, training method, label/mixing strategy, teacher). A
:class:`Zoo` trains models on demand and, when given a cache directory,
stores them as checkpoints keyed by a hash of setup and spec, so repeated
experiments reuse the same networks.

Seed conventions keep victims and surrogates disjoint: victims use seeds
from 101 upwards, surrogates the experiment seeds (1, 2, 3, ...) and DSM
students ``STUDENT_OFFSET + seed``.
"""

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..core.checkpoint import load_checkpoint, save_checkpoint
from ..core.models import build_model
from ..core.rng import Rng
from ..toydata import make_class_world, make_identity_world
from ..training import TrainConfig, train_dsm, train_normal, train_slightly_robust
from .oracle import VictimOracle

STUDENT_OFFSET = 1000


@dataclass(frozen=True)
class ModelSpec:
    name: str
    arch: str
    seed: int
    data: str = "train"
    method: str = "normal"  # normal | dsm | robust | margin
    train: tuple = ()  # TrainConfig overrides as sorted (key, value) pairs
    teacher: "ModelSpec" = None
    eps_r: float = 0.0
    margin: str = "plain_softmax"
    margin_opts: tuple = ()  # MarginLossConfig overrides as sorted (key, value) pairs

    def overrides(self):
        return dict(self.train)

    def to_dict(self):
        d = asdict(self)
        d["train"] = [list(kv) for kv in self.train]
        d["teacher"] = self.teacher.to_dict() if self.teacher else None
        return d


def _freeze(d):
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in d.items()))


def _digest(obj):
    return hashlib.blake2b(json.dumps(obj, sort_keys=True).encode(), digest_size=10).hexdigest()


@dataclass
class DeskSetup:
    """Synthetic image classification world and sizes for the desk experiments."""

    world: dict = field(default_factory=lambda: {"super_scale": 1.0, "class_scale": 0.4, "spread": 0.6})
    world_seed: int = 0
    data_seed: int = 1
    n_train: int = 4000
    n_victim_train: int = 4000
    n_eval: int = 500
    train: dict = field(default_factory=lambda: {"epochs": 24, "milestones": [12, 20], "batch_size": 64, "lr": 0.05, "flip": False})
    robust_eps: float = 4 / 255
    surrogate_arch: str = "conv_a"

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        return _digest(self.to_dict())

    def victim_specs(self):
        """Three architectures, normal and slightly robust training, seeds disjoint from surrogates."""
        return [
            ModelSpec("conv_a", "conv_a", 101, data="victim_train"),
            ModelSpec("conv_b", "conv_b", 102, data="victim_train"),
            ModelSpec("mlp", "mlp", 103, data="victim_train"),
            ModelSpec("conv_b_robust", "conv_b", 104, data="victim_train", method="robust", eps_r=self.robust_eps),
        ]

    def build_datasets(self):
        world = make_class_world(self.world_seed, **self.world)
        r = Rng(self.data_seed, "desk/data")
        return {
            "train": world.sample(self.n_train, r.child("train"), prefix="tr"),
            "victim_train": world.sample(self.n_victim_train, r.child("vtrain"), prefix="vt"),
            "eval": world.sample(self.n_eval, r.child("eval"), split="test", prefix="ev"),
        }


@dataclass
class FaceSetup:
    """Synthetic identities: surrogate and victim training sets over disjoint identities plus an evaluation protocol."""

    world: dict = field(default_factory=lambda: {"gain": 0.3, "spread": 0.3})
    world_seed: int = 0
    data_seed: int = 1
    n_ids: int = 40
    per_id: int = 40
    eval_ids: int = 40
    eval_per_id: int = 8
    pairs_per_kind: int = 150
    train: dict = field(default_factory=lambda: {"epochs": 12, "milestones": [6, 10], "batch_size": 64, "lr": 0.05, "flip": False})
    surrogate_arch: str = "conv_a"

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        return _digest(self.to_dict())

    def victim_specs(self):
        return [
            ModelSpec("conv_a_am", "conv_a", 101, data="victim_train", method="margin", margin="am_softmax"),
            ModelSpec("conv_b_aaml", "conv_b", 102, data="victim_train", method="margin", margin="aaml",
                      margin_opts=_freeze({"warmup_epochs": 8, "lr_scale": 0.1})),
            ModelSpec("conv_b_softmax", "conv_b", 103, data="victim_train", method="margin"),
        ]

    def build_datasets(self):
        from ..faceverify import build_toy_identity_dataset

        world = make_identity_world(self.world_seed, **self.world)
        r = Rng(self.data_seed, "face/data")
        data, protocol = build_toy_identity_dataset(
            self.eval_ids, self.eval_per_id, r.child("eval"), world=world, pairs_per_kind=self.pairs_per_kind
        )
        return {
            "train": world.sample_identities(self.n_ids, self.per_id, r.child("train")),
            "victim_train": world.sample_identities(self.n_ids, self.per_id, r.child("vtrain")),
            "eval": data,
            "protocol": protocol,
        }


class Zoo:
    """Trains (or loads from the checkpoint cache) the models of one setup."""

    def __init__(self, setup, cache_dir=None, verbose=False):
        self.setup = setup
        self.cache_dir = Path(cache_dir) / setup.fingerprint() if cache_dir else None
        self.verbose = verbose
        self._data = None
        self._models = {}
        # training wall time per model key, and every key requested (teachers included)
        self.train_seconds = {}
        self.used = set()

    @property
    def data(self):
        if self._data is None:
            self._data = self.setup.build_datasets()
        return self._data

    # spec constructors
    def normal(self, seed, arch=None, **train):
        arch = arch or self.setup.surrogate_arch
        return ModelSpec(f"normal_{arch}_s{seed}", arch, seed, train=_freeze(train))

    def dsm(self, seed, label_strategy="dark", mix_strategy="none", alpha=1.0, arch=None, teacher=None):
        arch = arch or self.setup.surrogate_arch
        teacher = teacher or self.normal(seed, arch)
        train = {"label_strategy": label_strategy, "mix_strategy": mix_strategy}
        if mix_strategy != "none":
            train["alpha"] = float(alpha)
        name = f"{label_strategy}_{mix_strategy}" + (f"_a{alpha:g}" if mix_strategy != "none" else "") + f"_{arch}_s{seed}"
        return ModelSpec(name, arch, STUDENT_OFFSET + seed, method="dsm", train=_freeze(train), teacher=teacher)

    def key(self, spec):
        return _digest({"setup": self.setup.fingerprint(), "spec": spec.to_dict()})

    def model(self, spec):
        key = self.key(spec)
        self.used.add(key)
        if spec.teacher is not None:
            self.model(spec.teacher)
        if key in self._models:
            return self._models[key]
        path = self.cache_dir / f"{spec.name}-{key}.ckpt" if self.cache_dir else None
        if path is not None and path.exists():
            model = load_checkpoint(path)
        else:
            start = time.perf_counter()
            model = self._train(spec)
            self.train_seconds[key] = time.perf_counter() - start
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, path)
        model.eval()
        self._models[key] = model
        return model

    def _train(self, spec):
        from ..faceverify import MarginLossConfig, train_face_classifier

        data = self.data[spec.data]
        if self.verbose:
            print(f"training {spec.name}", flush=True)
        model = build_model(spec.arch, data.num_classes, data.shape, Rng(spec.seed, f"init/{spec.arch}"))
        cfg = TrainConfig(**{**self.setup.train, **spec.overrides(), "seed": spec.seed})
        if spec.method == "normal":
            train_normal(model, data, cfg)
        elif spec.method == "dsm":
            train_dsm(model, self.model(spec.teacher), data, cfg)
        elif spec.method == "robust":
            train_slightly_robust(model, data, cfg, spec.eps_r)
        elif spec.method == "margin":
            train_face_classifier(model, data, MarginLossConfig(spec.margin, **dict(spec.margin_opts)), cfg)
        else:
            raise ValueError(f"unknown training method {spec.method!r}")
        return model

    def victims(self):
        return {s.name: VictimOracle(self.model(s), s.name) for s in self.setup.victim_specs()}

    def victim_models(self):
        return {s.name: self.model(s) for s in self.setup.victim_specs()}
