"""
Command-line entry points.

Every command reads one JSON run config (``--config``), applies the
command-line overrides, validates the result, loads all inputs and only
then starts work and writes artifacts under the output directory. Each run
ends by writing ``manifest.json`` with the resolved config and a SHA-256 of
every artifact; passing that manifest back as ``--config`` repeats the run.

Output directory precedence: ``--out``, then ``$DARKSURROGATE_OUT``, then
the config's ``out`` key, then ``runs/<command>``.
"""

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import MANIFEST_VERSION, ConfigError, attack_config, load, resolve, train_config
from .core.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core.data import DataFormatError, load_dataset, write_idx, write_idx_images
from .core.models import build_model
from .core.rng import Rng

COMMANDS = ("train", "distill", "attack", "eval", "sweep-alpha", "face-train", "face-attack", "report")


class InputError(RuntimeError):
    pass


# input resolution


def _dataset(block, default_split="train"):
    from .evalharness import DeskSetup, FaceSetup

    if "toy" in block:
        fields = dict(block["toy"])
        split = fields.pop("split", default_split)
        return DeskSetup(**{**DeskSetup().to_dict(), **fields}).build_datasets()[split], None
    if "face_toy" in block:
        fields = dict(block["face_toy"])
        split = fields.pop("split", default_split)
        data = FaceSetup(**{**FaceSetup().to_dict(), **fields}).build_datasets()
        return data[split], data["protocol"] if split == "eval" else None
    for key in ("path", "labels_path"):
        if key in block and not Path(block[key]).exists():
            raise InputError(f"data.{key}: no such file {block[key]}")
    shape = tuple(block["shape"]) if "shape" in block else None
    ds = load_dataset(block["path"], block["format"], num_classes=block["num_classes"], labels_path=block.get("labels_path"),
                      shape=shape, split=block.get("split", default_split))
    return ds, None


def _require(doc, *keys):
    for key in keys:
        if key not in doc:
            raise ConfigError(key, "required for this command")


def _load_model(path, field, num_classes=None):
    if not Path(path).exists():
        raise InputError(f"{field}: no such checkpoint {path}")
    return load_checkpoint(path, num_classes=num_classes)


def _load_group(group, field, num_classes=None):
    out = {}
    for name, paths in group.items():
        paths = [paths] if isinstance(paths, str) else paths
        models = [_load_model(p, f"{field}.{name}", num_classes) for p in paths]
        out[name] = models if len(models) > 1 else models[0]
    return out


def _cap(ds, doc):
    n = doc.get("max_samples")
    return ds.subset(np.arange(min(n, len(ds)))) if n else ds


# artifacts


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out, command, doc, artifacts):
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "package_version": __version__,
        "seed": doc["seed"],
        "config": doc,
        "artifacts": {Path(a).name: _sha256(a) for a in sorted(artifacts, key=lambda p: Path(p).name)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return Path(path)


def _write_log(out, log):
    path = out / "train_log.jsonl"
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log.deterministic()))
    # wall-clock timings are kept out of the hashed artifacts
    (out / "timings.json").write_text(json.dumps([r["wall_time"] for r in log.records]) + "\n")
    return path


# commands: each validates and loads its inputs, then returns a closure that does the work


def cmd_train(doc, out):
    from .training import train_normal, train_slightly_robust

    _require(doc, "data", "model")
    data, _ = _dataset(doc["data"])
    cfg, robust, _ = train_config(doc.get("train"), doc["seed"])
    arch = doc["model"].get("arch")
    if arch is None:
        raise ConfigError("model.arch", "required for this command")

    def run():
        model = build_model(arch, data.num_classes, data.shape, Rng(doc["seed"], f"init/{arch}"))
        if robust:
            _, log = train_slightly_robust(model, data, cfg, robust)
        else:
            _, log = train_normal(model, data, cfg)
        return [save_checkpoint(model, out / "model.ckpt"), _write_log(out, log)]

    return run


def cmd_distill(doc, out):
    from .training import train_dsm

    _require(doc, "data", "model", "teacher")
    data, _ = _dataset(doc["data"])
    if "checkpoint" not in doc["teacher"]:
        raise ConfigError("teacher.checkpoint", "required for this command")
    teacher = _load_model(doc["teacher"]["checkpoint"], "teacher.checkpoint", data.num_classes)
    block = {"label_strategy": "dark", **doc.get("train", {})}
    cfg, _, _ = train_config(block, doc["seed"])
    arch = doc["model"].get("arch", "conv_a")

    def run():
        model = build_model(arch, data.num_classes, data.shape, Rng(doc["seed"], f"init/{arch}"))
        _, log = train_dsm(model, teacher, data, cfg)
        return [save_checkpoint(model, out / "model.ckpt"), _write_log(out, log)]

    return run


def _surrogates(doc, num_classes):
    if "surrogates" in doc:
        return _load_group(doc["surrogates"], "surrogates", num_classes)
    if "model" in doc and "checkpoint" in doc["model"]:
        return {"surrogate": _load_model(doc["model"]["checkpoint"], "model.checkpoint", num_classes)}
    raise ConfigError("surrogates", "required for this command")


def cmd_attack(doc, out):
    from .attacks import attack
    from .evalharness import derive_targets, targeted_success, untargeted_success
    from .evalharness.matrix import _whitebox_oracle

    _require(doc, "data")
    data, _ = _dataset(doc["data"], "eval")
    data = _cap(data, doc)
    surrogates = _surrogates(doc, data.num_classes)
    if len(surrogates) != 1:
        raise ConfigError("surrogates", "attack crafts against exactly one surrogate (use a list for an ensemble)")
    optimizer, cfg = attack_config(doc.get("attack"))
    (name, surrogate), = surrogates.items()

    def run():
        rng = Rng(doc["seed"], f"attack/{name}")
        x, y = data.images, data.labels
        label = derive_targets(y, data.num_classes, Rng(doc["seed"], "targets")) if cfg.targeted else y
        result = attack(optimizer, surrogate, x, label, cfg, rng.child("craft"))
        adv = result.adversarial.to(torch.float32)
        arts = [out / "adversarial.npy"]
        np.save(arts[0], adv.numpy())
        # byte-quantized copies for external tools; the .npy keeps full precision
        write_idx_images(out / "adversarial-images.idx", adv)
        write_idx(out / "adversarial-labels.idx", label.numpy())
        arts += [out / "adversarial-images.idx", out / "adversarial-labels.idx"]
        if cfg.targeted:
            arts.append(out / "targets.npy")
            np.save(arts[-1], label.numpy())
        members = surrogate if isinstance(surrogate, list) else [surrogate]
        judge = _whitebox_oracle(members, name)
        hit = targeted_success(judge, adv, label) if cfg.targeted else untargeted_success(judge, adv, y)
        summary = {
            "surrogate": name,
            "optimizer": optimizer,
            "attack": cfg.to_dict(),
            "samples": len(y),
            "whitebox_success": int(hit.sum()) / len(y),
            "max_perturbation": float((adv.double() - x.double()).abs().max()),
        }
        arts.append(_write_json(out / "summary.json", summary))
        return arts

    return run


def _attack_grid(doc):
    if "attacks" in doc:
        return {k: attack_config(v) for k, v in doc["attacks"].items()}
    optimizer, cfg = attack_config(doc.get("attack"))
    return {optimizer: (optimizer, cfg)}


def cmd_eval(doc, out):
    from .evalharness import VictimOracle, emit_report, run_matrix

    _require(doc, "data", "victims")
    data, _ = _dataset(doc["data"], "eval")
    data = _cap(data, doc)
    surrogates = _surrogates(doc, data.num_classes)
    victim_models = _load_group(doc["victims"], "victims", data.num_classes)
    if any(isinstance(v, list) for v in victim_models.values()):
        raise ConfigError("victims", "each victim is a single checkpoint")
    victims = {k: VictimOracle(m, k) for k, m in victim_models.items()}
    attacks = _attack_grid(doc)
    seeds = doc.get("seeds", [doc["seed"]])

    def run():
        report = run_matrix(surrogates, victims, data, attacks, seeds)
        return [emit_report(report, out / "report.csv", "csv"), emit_report(report, out / "report.json", "json")]

    return run


def cmd_sweep_alpha(doc, out):
    from .evalharness import VictimOracle, curve_summary, emit_plots, sweep_alpha

    _require(doc, "data", "eval_data", "teacher", "victims")
    data, _ = _dataset(doc["data"], "train")
    eval_set, _ = _dataset(doc["eval_data"], "eval")
    eval_set = _cap(eval_set, doc)
    teacher = _load_model(doc["teacher"].get("checkpoint", ""), "teacher.checkpoint", data.num_classes)
    victims = {k: VictimOracle(m, k) for k, m in _load_group(doc["victims"], "victims", data.num_classes).items()}
    optimizer, acfg = attack_config(doc.get("attack"))
    cfg, _, _ = train_config(doc.get("train"), doc["seed"])
    alphas = doc.get("alphas", [0.1, 1.0, 4.0])
    seeds = doc.get("seeds", [doc["seed"]])
    arch = doc.get("model", {}).get("arch", "conv_a")

    def run():
        points = sweep_alpha(teacher, data, alphas, seeds, victims=victims, eval_set=eval_set, attack_cfg=acfg,
                             optimizer=optimizer, student_arch=arch, train_cfg=cfg)
        summary = {("none" if a is None else repr(a)): v for a, v in curve_summary(points).items()}
        arts = [_write_json(out / "curve.json", {"points": points, "mean": summary})]
        arts += emit_plots(out, alpha_curve=points)
        return arts

    return run


def cmd_face_train(doc, out):
    from .faceverify import calibrate_threshold, train_face_classifier, verification_accuracy
    from .faceverify import eer_threshold, pair_similarities
    from .training import train_dsm

    _require(doc, "data", "model")
    block = doc["data"]
    if "face_toy" not in block:
        raise ConfigError("data", "face-train expects a face_toy dataset")
    data, _ = _dataset(block, "train")
    eval_block = {"face_toy": {**block["face_toy"], "split": "eval"}}
    _, protocol = _dataset(eval_block, "eval")
    cfg, _, margin = train_config(doc.get("train"), doc["seed"])
    teacher = None
    if "teacher" in doc:
        teacher = _load_model(doc["teacher"].get("checkpoint", ""), "teacher.checkpoint", data.num_classes)
        if margin.kind != "plain_softmax":
            raise ConfigError("train.margin", "a distilled face surrogate is trained on soft labels, not a margin loss")
    arch = doc["model"].get("arch", "conv_a")

    def run():
        model = build_model(arch, data.num_classes, data.shape, Rng(doc["seed"], f"init/{arch}"))
        if teacher is not None:
            dsm_cfg = cfg if cfg.label_strategy != "one_hot" else type(cfg)(**{**cfg.to_dict(), "label_strategy": "dark"})
            _, log = train_dsm(model, teacher, data, dsm_cfg)
        else:
            _, log = train_face_classifier(model, data, margin, cfg)
        tau = calibrate_threshold(model, protocol)
        _, eer = eer_threshold(pair_similarities(model, protocol.dataset.images, protocol.calibration), protocol.calibration[:, 2])
        info = {"tau": tau, "calibration_eer": eer, "evaluation_accuracy": verification_accuracy(model, protocol, tau)}
        return [save_checkpoint(model, out / "model.ckpt"), _write_log(out, log), _write_json(out / "verifier.json", info)]

    return run


def cmd_face_attack(doc, out):
    from .faceverify import cosine_sim, embed, face_transfer, pair_similarities, write_similarity_csv

    _require(doc, "data", "victims")
    block = doc["data"]
    if "face_toy" not in block:
        raise ConfigError("data", "face-attack expects a face_toy dataset")
    _, protocol = _dataset({"face_toy": {**block["face_toy"], "split": "eval"}}, "eval")
    surrogates = _surrogates(doc, None)
    if len(surrogates) != 1 or isinstance(next(iter(surrogates.values())), list):
        raise ConfigError("surrogates", "face-attack takes exactly one surrogate checkpoint")
    (sname, surrogate), = surrogates.items()
    victims = _load_group(doc["victims"], "victims")
    objective = (doc.get("attack") or {}).get("objective")
    if objective not in (None, "embedding_dodge", "embedding_impersonate"):
        raise ConfigError("attack.objective", "face-attack supports embedding_dodge or embedding_impersonate")
    kinds = {"embedding_dodge": ["dodging"], "embedding_impersonate": ["impersonate"], None: ["dodging", "impersonate"]}[objective]
    _, cfg = attack_config(doc.get("attack"), "face-attack")
    rows = protocol.evaluation
    if "max_samples" in doc:
        rows = np.concatenate([rows[rows[:, 2] == s][: doc["max_samples"]] for s in (1, 0)])

    def run():
        images = protocol.dataset.images
        ids = protocol.dataset.ids
        success, adversarial = face_transfer(surrogate, victims, protocol, cfg, Rng(doc["seed"], "face-attack"), kinds, rows)
        result = {"surrogate": sname, "attack": cfg.to_dict(), "success": success}
        arts = []
        for kind in kinds:
            pairs, adv = adversarial[kind]
            x_ref = images[pairs[:, 1]]
            clean = pair_similarities(surrogate, images, pairs)
            adv_sim = cosine_sim(embed(surrogate, adv), embed(surrogate, x_ref)).numpy()
            arts.append(write_similarity_csv(out / f"similarity_{kind}.csv", [ids[i] for i in pairs[:, 0]],
                                             [ids[i] for i in pairs[:, 1]], pairs[:, 2], clean, adv_sim))
        arts.append(_write_json(out / "face_report.json", result))
        return arts

    return run


def cmd_report(doc, out):
    from .evalharness import TransferReport, emit_plots, emit_report

    _require(doc, "reports")
    for p in doc["reports"]:
        if not Path(p).exists():
            raise InputError(f"reports: no such file {p}")
    reports = [TransferReport.from_json(Path(p).read_text()) if p.endswith(".json") else TransferReport.from_csv(Path(p).read_text())
               for p in doc["reports"]]

    def run():
        merged = reports[0]
        for r in reports[1:]:
            merged = merged.merge(r)
        surrogates = sorted({c.surrogate for c in merged.cells})
        bars = {s: merged.mean_transfer(s) for s in surrogates if any(c.victim != "whitebox" for c in merged.select(surrogate=s))}
        arts = [emit_report(merged, out / "report.csv", "csv"), emit_report(merged, out / "report.json", "json")]
        arts.append(_write_json(out / "summary.json", {"mean_transfer": bars}))
        arts += emit_plots(out, bars=bars)
        return arts

    return run


HANDLERS = {
    "train": cmd_train,
    "distill": cmd_distill,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep-alpha": cmd_sweep_alpha,
    "face-train": cmd_face_train,
    "face-attack": cmd_face_attack,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="darksurrogate", description="Train, distill and attack desk-scale surrogate models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config or a manifest from an earlier run")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--objective", help="attack objective selector")
        p.add_argument("--optimizer", help="attack optimizer selector")
    return parser


def run(argv=None):
    """Parse ``argv``, validate, execute; returns the process exit code."""
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        doc = load(args.config)
        doc, out = resolve(doc, args.command, args.seed, args.out, args.objective, args.optimizer)
        execute = HANDLERS[args.command](doc, out)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 3
    except (InputError, CheckpointError, DataFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    out.mkdir(parents=True, exist_ok=True)
    artifacts = execute()
    manifest = _write_manifest(out, args.command, doc, artifacts)
    print(json.dumps({"command": args.command, "out": str(out), "manifest": str(manifest),
                      "artifacts": [Path(a).name for a in artifacts]}))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
