# The command-line workflow end to end, on a tiny world so it finishes in seconds.
#
#     python3 demos/cli_pipeline.py [workdir]
#
# Each step is what you would type as `darksurrogate <command> --config
# <file> --out <dir>`; here the configs are written from Python and passed
# to the same entry point.

import json
import sys
from pathlib import Path

from darksurrogate.cli import run

work = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo-cli")
work.mkdir(parents=True, exist_ok=True)

toy = {"toy": {"world": {"num_classes": 4, "num_super": 2, "shape": [3, 8, 8]}, "n_train": 400, "n_victim_train": 400, "n_eval": 100}}
fast = {"epochs": 4, "batch_size": 32, "lr": 0.05, "flip": False}


def step(command, name, doc, *flags):
    path = work / f"{name}.json"
    path.write_text(json.dumps(doc, indent=2))
    print(f"$ darksurrogate {command} --config {path} --out {work / name} {' '.join(flags)}".rstrip())
    code = run([command, "--config", str(path), "--out", str(work / name), *flags])
    if code != 0:
        sys.exit(code)
    return work / name


# ## Train a teacher and a victim
#
# The victim trains on the disjoint `victim_train` sample of the same world,
# with slight adversarial training (robust_eps_255 = 4).

teacher = step("train", "teacher", {"seed": 1, "data": toy, "model": {"arch": "conv_b"}, "train": fast}) / "model.ckpt"
victim = step("train", "victim", {"seed": 2, "data": {"toy": {**toy["toy"], "split": "victim_train"}}, "model": {"arch": "mlp"},
                                  "train": {**fast, "robust_eps_255": 4}}) / "model.ckpt"

# ## Distill a dark surrogate
#
# `distill` defaults to dark labels; CutMix is switched on in the train block.

student = step("distill", "student", {"seed": 3, "data": toy, "model": {"arch": "conv_a"}, "teacher": {"checkpoint": str(teacher)},
                                      "train": {**fast, "mix_strategy": "cutmix"}}) / "model.ckpt"

# ## Evaluate transfer
#
# The eval command runs every surrogate and attack against every victim and
# writes report.csv, report.json and a manifest with artifact hashes.

ev = step("eval", "eval", {"seed": 4, "data": toy, "surrogates": {"normal": str(teacher), "dark": str(student)},
                           "victims": {"mlp": str(victim)}, "attacks": {"mi": {"optimizer": "mi_fgsm"}, "mdi2": {}}, "seeds": [1, 2]})
print((ev / "report.csv").read_text())

# ## Replay from the manifest
#
# Passing the manifest back as the config repeats the run; the artifacts
# come out byte for byte the same.

again = step("eval", "eval-replay", json.loads((ev / "manifest.json").read_text()))
same = (again / "report.csv").read_bytes() == (ev / "report.csv").read_bytes()
print(f"replayed report identical: {same}")
