# Transfer attacks from a dark surrogate on a synthetic image world.
#
# Run from the repository root:
#
#     python3 demos/desk_transfer.py [--cache runs/zoo] [--seed 1]
#
# It trains (or loads from the cache) four victims, a normal surrogate and
# two distilled surrogates, crafts M-DI2-FGSM examples on each surrogate and
# prints how often they fool the victims. One seed takes a few minutes on a
# single CPU core.

import argparse
from pathlib import Path

import torch

from darksurrogate.attacks import AttackConfig
from darksurrogate.evalharness import DeskSetup, Zoo, emit_plots, emit_report, run_matrix
from darksurrogate.labeling import dark_label
from darksurrogate.training import accuracy

parser = argparse.ArgumentParser()
parser.add_argument("--cache", default=None, help="checkpoint cache directory")
parser.add_argument("--seed", type=int, default=1)
parser.add_argument("--out", default="runs/demo-desk")
args = parser.parse_args()
torch.set_num_threads(1)

# ## The world
#
# `DeskSetup` fixes a synthetic 10-class image world. Classes come in
# superclasses whose centres are close, so a classifier trained on it is
# genuinely unsure between related classes. The surrogates train on one
# sample of the world and the victims on a disjoint sample, which stands in
# for an attacker who does not have the victims' training data.

zoo = Zoo(DeskSetup(), cache_dir=args.cache, verbose=True)
data = zoo.data
print({name: len(ds) for name, ds in data.items()})

# ## Victims
#
# Three architectures plus one slightly robust model. The harness only ever
# sees them through `VictimOracle`, which answers with a predicted label.

victims = zoo.victims()
for name, model in zoo.victim_models().items():
    print(f"victim {name:14s} clean accuracy {accuracy(model, data['eval']):.3f}")

# ## Surrogates
#
# The normal surrogate learns from one-hot labels. The dark surrogate is a
# fresh network of the same architecture trained on the normal surrogate's
# softmax outputs, with and without CutMix on the inputs.

s = args.seed
specs = {"normal": zoo.normal(s), "dark": zoo.dsm(s), "dark+cutmix": zoo.dsm(s, mix_strategy="cutmix")}
surrogates = {name: zoo.model(spec) for name, spec in specs.items()}

teacher_probs = dark_label(surrogates["normal"], data["train"].images)
print(f"teacher mean top probability on its training set: {float(teacher_probs.max(1).values.mean()):.3f}")

# ## Attack and judge
#
# Every surrogate crafts examples against the same evaluation images with
# the default M-DI2-FGSM budget (eps 16/255, 10 steps). A success is a
# victim prediction that differs from the true label.

attacks = {"mdi2": ("mdi2_fgsm", AttackConfig())}
report = run_matrix(surrogates, victims, data["eval"], attacks, [s])
print(f"\n{'surrogate':14s} white-box  mean transfer")
for name in surrogates:
    print(f"{name:14s} {100 * report.whitebox(name):8.1f}%  {100 * report.mean_transfer(name):8.1f}%")

out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
emit_report(report, out / "report.csv")
emit_plots(out, bars={name: report.mean_transfer(name) for name in surrogates})
print(f"\nreport and bar plot written to {out}")
