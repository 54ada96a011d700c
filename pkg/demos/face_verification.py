# Dodging and impersonation against toy face verifiers.
#
# Run from the repository root:
#
#     python3 demos/face_verification.py [--cache runs/face-zoo] [--seed 1]
#
# Verifiers compare the penultimate embeddings of two images by cosine
# similarity and accept a pair above a threshold set at the equal error
# rate. The attacker perturbs one image of the pair within eps = 8/255.

import argparse

import torch

from darksurrogate.attacks import AttackConfig
from darksurrogate.core import Rng
from darksurrogate.evalharness import FaceSetup, Zoo
from darksurrogate.faceverify import FACE_DEFAULTS, calibrate_threshold, face_transfer, verification_accuracy

parser = argparse.ArgumentParser()
parser.add_argument("--cache", default=None, help="checkpoint cache directory")
parser.add_argument("--seed", type=int, default=1)
args = parser.parse_args()
torch.set_num_threads(1)

# ## Identities and protocol
#
# Each identity is a latent code rendered through a fixed random decoder.
# Surrogates and victims train on disjoint identity sets, and the
# verification pairs come from a third set that nobody trained on.

zoo = Zoo(FaceSetup(), cache_dir=args.cache, verbose=True)
protocol = zoo.data["protocol"]
print(f"{len(protocol.calibration)} calibration pairs, {len(protocol.evaluation)} evaluation pairs")

# ## Victim verifiers
#
# One AM-Softmax and one ArcFace-style (additive angular margin) model, plus
# a plain softmax classifier used as a verifier.

victims = zoo.victim_models()
for name, model in victims.items():
    tau = calibrate_threshold(model, protocol)
    print(f"victim {name:16s} tau {tau:.3f} verification accuracy {verification_accuracy(model, protocol, tau):.3f}")

# ## Surrogates and attacks
#
# A normal identity classifier and a dark surrogate distilled from it with
# CutMix. Dodging pushes a genuine pair apart, impersonation pulls an
# impostor pair together; each verifier judges with its own threshold.

cfg = AttackConfig(**FACE_DEFAULTS)
for name, spec in (("normal", zoo.normal(args.seed)), ("dark+cutmix", zoo.dsm(args.seed, mix_strategy="cutmix"))):
    success, _ = face_transfer(zoo.model(spec), victims, protocol, cfg, Rng(args.seed, "face-attack"))
    for kind, row in success.items():
        transfer = sum(row[v] for v in victims) / len(victims)
        print(f"{name:12s} {kind:12s} white-box {100 * row['whitebox']:5.1f}%  mean transfer {100 * transfer:5.1f}%")
