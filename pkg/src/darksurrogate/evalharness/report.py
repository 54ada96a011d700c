"""
Transfer reports: one cell per (surrogate, victim, optimizer, objective, seed).

CSV columns are fixed: ``surrogate,victim,optimizer,objective,epsilon,N,seed,success_rate,samples``.
The JSON form carries the same cells plus clean accuracies and the config
snapshot.
"""

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CSV_COLUMNS = ("surrogate", "victim", "optimizer", "objective", "epsilon", "N", "seed", "success_rate", "samples")
WHITEBOX = "whitebox"


@dataclass
class Cell:
    surrogate: str
    victim: str
    optimizer: str
    objective: str
    epsilon: float
    N: int
    seed: int
    successes: int
    samples: int

    @property
    def success_rate(self):
        return self.successes / self.samples

    def key(self):
        return (self.surrogate, self.victim, self.optimizer, self.objective, self.seed)


@dataclass
class TransferReport:
    cells: list = field(default_factory=list)
    clean_accuracy: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, cell):
        if cell.successes > cell.samples or cell.samples <= 0:
            raise ValueError(f"invalid cell counts {cell.successes}/{cell.samples}")
        self.cells.append(cell)

    def merge(self, other):
        out = TransferReport(list(self.cells), dict(self.clean_accuracy), dict(self.config))
        for c in other.cells:
            out.add(c)
        out.clean_accuracy.update(other.clean_accuracy)
        return out

    def select(self, **match):
        return [c for c in self.cells if all(getattr(c, k) == v for k, v in match.items())]

    def victims(self):
        return sorted({c.victim for c in self.cells if c.victim != WHITEBOX})

    def mean_transfer(self, surrogate, optimizer=None, objective=None, victims=None):
        """Success rate averaged over victims (white-box excluded) and seeds."""
        cells = [
            c
            for c in self.select(surrogate=surrogate)
            if c.victim != WHITEBOX
            and (optimizer is None or c.optimizer == optimizer)
            and (objective is None or c.objective == objective)
            and (victims is None or c.victim in victims)
        ]
        if not cells:
            raise KeyError(f"no transfer cells for surrogate {surrogate!r}")
        return float(np.mean([c.success_rate for c in cells]))

    def whitebox(self, surrogate, optimizer=None):
        cells = [c for c in self.select(surrogate=surrogate, victim=WHITEBOX) if optimizer is None or c.optimizer == optimizer]
        return float(np.mean([c.success_rate for c in cells]))

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in self.cells:
            w.writerow([c.surrogate, c.victim, c.optimizer, c.objective, repr(float(c.epsilon)), c.N, c.seed, repr(c.success_rate), c.samples])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source):
        text = Path(source).read_text() if not isinstance(source, str) or "\n" not in source else source
        rows = list(csv.DictReader(io.StringIO(text)))
        report = cls()
        for r in rows:
            samples = int(r["samples"])
            report.add(
                Cell(
                    r["surrogate"], r["victim"], r["optimizer"], r["objective"], float(r["epsilon"]), int(r["N"]),
                    int(r["seed"]), int(round(float(r["success_rate"]) * samples)), samples,
                )
            )
        return report

    def to_json(self, path=None):
        doc = {
            "columns": list(CSV_COLUMNS),
            "cells": [
                {
                    "surrogate": c.surrogate, "victim": c.victim, "optimizer": c.optimizer, "objective": c.objective,
                    "epsilon": c.epsilon, "N": c.N, "seed": c.seed, "success_rate": c.success_rate,
                    "successes": c.successes, "samples": c.samples,
                }
                for c in self.cells
            ],
            "clean_accuracy": self.clean_accuracy,
            "config": self.config,
        }
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source):
        doc = json.loads(Path(source).read_text() if not str(source).lstrip().startswith("{") else source)
        report = cls(clean_accuracy=doc.get("clean_accuracy", {}), config=doc.get("config", {}))
        for c in doc["cells"]:
            report.add(Cell(c["surrogate"], c["victim"], c["optimizer"], c["objective"], c["epsilon"], c["N"], c["seed"], c["successes"], c["samples"]))
        return report


def emit_report(report, path, format="csv"):
    """Write ``report`` as CSV or JSON; an empty report is an error."""
    if not report.cells:
        raise ValueError("refusing to emit an empty report")
    path = Path(path)
    if format == "csv":
        report.to_csv(path)
    elif format == "json":
        report.to_json(path)
    else:
        raise ValueError(f"unknown report format {format!r}")
    return path


def emit_plots(out_dir, alpha_curve=None, bars=None):
    """Success-vs-alpha line plot and a bar chart of mean success per training strategy.

    ``alpha_curve``: list of ``{"alpha", "seed", "mean_success"}`` points,
    optionally with a ``baseline`` entry drawn as a dashed line.
    ``bars``: mapping of strategy name to mean success.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if alpha_curve:
        points = [p for p in alpha_curve if p.get("alpha") is not None]
        alphas = sorted({p["alpha"] for p in points})
        means = [100 * np.mean([p["mean_success"] for p in points if p["alpha"] == a]) for a in alphas]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(alphas, means, "o-", label="CutMix")
        base = [p["mean_success"] for p in alpha_curve if p.get("alpha") is None]
        if base:
            ax.axhline(100 * np.mean(base), ls="--", color="gray", label="no mixing")
        ax.set_xscale("log")
        ax.set_xlabel("alpha")
        ax.set_ylabel("mean success rate (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "alpha_sweep.png", dpi=100)
        plt.close(fig)
        written.append(out_dir / "alpha_sweep.png")
    if bars:
        fig, ax = plt.subplots(figsize=(4, 3))
        names = list(bars)
        ax.bar(names, [100 * bars[n] for n in names])
        ax.set_ylabel("mean success rate (%)")
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        fig.savefig(out_dir / "mixing_bars.png", dpi=100)
        plt.close(fig)
        written.append(out_dir / "mixing_bars.png")
    return written
