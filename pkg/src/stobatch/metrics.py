"""Conventional and certified accuracy, and the evaluation report."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConsistencyError

EVAL_COLUMNS = ("attack", "mu_a", "conventional_acc", "certified_acc", "n")


def _aligned(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[0] == 0:
        raise ConfigError("empty test set")
    if a.shape[0] != b.shape[0]:
        raise ConsistencyError(f"{a.shape[0]} predictions for {b.shape[0]} labels")
    return a, b


def conventional_accuracy(predictions, labels):
    p, y = _aligned(predictions, labels)
    return float(np.mean(p == y))


def certified_accuracy(results, labels, mu_a):
    """Fraction of examples that are both correctly labelled and certified at ``mu_a``."""
    if len(results) == 0:
        raise ConfigError("empty test set")
    _, y = _aligned(np.arange(len(results)), labels)
    hits = [r.label == int(t) and r.is_robust_at(mu_a) for r, t in zip(results, y)]
    return float(np.mean(hits))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts keyed by EVAL_COLUMNS
    privacy: object = None

    def add(self, attack, mu_a, conventional_acc, certified_acc, n):
        if certified_acc is not None and certified_acc > conventional_acc + 1e-12 and attack == "none":
            raise ConsistencyError("certified accuracy exceeds conventional accuracy")
        self.rows.append({"attack": attack, "mu_a": mu_a, "conventional_acc": conventional_acc,
                          "certified_acc": "" if certified_acc is None else certified_acc, "n": n})

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as f:
            for line in header_lines:
                f.write(f"# {line}\n")
            w = csv.writer(f)
            w.writerow(EVAL_COLUMNS)
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in EVAL_COLUMNS)])
