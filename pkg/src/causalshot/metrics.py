"""AUROC variants and mean (SD) aggregation over tasks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

# published mean (SD) AUROC over 600 meta-test tasks on prostate MRI; reference only, not a target
REFERENCE_RESULTS = {
    "Non causality-driven": {"2-way": (0.539, 0.141), "4-way": (0.585, 0.068), "4-way*": (0.586, 0.118)},
    "Causality-driven mulcat": {"2-way": (0.550, 0.144), "4-way": (0.611, 0.069), "4-way*": (0.712, 0.118)},
    "Causality-driven mulcatbool": {"2-way": (0.556, 0.141), "4-way": (0.614, 0.067), "4-way*": (0.713, 0.119)},
    "Ablation mulcat": {"2-way": (0.535, 0.143), "4-way": (0.557, 0.063), "4-way*": (0.557, 0.111)},
    "Ablation mulcatbool": {"2-way": (0.540, 0.139), "4-way": (0.571, 0.068), "4-way*": (0.612, 0.119)},
}


class UndefinedMetricError(ValueError):
    """AUROC is undefined because only one class is present."""


@dataclass
class TaskResult:
    task_id: int
    scores: np.ndarray
    labels: np.ndarray
    classes: tuple = ()

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.labels = np.asarray(self.labels)
        if len(self.scores) != len(self.labels):
            raise ValueError("score rows and labels do not align")


def binary_auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties count half."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("binary AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ovr_auroc(scores, labels) -> float:
    """Unweighted mean of per-class one-vs-rest AUROCs.

    ``scores`` is ``[Q, N]``; ``labels`` holds column indices. Classes with no
    positives (or nothing but positives) are skipped.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.ndim != 2 or s.shape[0] != y.size:
        raise ValueError("scores must be [Q, N] aligned with labels")
    values = []
    for c in range(s.shape[1]):
        member = y == c
        if member.any() and not member.all():
            values.append(binary_auroc(s[:, c], member))
    if not values:
        raise UndefinedMetricError("one-vs-rest AUROC needs at least two classes present")
    return float(np.mean(values))


def class_rank(scores, column: int) -> np.ndarray:
    """Per query, the fraction of other classes scored below ``column`` (ties half)."""
    s = np.asarray(scores, dtype=float)
    target = s[:, [column]]
    others = np.delete(s, column, axis=1)
    below = (others < target).sum(axis=1) + 0.5 * (others == target).sum(axis=1)
    return below / others.shape[1]


def class2_vs_rest(scores, labels, class2_column: int = 0) -> float:
    """ISUP 2 against all other groups, with the other groups as positives.

    The per-query score is ``1 - class_rank(scores, class2_column)``, so a
    query whose ISUP-2 similarity ranks first gets the lowest score.
    """
    y = np.asarray(labels)
    positive = y != class2_column
    return binary_auroc(1.0 - class_rank(scores, class2_column), positive)


def aggregate(task_aurocs) -> tuple[float, float]:
    """Arithmetic mean and population SD."""
    vals = [float(v) for v in task_aurocs]
    if not vals:
        raise ValueError("aggregate needs at least one value")
    m = math.fsum(vals) / len(vals)
    sd = math.sqrt(math.fsum((v - m) ** 2 for v in vals) / len(vals))
    return m, sd


def format_mean_sd(mean: float, sd: float) -> str:
    return f"{mean:.3f} ({sd:.3f})"


def write_results_csv(path, rows, columns=("2-way", "4-way", "4-way*")) -> None:
    """Rows are dicts with ``setting`` plus cells keyed by ``columns``.

    A cell is a ``(mean, sd)`` pair, a preformatted string, or missing.
    Extra keys are written after the table columns.
    """
    extra = []
    for row in rows:
        for key in row:
            if key != "setting" and key not in columns and key not in extra:
                extra.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", *columns, *extra])
        for row in rows:
            cells = []
            for col in columns:
                v = row.get(col, "")
                cells.append(format_mean_sd(*v) if isinstance(v, tuple) else v)
            writer.writerow([row["setting"], *cells, *(row.get(k, "") for k in extra)])
