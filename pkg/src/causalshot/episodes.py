"""Label granularity per experiment phase and N-way K-shot episode sampling."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import GS_CLASSES, ISUP_CLASSES, GRADES
from .metrics import TaskResult

log = logging.getLogger(__name__)

EXPERIMENTS = ("2way", "4way")
PHASES = ("train", "val", "test")
WAYS = {"2way": 2, "4way": 4}


def map_labels(experiment: str, phase: str) -> tuple:
    """Label space in force for an experiment phase.

    Training uses the finer granularity (ISUP for 2-way, GS for 4-way);
    validation and testing use the coarser one (LG/HG for 2-way, ISUP for 4-way).
    """
    if experiment not in EXPERIMENTS or phase not in PHASES:
        raise ValueError(f"unknown experiment/phase {experiment!r}/{phase!r}")
    if experiment == "2way":
        return ISUP_CLASSES if phase == "train" else GRADES
    return GS_CLASSES if phase == "train" else ISUP_CLASSES


def label_of(image, experiment: str, phase: str):
    space = map_labels(experiment, phase)
    if space is GS_CLASSES:
        return image.gs_label
    if space is ISUP_CLASSES:
        return image.isup_label
    return image.grade_label


def check_patient_disjoint(images) -> None:
    """Raise if any patient has images in more than one subset."""
    seen: dict = {}
    for im in images:
        prev = seen.setdefault(im.patient_id, im.subset)
        if prev != im.subset:
            raise ValueError(f"patient {im.patient_id} appears in both {prev} and {im.subset}")


@dataclass
class Episode:
    task_id: int
    way: int
    shot: int
    queries: int
    classes: tuple
    support: list
    support_labels: list
    query: list
    query_labels: list
    label_space: tuple
    subset: str

    def to_json(self, pool) -> str:
        return json.dumps({
            "task_id": self.task_id, "subset": self.subset, "way": self.way, "shot": self.shot,
            "queries": self.queries, "classes": [str(c) for c in self.classes],
            "support": [pool[i].image_id for i in self.support],
            "query": [pool[i].image_id for i in self.query],
            "query_labels": list(map(int, self.query_labels)),
        }, sort_keys=True)


@dataclass
class EpisodeSampler:
    """Draws tasks from one subset of a pool.

    ``pool`` is the full image list; only images whose ``subset`` equals the
    phase's subset are used. Classes with fewer than ``shot + queries``
    images are left out and listed in ``excluded``.
    """

    pool: list
    experiment: str
    phase: str
    way: int | None = None
    shot: int = 1
    queries: int = 10
    seed: int = 0
    excluded: list = field(default_factory=list, init=False)

    def __post_init__(self):
        self.label_space = map_labels(self.experiment, self.phase)
        if self.way is None:
            self.way = WAYS[self.experiment]
        by_class: dict = {c: [] for c in self.label_space}
        for idx, im in enumerate(self.pool):
            if im.subset == self.phase:
                by_class[label_of(im, self.experiment, self.phase)].append(idx)
        need = self.shot + self.queries
        self.by_class = {}
        for c, idxs in by_class.items():
            if len(idxs) >= need:
                self.by_class[c] = np.array(idxs)
            else:
                self.excluded.append(c)
                log.warning("class %s has %d images in %s (< %d); excluded", c, len(idxs), self.phase, need)
        self.classes = tuple(c for c in self.label_space if c in self.by_class)
        if len(self.classes) < self.way:
            raise ValueError(f"only {len(self.classes)} usable classes in {self.phase} for a {self.way}-way task")

    def sample(self, task_id: int) -> Episode:
        rng = np.random.default_rng([self.seed, task_id])
        chosen = rng.choice(len(self.classes), size=self.way, replace=False)
        chosen.sort()
        classes = tuple(self.classes[i] for i in chosen)
        support, support_labels, query, query_labels = [], [], [], []
        for pos, c in enumerate(classes):
            picks = rng.choice(self.by_class[c], size=self.shot + self.queries, replace=False)
            support.extend(int(i) for i in picks[: self.shot])
            support_labels.extend([pos] * self.shot)
            query.extend(int(i) for i in picks[self.shot:])
            query_labels.extend([pos] * self.queries)
        return Episode(task_id, self.way, self.shot, self.queries, classes, support, support_labels,
                       query, query_labels, self.label_space, self.phase)


def sample_episode(pool, experiment: str, phase: str, way=None, shot=1, queries=10, seed=0, task_id=0) -> Episode:
    return EpisodeSampler(pool, experiment, phase, way, shot, queries, seed).sample(task_id)


def run_phase(model, pool, experiment: str, phase: str, n_tasks: int = 600, seed: int = 0,
              way=None, shot: int = 1, queries: int = 10, manifest=None, on_task=None) -> list:
    """Run ``n_tasks`` episodes and collect per-task query scores.

    ``model`` must provide ``episode_scores(pool, episode) -> [Q, N] array``;
    in the ``train`` phase ``model.train_step(pool, episode)`` is called
    instead and its returned scores are recorded. ``manifest`` may be an
    open text file receiving one JSON line per episode.
    """
    sampler = EpisodeSampler(pool, experiment, phase, way, shot, queries, seed)
    records = []
    for t in range(n_tasks):
        ep = sampler.sample(t)
        if manifest is not None:
            manifest.write(ep.to_json(pool) + "\n")
        if phase == "train":
            scores = model.train_step(pool, ep)
        else:
            scores = model.episode_scores(pool, ep)
        rec = TaskResult(t, np.asarray(scores), np.asarray(ep.query_labels), ep.classes)
        records.append(rec)
        if on_task is not None:
            on_task(rec)
    return records
