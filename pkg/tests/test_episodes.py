import io
import json

import numpy as np
import pytest

from causalshot import data as D
from causalshot import episodes as E
from causalshot import metrics


def test_label_spaces():
    assert E.map_labels("2way", "test") == ("LG", "HG")
    assert E.map_labels("2way", "val") == ("LG", "HG")
    assert E.map_labels("2way", "train") == (2, 3, 4, 5)
    assert E.map_labels("4way", "train") == D.GS_CLASSES and len(D.GS_CLASSES) == 8
    assert E.map_labels("4way", "val") == (2, 3, 4, 5)
    assert E.map_labels("4way", "test") == (2, 3, 4, 5)
    with pytest.raises(ValueError):
        E.map_labels("3way", "train")
    with pytest.raises(ValueError):
        E.map_labels("2way", "holdout")


def test_label_round_trip():
    for g in D.GS_CLASSES:
        isup = D.GS_TO_ISUP[g]
        assert isup in E.map_labels("2way", "train")
        assert D.isup_to_grade(isup) in E.map_labels("2way", "test")


@pytest.mark.parametrize("experiment,phase,way,space", [
    ("2way", "train", 2, (2, 3, 4, 5)), ("2way", "test", 2, ("LG", "HG")),
    ("4way", "train", 4, D.GS_CLASSES), ("4way", "test", 4, (2, 3, 4, 5)), ("4way", "val", 4, (2, 3, 4, 5)),
])
def test_episode_structure(small_pool, experiment, phase, way, space):
    sampler = E.EpisodeSampler(small_pool, experiment, phase, seed=0)
    for t in range(600):
        ep = sampler.sample(t)
        assert ep.way == way and ep.shot == 1 and ep.queries == 10
        assert len(set(ep.classes)) == way and set(ep.classes) <= set(space)
        assert len(ep.support) == way and len(ep.query) == 10 * way
        assert not set(ep.support) & set(ep.query)
        assert len(set(ep.query)) == len(ep.query)
        assert {small_pool[i].subset for i in ep.support + ep.query} == {phase}
        for idx, lab in zip(ep.support + ep.query, ep.support_labels + ep.query_labels):
            assert E.label_of(small_pool[idx], experiment, phase) == ep.classes[lab]
        assert np.bincount(ep.query_labels).tolist() == [10] * way
        if experiment == "4way" and phase == "test":
            assert ep.classes == (2, 3, 4, 5)


def test_determinism(small_pool):
    a = E.sample_episode(small_pool, "2way", "train", seed=4, task_id=17)
    b = E.sample_episode(small_pool, "2way", "train", seed=4, task_id=17)
    c = E.sample_episode(small_pool, "2way", "train", seed=5, task_id=17)
    assert a == b
    assert a != c


def test_class_exclusion(small_pool, caplog):
    pool = [im for im in small_pool if not (im.subset == "test" and im.isup_label == 3)]
    pool += [im for im in small_pool if im.subset == "test" and im.isup_label == 3][:5]
    sampler = E.EpisodeSampler(pool, "4way", "val")
    assert sampler.excluded == []
    sampler = E.EpisodeSampler(pool, "2way", "test")
    assert sampler.excluded == []
    with pytest.raises(ValueError):
        E.EpisodeSampler(pool, "4way", "test")
    assert "excluded" in caplog.text


def test_patient_leakage_check(small_pool):
    E.check_patient_disjoint(small_pool)
    moved = D.LabeledImage(np.zeros((2, 2)), "3+4", small_pool[0].patient_id,
                           subset="test" if small_pool[0].subset != "test" else "train")
    with pytest.raises(ValueError):
        E.check_patient_disjoint(small_pool + [moved])


class Oracle:
    """Scores each query by its true label."""

    def episode_scores(self, pool, ep):
        return np.eye(ep.way)[ep.query_labels]


def test_run_phase_with_oracle(small_pool):
    recs = E.run_phase(Oracle(), small_pool, "2way", "test", n_tasks=1)
    hg = list(recs[0].classes).index("HG")
    assert metrics.binary_auroc(recs[0].scores[:, hg], recs[0].labels == hg) == 1.0


def test_run_phase_counts_and_manifest(small_pool):
    buf = io.StringIO()
    recs = E.run_phase(Oracle(), small_pool, "4way", "test", n_tasks=600, seed=2, manifest=buf)
    assert len(recs) == 600
    lines = buf.getvalue().splitlines()
    assert len(lines) == 600
    first = json.loads(lines[0])
    assert first["task_id"] == 0 and len(first["query"]) == 40 and first["subset"] == "test"
    again = E.run_phase(Oracle(), small_pool, "4way", "test", n_tasks=600, seed=2)
    assert all(np.array_equal(a.scores, b.scores) and np.array_equal(a.labels, b.labels) for a, b in zip(recs, again))


def test_train_phase_calls_train_step(small_pool):
    calls = []

    class Learner:
        def train_step(self, pool, ep):
            calls.append(ep.task_id)
            return np.zeros((len(ep.query), ep.way))

    E.run_phase(Learner(), small_pool, "2way", "train", n_tasks=5)
    assert calls == [0, 1, 2, 3, 4]
