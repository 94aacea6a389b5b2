"""Causality-driven BDC network and its episodic meta-learner."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone, bdc, causality, metrics, training
from .causality import CausalityMethod
from .episodes import run_phase

log = logging.getLogger(__name__)


def stack_pixels(images) -> np.ndarray:
    """``[B, 1, S, S]`` float64 batch from a list of images or 2-D arrays."""
    arrs = [np.asarray(getattr(im, "pixels", im), dtype=float) for im in images]
    return np.stack(arrs)[:, None, :, :]


class CausalBDCNet:
    """Encoder -> (optional) causality enhancement -> BDC matrix.

    ``variant`` is one of ``none``, ``mulcat``, ``mulcatbool``,
    ``ablation-mulcat`` or ``ablation-mulcatbool``. The ablations draw their
    random factor vector once, from ``seed``.
    """

    def __init__(self, encoder_cfg: backbone.EncoderConfig, variant: str = "none",
                 method: CausalityMethod | None = None, seed: int = 0, params: dict | None = None,
                 ablation_factors=None, unit_norm: bool = True):
        if variant not in causality.VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if variant in ("mulcat", "mulcatbool"):
            method = method or CausalityMethod()
        elif method is not None:
            raise ValueError(f"variant {variant!r} takes no causality method")
        self.encoder_cfg = encoder_cfg
        self.variant = variant
        self.method = method
        self.seed = seed
        self.unit_norm = unit_norm
        self.encoder = backbone.Encoder(encoder_cfg, seed=seed, params=params or {})
        self.ablation = None
        if variant.startswith("ablation-"):
            if ablation_factors is None:
                mode = variant.split("-", 1)[1]
                ablation_factors = causality.ablation_factors(encoder_cfg.k, mode, seed + 7919)
            self.ablation = np.asarray(ablation_factors, dtype=float)

    @property
    def n_channels(self) -> int:
        return self.encoder_cfg.k * (1 if self.variant == "none" else 2)

    def parameters(self) -> list:
        return self.encoder.parameters()

    def feature_maps(self, images) -> ad.Tensor:
        return self.encoder(images)

    def enhance(self, maps) -> ad.Tensor:
        out, _, _ = causality.enhance(maps, self.variant, self.method, self.ablation)
        return out

    def features(self, images) -> ad.Tensor:
        """Final feature set entering the BDC pooling, ``[B, c, n, n]``."""
        return self.enhance(self.feature_maps(images))

    def bdc(self, images) -> ad.Tensor:
        mats = bdc.bdc_matrix(self.features(images))
        return bdc.unit_frobenius(mats) if self.unit_norm else mats

    def embed(self, images, batch_size: int = 64) -> np.ndarray:
        """BDC matrices as a plain array, computed without building a graph."""
        x = stack_pixels(images) if not isinstance(images, np.ndarray) else images
        keep = [p.requires_grad for p in self.parameters()]
        for p in self.parameters():
            p.requires_grad = False
        try:
            chunks = [self.bdc(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        finally:
            for p, k in zip(self.parameters(), keep):
                p.requires_grad = k
        return np.concatenate(chunks) if chunks else np.zeros((0, self.n_channels, self.n_channels))

    def episode_forward(self, images, support_labels, n_support: int, way: int) -> ad.Tensor:
        """Query-vs-prototype scores ``[Q, N]`` for one stacked episode batch."""
        mats = self.bdc(images)
        support = mats[:n_support]
        labels = np.asarray(support_labels)
        protos = [bdc.prototype([support[int(i)] for i in np.nonzero(labels == c)[0]], c) for c in range(way)]
        return bdc.score(mats[n_support:], protos)

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.encoder.params.items()}

    def load_state_dict(self, arrays: dict) -> None:
        for name, arr in arrays.items():
            self.encoder.params[name].data = np.array(arr, dtype=float)

    def header(self) -> dict:
        return {
            "encoder": backbone.config_to_dict(self.encoder_cfg),
            "variant": self.variant,
            "method": None if self.method is None else {"kind": self.method.kind, "p": self.method.p},
            "seed": self.seed,
            "unit_norm": self.unit_norm,
            "ablation_factors": None if self.ablation is None else self.ablation.tolist(),
        }

    def save(self, path, **extra) -> None:
        header = self.header()
        header.update(extra)
        backbone.save_checkpoint(path, self.encoder.params, header)

    @classmethod
    def load(cls, path) -> tuple["CausalBDCNet", dict]:
        arrays, header = backbone.load_checkpoint(path)
        enc = header["encoder"]
        cfg = backbone.EncoderConfig(enc["input_size"], tuple(enc["channel_plan"]), enc["k"], enc["n"])
        method = None if header["method"] is None else CausalityMethod(header["method"]["kind"], header["method"]["p"])
        net = cls(cfg, header["variant"], method, header["seed"], ablation_factors=header.get("ablation_factors"), unit_norm=header.get("unit_norm", True))
        net.load_state_dict(arrays)
        return net, header


class CachedScorer:
    """Episode scoring from BDC matrices computed once per pool image."""

    def __init__(self, net: CausalBDCNet, pool):
        self.net = net
        self.pool = pool
        self._cache: dict = {}

    def matrices(self, indices) -> np.ndarray:
        missing = [i for i in indices if i not in self._cache]
        if missing:
            mats = self.net.embed([self.pool[i] for i in missing])
            self._cache.update(zip(missing, mats))
        return np.stack([self._cache[i] for i in indices])

    def episode_scores(self, pool, ep) -> np.ndarray:
        sup = self.matrices(ep.support)
        qry = self.matrices(ep.query)
        labels = np.asarray(ep.support_labels)
        protos = np.stack([sup[labels == c].mean(axis=0) for c in range(ep.way)])
        return np.einsum("qij,nij->qn", qry, protos)


def task_metrics(experiment: str, rec: metrics.TaskResult) -> dict:
    """AUROCs of one evaluation task under the experiment's protocol."""
    if experiment == "2way":
        hg = list(rec.classes).index("HG")
        lg = list(rec.classes).index("LG")
        return {"2-way": metrics.binary_auroc(rec.scores[:, hg] - rec.scores[:, lg], rec.labels == hg)}
    out = {"4-way": metrics.ovr_auroc(rec.scores, rec.labels)}
    if 2 in rec.classes:
        out["4-way*"] = metrics.class2_vs_rest(rec.scores, rec.labels, list(rec.classes).index(2))
    return out


def evaluate(net: CausalBDCNet, pool, experiment: str, phase: str = "test", n_tasks: int = 600,
             seed: int = 0, scorer: CachedScorer | None = None) -> dict:
    """Mean/SD of every protocol AUROC over ``n_tasks`` episodes."""
    scorer = scorer or CachedScorer(net, pool)
    records = run_phase(scorer, pool, experiment, phase, n_tasks=n_tasks, seed=seed)
    per_metric: dict = {}
    skipped = 0
    for rec in records:
        try:
            for key, val in task_metrics(experiment, rec).items():
                per_metric.setdefault(key, []).append(val)
        except metrics.UndefinedMetricError:
            skipped += 1
    out = {key: metrics.aggregate(vals) for key, vals in per_metric.items()}
    out["skipped"] = skipped
    out["n_tasks"] = n_tasks
    return out


@dataclass
class MetaLearner:
    """Episodic PESG training with validation-based checkpoint selection.

    Every epoch runs ``tasks_per_epoch`` meta-training episodes; every
    ``val_every`` epochs the model is scored on ``val_tasks`` validation
    episodes and the best parameters are retained.
    """

    net: CausalBDCNet
    experiment: str
    pesg: training.PesgConfig = field(default_factory=training.PesgConfig)
    tasks_per_epoch: int = 6
    val_every: int = 10
    val_tasks: int = 100
    seed: int = 0
    margin: float = 1.0
    score_scale: float = 1.0
    loss: str = "aucm"
    log_file: object = None

    def __post_init__(self):
        self.states: dict = {}
        self.epoch = 0
        self.task_counter = 0
        self.skipped = 0
        self.history: list = []
        self.best: tuple | None = None

    def _state(self, label) -> training.AucmState:
        if label not in self.states:
            self.states[label] = training.AucmState(margin=self.margin)
        return self.states[label]

    def train_step(self, pool, ep) -> np.ndarray:
        images = stack_pixels([pool[i] for i in ep.support + ep.query])
        scores = self.net.episode_forward(images, ep.support_labels, len(ep.support), ep.way)
        scaled = ad.mul(scores, self.score_scale)
        states = [self._state(c) for c in ep.classes]
        try:
            if self.loss == "aucm":
                loss, _ = training.multiclass_aucm(scaled, ep.query_labels, states)
            else:
                loss = training.cross_entropy(scaled, ep.query_labels)
        except training.SkipTask:
            self.skipped += 1
            return scores.data
        loss.backward()
        lr = training.pesg_step(self.net.parameters(), states, self.epoch, self.pesg)
        if self.log_file is not None:
            alpha = float(np.mean([s.alpha.item() for s in states]))
            self.log_file.write(json.dumps({"task_id": self.task_counter, "epoch": self.epoch,
                                            "loss": loss.item(), "lr": lr, "alpha": alpha}) + "\n")
        self.history.append((self.epoch, loss.item()))
        self.task_counter += 1
        return scores.data

    def validate(self, pool) -> float:
        res = evaluate(self.net, pool, self.experiment, "val", self.val_tasks, seed=self.seed + 1)
        key = "2-way" if self.experiment == "2way" else "4-way"
        return res[key][0]

    def fit(self, pool) -> "MetaLearner":
        for epoch in range(self.pesg.epochs):
            self.epoch = epoch
            run_phase(self, pool, self.experiment, "train", n_tasks=self.tasks_per_epoch,
                      seed=self.seed * 100003 + epoch)
            last = epoch == self.pesg.epochs - 1
            if self.val_tasks > 0 and ((epoch + 1) % self.val_every == 0 or last):
                auc = self.validate(pool)
                log.info("epoch %d val AUROC %.4f", epoch, auc)
                if self.best is None or auc > self.best[0]:
                    self.best = (auc, epoch, self.net.state_dict())
        if self.best is not None:
            self.net.load_state_dict(self.best[2])
        return self
