"""AUC-margin loss and the PESG primal-dual optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class SkipTask(Exception):
    """The batch holds a single class, so the AUC loss is undefined."""


@dataclass
class AucmState:
    """Auxiliary variables of the min-max AUC-margin objective.

    ``a`` and ``b`` track the positive and negative score levels and are
    minimised; ``alpha`` is maximised and kept non-negative.
    """

    margin: float = 1.0
    a: ad.Tensor = field(default_factory=lambda: ad.Tensor(0.0, requires_grad=True))
    b: ad.Tensor = field(default_factory=lambda: ad.Tensor(0.0, requires_grad=True))
    alpha: ad.Tensor = field(default_factory=lambda: ad.Tensor(0.0, requires_grad=True))
    p_hat: float = 0.5

    def zero_grad(self):
        for t in (self.a, self.b, self.alpha):
            t.zero_grad()

    def as_dict(self) -> dict:
        return {"a": self.a.item(), "b": self.b.item(), "alpha": self.alpha.item(), "margin": self.margin}


@dataclass(frozen=True)
class PesgConfig:
    lr: float = 1e-2
    weight_decay: float = 1e-2
    epochs: int = 100
    decay_epochs: tuple = (20, 80)
    decay_factor: float = 10.0


def lr_at(epoch: int, cfg: PesgConfig) -> float:
    """Learning rate for a 0-based epoch: divided by ``decay_factor`` at each decay epoch."""
    drops = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr / cfg.decay_factor ** drops


def lr_trace(cfg: PesgConfig) -> list:
    return [lr_at(e, cfg) for e in range(cfg.epochs)]


def aucm_loss(scores, labels, state: AucmState) -> ad.Tensor:
    """Square-loss AUC-margin objective with the positive rate taken from the batch.

    Per sample ``F = (1-p)(s-a)^2 [y=1] + p(s-b)^2 [y=0]
    + 2 alpha (p(1-p)m + p s [y=0] - (1-p) s [y=1]) - p(1-p) alpha^2``,
    averaged over the batch.
    """
    s = ad.as_tensor(scores)
    s = ad.reshape(s, (s.size,))
    y = np.asarray(labels).reshape(-1).astype(bool)
    if y.size != s.size:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise SkipTask("aucm_loss needs both classes in the batch")
    p = float(y.mean())
    state.p_hat = p
    pos, neg = y.astype(float), (~y).astype(float)
    m = state.margin
    sq_pos = ad.mul(ad.pow_scalar(ad.sub(s, state.a), 2), (1 - p) * pos)
    sq_neg = ad.mul(ad.pow_scalar(ad.sub(s, state.b), 2), p * neg)
    lin = ad.mul(s, p * neg - (1 - p) * pos)
    per_sample = ad.add(ad.add(sq_pos, sq_neg), ad.mul(ad.add(lin, p * (1 - p) * m), ad.mul(state.alpha, 2.0)))
    return ad.sub(ad.mean(per_sample), ad.mul(ad.pow_scalar(state.alpha, 2), p * (1 - p)))


def multiclass_aucm(scores, labels, states) -> tuple:
    """Mean of one-vs-rest AUC-margin losses over ``[Q, N]`` scores.

    ``states[c]`` is the :class:`AucmState` for column ``c``. Columns whose
    class is absent (or is the only class) are skipped. Returns
    ``(loss, n_skipped)``.
    """
    s = ad.as_tensor(scores)
    y = np.asarray(labels).reshape(-1)
    n = s.shape[1]
    if n < 2:
        raise ValueError("multiclass_aucm needs at least two columns")
    terms, skipped = [], 0
    for c in range(n):
        try:
            terms.append(aucm_loss(s[:, c], y == c, states[c]))
        except SkipTask:
            skipped += 1
    if not terms:
        raise SkipTask("no class has both positives and negatives")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms)), skipped


def cross_entropy(scores, labels) -> ad.Tensor:
    """Softmax cross-entropy; a debugging fallback, not used for reported runs."""
    s = ad.as_tensor(scores)
    y = np.asarray(labels).reshape(-1)
    lse = ad.logsumexp(s, axis=-1)
    onehot = np.eye(s.shape[1])[y]
    picked = ad.sum_(ad.mul(s, onehot), axis=-1)
    return ad.mean(ad.sub(lse, picked))


def pesg_step(params, states, epoch: int, cfg: PesgConfig) -> float:
    """One PESG update from the gradients currently stored on the tensors.

    Model parameters and each state's ``a``/``b`` take a descent step with
    weight decay; ``alpha`` takes an ascent step and is projected onto
    ``alpha >= 0``. Gradients are cleared afterwards. Returns the learning
    rate used.
    """
    lr = lr_at(epoch, cfg)
    grads = [(p, p.grad) for p in params]
    for st in states:
        grads += [(st.a, st.a.grad), (st.b, st.b.grad)]
    alpha_grads = [(st, st.alpha.grad) for st in states]
    for _, g in grads + alpha_grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise ad.NonFiniteError("pesg_step: non-finite gradient")
    for p, g in grads:
        g = np.zeros_like(p.data) if g is None else g
        p.data = p.data - lr * (g + cfg.weight_decay * p.data)
        p.grad = None
    for st, g in alpha_grads:
        if g is not None:
            st.alpha.data = np.maximum(st.alpha.data + lr * g, 0.0)
        st.alpha.grad = None
    return lr
