"""Brownian distance covariance pooling and prototype scoring."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def bdc_matrix(features) -> ad.Tensor:
    """Double-centred channel distance matrix of ``[..., c, h, w]`` features.

    Each channel's flattened spatial values form one observation row; the
    Euclidean distances between rows are double-centred. Returns
    ``[..., c, c]``.
    """
    x = ad.as_tensor(features)
    if x.ndim < 3:
        raise ad.ShapeError(f"expected [..., c, h, w] features, got {x.shape}")
    d = x.shape[-1] * x.shape[-2]
    if d < 2:
        raise ad.ShapeError("bdc_matrix needs at least two spatial positions")
    rows = ad.reshape(x, x.shape[:-2] + (d,))
    dist = ad.pairwise_distances(rows)
    row_mean = ad.mean(dist, axis=-1, keepdims=True)
    col_mean = ad.mean(dist, axis=-2, keepdims=True)
    grand = ad.mean(dist, axis=(-2, -1), keepdims=True)
    return ad.add(ad.sub(ad.sub(dist, row_mean), col_mean), grand)


def unit_frobenius(matrices, eps: float = 1e-12) -> ad.Tensor:
    """Scale each ``[..., c, c]`` matrix to unit Frobenius norm."""
    m = ad.as_tensor(matrices)
    norm = ad.sqrt(ad.add(ad.sum_(ad.pow_scalar(m, 2), axis=(-2, -1), keepdims=True), eps))
    return ad.div(m, norm)


@dataclass
class Prototype:
    matrix: ad.Tensor
    class_id: object


def prototype(support_matrices, class_id=None) -> Prototype:
    """Elementwise mean of one class's support BDC matrices."""
    mats = [ad.as_tensor(m) for m in support_matrices]
    if not mats:
        raise ValueError("prototype needs at least one support matrix")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ad.ShapeError("support matrices differ in shape")
    if len(mats) == 1:
        return Prototype(mats[0], class_id)
    return Prototype(ad.mean(ad.stack(mats, axis=0), axis=0), class_id)


def score(query, prototypes) -> ad.Tensor:
    """Frobenius inner products of query BDC matrices with each prototype.

    ``query`` is ``[c, c]`` or ``[Q, c, c]``; ``prototypes`` is a list of
    :class:`Prototype` (or matrices) or an ``[N, c, c]`` tensor. Returns
    ``[N]`` or ``[Q, N]``; larger means more similar.
    """
    q = ad.as_tensor(query)
    if isinstance(prototypes, (list, tuple)):
        mats = [p.matrix if isinstance(p, Prototype) else ad.as_tensor(p) for p in prototypes]
        protos = ad.stack(mats, axis=0)
    else:
        protos = ad.as_tensor(prototypes)
    single = q.ndim == 2
    if single:
        q = ad.reshape(q, (1,) + q.shape)
    if protos.ndim != 3 or q.shape[1:] != protos.shape[1:]:
        raise ad.ShapeError(f"query {q.shape[1:]} vs prototypes {protos.shape}")
    c2 = protos.shape[1] * protos.shape[2]
    s = ad.matmul(ad.reshape(q, (q.shape[0], c2)), ad.transpose(ad.reshape(protos, (protos.shape[0], c2))))
    return ad.reshape(s, (s.shape[1],)) if single else s


def write_bdc_csv(path, matrix) -> None:
    m = ad.as_tensor(matrix).data
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(m):
            writer.writerow([repr(float(v)) for v in row])
