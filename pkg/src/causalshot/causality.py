"""Causality maps between feature maps and the feature-enhancement variants.

Feature maps are handled as ``[..., k, n, n]`` tensors. A causality map is
``[..., k, k]`` with entry ``(i, j)`` estimating ``P(F_i | F_j)``; feature ``i``
is taken as a cause of ``j`` when ``P(F_i | F_j) > P(F_j | F_i)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

SWEEP_P = (-100.0, -2.0, -1.0, 0.0, 1.0, 100.0)
VARIANTS = ("none", "mulcat", "mulcatbool", "ablation-mulcat", "ablation-mulcatbool")
DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class CausalityMethod:
    kind: str = "max"
    p: float | None = None

    def __post_init__(self):
        if self.kind not in ("max", "lehmer"):
            raise ValueError(f"unknown causality method {self.kind!r}")
        if self.kind == "max" and self.p is not None:
            raise ValueError("the max method takes no p")
        if self.kind == "lehmer":
            if self.p is None or not np.isfinite(self.p):
                raise ValueError("the lehmer method needs a finite p")
            object.__setattr__(self, "p", float(self.p))

    def __str__(self):
        return "max" if self.kind == "max" else f"lehmer(p={self.p:g})"


def normalize(maps, eps: float = DEFAULT_EPS) -> ad.Tensor:
    """Scale each image's maps by their shared global max, giving values in [0, 1)."""
    x = ad.as_tensor(maps)
    if x.ndim < 3:
        raise ad.ShapeError(f"expected [..., k, n, n] maps, got {x.shape}")
    if np.any(x.data < 0):
        raise ValueError("normalize: feature maps must be non-negative")
    peak = ad.max_reduce(x, axis=(-3, -2, -1), keepdims=True)
    return ad.div(x, ad.add(peak, eps))


def _expand(t: ad.Tensor, axis: int) -> ad.Tensor:
    shape = list(t.shape)
    shape.insert(axis % (t.ndim + 1), 1)
    return ad.reshape(t, tuple(shape))


def causality_map_max(maps) -> ad.Tensor:
    """``(max F_i * max F_j) / sum F_j``; a column whose condition map is all
    zero is set to zero."""
    f = ad.as_tensor(maps)
    peak = ad.max_reduce(f, axis=(-2, -1))
    mass = ad.sum_(f, axis=(-2, -1))
    absent = mass.data == 0
    safe_mass = ad.add(mass, absent.astype(float))
    cond = ad.mul(ad.div(peak, safe_mass), (~absent).astype(float))
    return ad.mul(_expand(peak, -1), _expand(cond, -2))


def _log_power_sum(x: ad.Tensor, q: float, eps: float) -> ad.Tensor:
    """``log(sum(x ** q))`` over the last axis via a shifted log-sum-exp.

    Zeros become ``eps`` when ``q <= 0``; for ``q > 0`` they contribute nothing.
    """
    zero = x.data == 0
    if q <= 0:
        safe = ad.add(x, zero * eps)
        keep = np.ones_like(x.data)
    else:
        safe = ad.add(x, zero.astype(float))
        keep = (~zero).astype(float)
    z = ad.mul(ad.log(safe), q)
    masked = np.where(keep > 0, z.data, -np.inf)
    shift = np.max(masked, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    terms = ad.mul(ad.exp(ad.sub(z, shift)), keep)
    total = ad.sum_(terms, axis=-1, keepdims=True)
    empty = total.data == 0
    # no positive entry with q > 0: the sum is 0, reported through the mask
    total = ad.add(total, empty.astype(float))
    out = ad.add(ad.log(total), shift)
    return ad.reshape(out, out.shape[:-1]), np.squeeze(empty, -1)


def lehmer_mean(x, p: float, eps: float = DEFAULT_EPS) -> ad.Tensor:
    """Lehmer mean ``sum(x**p) / sum(x**(p-1))`` over the last axis.

    Evaluated in log space so that ``|p| = 100`` neither overflows nor
    underflows. With ``p <= 1`` zeros are replaced by ``eps``.
    """
    x = ad.as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("lehmer_mean: empty input")
    if np.any(x.data < 0):
        raise ValueError("lehmer_mean: input must be non-negative")
    p = float(p)
    if p <= 1:
        x = ad.add(x, (x.data == 0) * eps)
    num, empty_num = _log_power_sum(x, p, eps)
    den, empty_den = _log_power_sum(x, p - 1, eps)
    out = ad.exp(ad.sub(num, den))
    if np.any(empty_num | empty_den):
        out = ad.mul(out, (~(empty_num | empty_den)).astype(float))
    return out


def causality_map_lehmer(maps, p: float, eps: float = DEFAULT_EPS) -> ad.Tensor:
    """``LM_p(F_i x F_j) / LM_p(F_j)`` over all ``n^4`` cross products.

    The power sums of the cross product factor as
    ``sum_ab (F_ia F_jb)^q = (sum_a F_ia^q)(sum_b F_jb^q)``, so only per-map
    power sums are needed. Entries are clamped to [0, 1].
    """
    f = ad.as_tensor(maps)
    p = float(p)
    flat = ad.reshape(f, f.shape[:-2] + (f.shape[-2] * f.shape[-1],))
    if p <= 1:
        flat = ad.add(flat, (flat.data == 0) * eps)
    log_sp, empty_p = _log_power_sum(flat, p, eps)
    log_sq, empty_q = _log_power_sum(flat, p - 1, eps)
    # log LM_p(F_i x F_j) = (lSp_i + lSp_j) - (lSq_i + lSq_j)
    joint = ad.sub(ad.add(_expand(log_sp, -1), _expand(log_sp, -2)),
                   ad.add(_expand(log_sq, -1), _expand(log_sq, -2)))
    cond = _expand(ad.sub(log_sp, log_sq), -2)
    cmap = ad.clip(ad.exp(ad.sub(joint, cond)), 0.0, 1.0)
    absent = empty_p | empty_q
    if np.any(absent):
        # a map with no positive entry (only possible for p > 1) carries no signal
        keep = ~(absent[..., :, None] | absent[..., None, :])
        cmap = ad.mul(cmap, keep.astype(float))
    return cmap


def causality_map(maps, method: CausalityMethod, eps: float = DEFAULT_EPS) -> ad.Tensor:
    if method.kind == "max":
        return causality_map_max(maps)
    return causality_map_lehmer(maps, method.p, eps)


def causality_factors(cmap, raw: bool = False, rtol: float = 1e-9) -> np.ndarray:
    """Count, per feature, how often it causes others minus how often it is
    caused. Negative totals are zeroed unless ``raw`` is set.

    Pairs equal to within ``rtol`` (relative) are ties and count for neither
    side, so rounding noise in algebraically equal entries is ignored.
    """
    c = ad.as_tensor(cmap).data
    if c.ndim < 2 or c.shape[-1] != c.shape[-2]:
        raise ad.ShapeError(f"causality map must be square, got {c.shape}")
    ct = np.swapaxes(c, -1, -2)
    causes = c - ct > rtol * np.maximum(np.abs(c), np.abs(ct))
    counts = causes.sum(axis=-1).astype(float) - causes.sum(axis=-2).astype(float)
    return counts if raw else np.maximum(counts, 0.0)


def _check_factors(maps: ad.Tensor, factors: np.ndarray) -> np.ndarray:
    factors = np.asarray(factors, dtype=float)
    k = maps.shape[-3]
    if factors.shape[-1] != k:
        raise ad.ShapeError(f"factor vector length {factors.shape[-1]} != {k} maps")
    if np.any(factors < 0):
        raise ValueError("causality factors must be non-negative")
    return factors


def mulcat(maps, factors) -> ad.Tensor:
    """Concatenate ``[maps | maps * factors]`` along the channel axis.

    ``factors`` is ``[k]`` or ``[B, k]`` and is treated as a constant.
    """
    x = ad.as_tensor(maps)
    w = _check_factors(x, factors)
    weighted = ad.mul(x, w[..., :, None, None])
    return ad.concat([x, weighted], axis=-3)


def mulcatbool(maps, factors) -> ad.Tensor:
    x = ad.as_tensor(maps)
    w = _check_factors(x, factors)
    return mulcat(x, (w > 0).astype(float))


def ablation_factors(k: int, mode: str, rng_seed: int) -> np.ndarray:
    """Random stand-in factors: integers in ``[0, k-1]`` or bits."""
    if k < 1:
        raise ValueError("k must be positive")
    rng = np.random.default_rng(rng_seed)
    if mode == "mulcat":
        return rng.integers(0, k, size=k).astype(float)
    if mode == "mulcatbool":
        return rng.integers(0, 2, size=k).astype(float)
    raise ValueError(f"unknown ablation mode {mode!r}")


def enhance(maps, variant: str, method: CausalityMethod | None = None,
            fixed_factors=None, eps: float = DEFAULT_EPS):
    """Apply one of the model variants to raw ``[B, k, n, n]`` maps.

    Returns ``(features, cmap, factors)``; ``cmap`` is ``None`` for the
    baseline and the ablations.
    """
    x = ad.as_tensor(maps)
    if variant == "none":
        return x, None, None
    if variant.startswith("ablation-"):
        if fixed_factors is None:
            raise ValueError("ablation variants need a fixed factor vector")
        factors = np.broadcast_to(np.asarray(fixed_factors, dtype=float), x.shape[:-2])
        op = mulcat if variant == "ablation-mulcat" else mulcatbool
        return op(x, factors), None, factors
    if variant not in ("mulcat", "mulcatbool"):
        raise ValueError(f"unknown variant {variant!r}")
    cmap = causality_map(normalize(x, eps), method or CausalityMethod(), eps)
    factors = causality_factors(cmap)
    op = mulcat if variant == "mulcat" else mulcatbool
    return op(x, factors), cmap, factors


def write_matrix_csv(path, matrix) -> None:
    """One CSV row per matrix row; for a causality map row ``i`` holds P(F_i | F_j)."""
    m = np.atleast_2d(ad.as_tensor(matrix).data)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in m:
            writer.writerow([repr(float(v)) for v in row])


def write_factors_csv(path, factors) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "factor"])
        for i, v in enumerate(np.asarray(factors, dtype=float).reshape(-1)):
            writer.writerow([i, repr(float(v))])
