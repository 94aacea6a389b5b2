"""Grad-CAM heatmaps taken at the input of the BDC pooling."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import bdc
from .data import resize

log = logging.getLogger(__name__)

PANEL_VARIANTS = ("baseline", "mulcat", "mulcatbool")

# viridis sampled at 9 evenly spaced stops; expanded to 256 entries below
_STOPS = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
    [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
], dtype=float)
_x = np.linspace(0.0, 1.0, len(_STOPS))
_t = np.linspace(0.0, 1.0, 256)
LUT = np.stack([np.interp(_t, _x, _STOPS[:, ch]) for ch in range(3)], axis=1).round().astype(np.uint8)


@dataclass
class Heatmap:
    values: np.ndarray
    target_class: int
    model_variant: str
    zero: bool = False


def variant_name(net) -> str:
    return "baseline" if net.variant == "none" else net.variant


def cam_from_gradients(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """``ReLU(sum_c mean(grad_c) * A_c)`` for ``[c, h, w]`` activations."""
    weights = grads.mean(axis=(-2, -1))
    return np.maximum(np.tensordot(weights, acts, axes=(0, 0)), 0.0)


def grad_cam(net, image, prototypes, target_class: int, size: int | None = None) -> Heatmap:
    """Heatmap for ``target_class`` from the BDC similarity to its prototype.

    ``prototypes`` holds the class prototypes as an ``[N, c, c]`` array (for
    instance the mean support BDC matrices of an episode). The gradient is
    taken with respect to the feature set that enters the pooling, so a
    causality model contributes all of its ``2k`` enhanced maps.
    """
    pixels = np.asarray(getattr(image, "pixels", image), dtype=float)
    if pixels.ndim != 2:
        raise ValueError("grad_cam expects a single 2-D image")
    protos = np.asarray(prototypes, dtype=float)
    if not 0 <= target_class < len(protos):
        raise ValueError(f"target_class {target_class} outside 0..{len(protos) - 1}")
    size = size or pixels.shape[0]
    params = net.parameters()
    keep = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        feats = net.features(pixels[None, None]).data[0]
    finally:
        for p, k in zip(params, keep):
            p.requires_grad = k
    if protos.shape[1:] != (feats.shape[0], feats.shape[0]):
        raise ad.ShapeError(f"prototypes {protos.shape} do not match {feats.shape[0]} channels")
    leaf = ad.Tensor(feats, requires_grad=True)
    mat = bdc.bdc_matrix(leaf)
    if net.unit_norm:
        mat = bdc.unit_frobenius(mat)
    target = ad.sum_(ad.mul(mat, protos[target_class]))
    target.backward()
    cam = cam_from_gradients(feats, leaf.grad)
    up = np.maximum(resize(cam, size), 0.0)
    peak = up.max()
    if not peak > 0:
        return Heatmap(np.zeros((size, size)), target_class, variant_name(net), zero=True)
    return Heatmap(up / peak, target_class, variant_name(net))


def box_mass(values, boxes) -> float:
    """Fraction of heatmap mass inside the union of ``[r0, c0, r1, c1]`` boxes."""
    v = np.asarray(values, dtype=float)
    total = v.sum()
    if not total > 0:
        return 0.0
    inside = np.zeros(v.shape, dtype=bool)
    for r0, c0, r1, c1 in boxes:
        inside[r0:r1, c0:c1] = True
    return float(v[inside].sum() / total)


def _gray_tile(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    g = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    return np.repeat((g * 255).round().astype(np.uint8)[..., None], 3, axis=2)


def _color_tile(values) -> np.ndarray:
    idx = (np.clip(values, 0.0, 1.0) * 255).round().astype(int)
    return LUT[idx]


def _absent_tile(size: int) -> np.ndarray:
    tile = np.full((size, size, 3), 96, dtype=np.uint8)
    d = np.arange(size)
    tile[d, d] = tile[d, size - 1 - d] = 200
    return tile


def comparison_panel(out_dir, case_id, image, mask, heatmaps: dict, scale: int = 4,
                     correct: dict | None = None) -> Path:
    """Write a 5-column PNG (input, mask, baseline, mulcat, mulcatbool).

    A variant missing from ``heatmaps`` is drawn as a crossed grey tile; a
    zero heatmap is drawn blank. Both cases, and per-variant correctness
    when ``correct`` is given, are encoded in the file name.
    """
    pixels = np.asarray(getattr(image, "pixels", image), dtype=float)
    size = pixels.shape[0]
    cols = [_gray_tile(pixels), _gray_tile(np.asarray(mask, dtype=float))]
    flags = []
    for name in PANEL_VARIANTS:
        hm = heatmaps.get(name)
        if hm is None:
            cols.append(_absent_tile(size))
            flags.append(f"absent-{name}")
            continue
        if hm.values.shape != pixels.shape:
            raise ad.ShapeError(f"{name} heatmap {hm.values.shape} vs image {pixels.shape}")
        if hm.zero:
            flags.append(f"zero-{name}")
            cols.append(np.full((size, size, 3), 255, dtype=np.uint8))
        else:
            cols.append(_color_tile(hm.values))
        if correct is not None and name in correct:
            flags.append(f"{name}-{'ok' if correct[name] else 'wrong'}")
    sep = np.full((size, 1, 3), 255, dtype=np.uint8)
    strip = np.concatenate([c for col in cols for c in (col, sep)][:-1], axis=1)
    strip = np.kron(strip, np.ones((scale, scale, 1), dtype=np.uint8))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = f"case-{case_id}" + "".join(f"_{f}" for f in flags) + ".png"
    path = out_dir / name
    Image.fromarray(strip).save(path, format="PNG", optimize=False)
    return path


def episode_prototypes(net, support_images, support_labels, way: int) -> np.ndarray:
    mats = net.embed(support_images)
    labels = np.asarray(support_labels)
    return np.stack([mats[labels == c].mean(axis=0) for c in range(way)])
