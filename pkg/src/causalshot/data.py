"""Synthetic planted-causality scenes and slice preprocessing.

Each scene holds a bright blob ``A`` and, only when ``A`` is present, a
fainter blob ``B`` placed relative to ``A``. The offset direction of ``B``
follows the primary Gleason pattern and its brightness follows the ISUP
group, so the fine (GS) and coarse (ISUP, LG/HG) labels are all encoded.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

GS_CLASSES = ("3+4", "4+3", "4+4", "3+5", "5+3", "4+5", "5+4", "5+5")
GS_TO_ISUP = {"3+4": 2, "4+3": 3, "4+4": 4, "3+5": 4, "5+3": 4, "4+5": 5, "5+4": 5, "5+5": 5}
ISUP_CLASSES = (2, 3, 4, 5)
GRADES = ("LG", "HG")
# ISUP groups equally likely, GS uniform inside a group
DEFAULT_GS_PROBS = (0.25, 0.25) + (0.25 / 3,) * 6

# offset of B from A by primary pattern (rows, cols), in units of the spacing
_DIRECTIONS = {3: (0.0, 1.0), 4: (1.0, 0.0), 5: (-math.sqrt(0.5), math.sqrt(0.5))}
_B_INTENSITY = {2: 0.25, 3: 0.45, 4: 0.65, 5: 0.85}

REFERENCE_SPLIT_COUNTS = {"train": 1611, "val": 200, "test": 238}


def isup_to_grade(isup: int) -> str:
    if isup not in ISUP_CLASSES:
        raise ValueError(f"ISUP group {isup} outside 2..5")
    return "LG" if isup == 2 else "HG"


@dataclass
class LabeledImage:
    pixels: np.ndarray
    gs_label: str
    patient_id: str
    subset: str = "train"
    boxes: list = field(default_factory=list)
    mask: np.ndarray | None = None
    image_id: str = ""

    def __post_init__(self):
        if self.gs_label not in GS_TO_ISUP:
            raise ValueError(f"unknown Gleason score {self.gs_label!r}")

    @property
    def isup_label(self) -> int:
        return GS_TO_ISUP[self.gs_label]

    @property
    def grade_label(self) -> str:
        return isup_to_grade(self.isup_label)


@dataclass
class SyntheticSceneSpec:
    image_size: int = 32
    n_classes: int = 8
    gs_probs: tuple = DEFAULT_GS_PROBS
    noise_level: float = 0.05
    domain_shift: float = 0.3
    background_level: float = 0.3
    blob_sigma: float = 1.2
    spacing: float = 6.0

    def __post_init__(self):
        self.gs_probs = tuple(float(p) for p in self.gs_probs)
        if self.n_classes != len(GS_CLASSES) or len(self.gs_probs) != self.n_classes:
            raise ValueError("the generator emits exactly the 8 Gleason classes")
        if abs(sum(self.gs_probs) - 1.0) > 1e-9 or min(self.gs_probs) < 0:
            raise ValueError("gs_probs must be a probability vector")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.noise_level < 0 or self.domain_shift < 0:
            raise ValueError("noise_level and domain_shift must be non-negative")


@dataclass
class SceneParams:
    """Everything needed to re-render one scene, with or without its artifacts."""

    gs_label: str
    a_center: tuple
    b_center: tuple
    a_amp: float
    b_amp: float
    sigma: float
    gland_center: tuple
    gland_axes: tuple
    texture: np.ndarray
    noise: np.ndarray
    shift: float = 0.0


def _blob(size: int, center, sigma: float, amp: float) -> np.ndarray:
    r = np.arange(size)[:, None] - center[0]
    c = np.arange(size)[None, :] - center[1]
    return amp * np.exp(-(r * r + c * c) / (2 * sigma * sigma))


def _texture(rng, size: int, level: float, freq: float) -> np.ndarray:
    # a few random low-frequency plane waves
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((size, size))
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        k = freq * rng.uniform(0.5, 1.5) * 2 * np.pi / size
        out += np.cos(k * (np.cos(theta) * rr + np.sin(theta) * cc) + phase)
    return level * (out / 6.0 + 0.5)


def gland_mask(size: int, center, axes) -> np.ndarray:
    r = (np.arange(size)[:, None] - center[0]) / axes[0]
    c = (np.arange(size)[None, :] - center[1]) / axes[1]
    return (r * r + c * c) <= 1.0


def render_scene(params: SceneParams, size: int, drop: str | None = None) -> np.ndarray:
    """Render a scene; ``drop`` removes artifact ``"A"`` or ``"B"``.

    B exists only as a consequence of A, so dropping A removes both.
    """
    if drop not in (None, "A", "B"):
        raise ValueError("drop must be None, 'A' or 'B'")
    img = params.texture.copy()
    img += 0.15 * gland_mask(size, params.gland_center, params.gland_axes)
    if drop != "A":
        img += _blob(size, params.a_center, params.sigma, params.a_amp)
        if drop != "B":
            img += _blob(size, params.b_center, params.sigma, params.b_amp)
    img = img * (1.0 + params.shift) + 0.5 * params.shift
    return img + params.noise


def artifact_present(params: SceneParams, size: int, which: str, drop: str | None = None) -> bool:
    """Whether artifact ``which`` is visible in the scene rendered with ``drop``.

    Measured on pixels: the artifact is present when removing it as well
    changes the image at its centre by more than half its amplitude.
    """
    if which not in ("A", "B"):
        raise ValueError("which must be 'A' or 'B'")
    further = "A" if which == "A" or drop == "A" else "B"
    diff = render_scene(params, size, drop) - render_scene(params, size, further)
    center = params.a_center if which == "A" else params.b_center
    r, c = int(round(center[0])), int(round(center[1]))
    amp = params.a_amp if which == "A" else params.b_amp
    return bool(abs(diff[r, c]) > 0.5 * amp * (1.0 + params.shift))


def _sample_params(spec: SyntheticSceneSpec, gs: str, style: dict, rng, shifted: bool) -> SceneParams:
    size = spec.image_size
    isup = GS_TO_ISUP[gs]
    primary = int(gs[0])
    gc, ax = style["gland_center"], style["gland_axes"]
    # keep A inside the gland with room for B on any side
    margin = spec.spacing + 3 * spec.blob_sigma
    lo = np.maximum(np.array(gc) - np.array(ax) * 0.5, margin)
    hi = np.minimum(np.array(gc) + np.array(ax) * 0.5, size - 1 - margin)
    a = tuple(rng.uniform(lo, np.maximum(hi, lo + 1e-9)))
    dr, dc = _DIRECTIONS[primary]
    b = (a[0] + spec.spacing * dr, a[1] + spec.spacing * dc)
    shift = spec.domain_shift if shifted else 0.0
    freq = style["freq"] * (1.0 + 2.0 * shift)
    texture = _texture(rng, size, spec.background_level, freq)
    noise = rng.normal(0.0, spec.noise_level, (size, size)) if spec.noise_level > 0 else np.zeros((size, size))
    return SceneParams(
        gs_label=gs, a_center=a, b_center=b, a_amp=1.0, b_amp=_B_INTENSITY[isup],
        sigma=spec.blob_sigma, gland_center=gc, gland_axes=ax, texture=texture, noise=noise, shift=shift,
    )


def _boxes(params: SceneParams, size: int) -> list:
    half = 2.5 * params.sigma
    out = []
    for cr, cc in (params.a_center, params.b_center):
        out.append([max(0, int(math.floor(cr - half))), max(0, int(math.floor(cc - half))),
                    min(size, int(math.ceil(cr + half)) + 1), min(size, int(math.ceil(cc + half)) + 1)])
    return out


def _quota(probs, count: int) -> np.ndarray:
    # largest-remainder allocation keeps the label mix exact up to rounding
    raw = np.asarray(probs) * count
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    base[order[: count - base.sum()]] += 1
    return base


def generate_synthetic(spec: SyntheticSceneSpec, count: int, rng, subset: str = "train",
                       with_params: bool = False, patient_prefix: str = "P"):
    """Generate ``count`` labelled scenes grouped into synthetic patients.

    Each patient contributes 4-8 scenes with one Gleason score and a shared
    gland shape and texture frequency. Scenes for ``val``/``test`` receive
    the domain shift.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    size = spec.image_size
    shifted = subset in ("val", "test")
    labels = np.repeat(np.arange(len(GS_CLASSES)), _quota(spec.gs_probs, count))
    images, params_out = [], []
    pid = 0
    for cls in range(len(GS_CLASSES)):
        remaining = int((labels == cls).sum())
        while remaining > 0:
            n_scenes = min(remaining, int(rng.integers(4, 9)))
            remaining -= n_scenes
            style = {
                "gland_center": (size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2)),
                "gland_axes": (size * rng.uniform(0.3, 0.4), size * rng.uniform(0.3, 0.4)),
                "freq": rng.uniform(1.0, 2.0),
            }
            patient = f"{patient_prefix}{pid:05d}"
            pid += 1
            for _ in range(n_scenes):
                p = _sample_params(spec, GS_CLASSES[cls], style, rng, shifted)
                img = LabeledImage(
                    pixels=render_scene(p, size), gs_label=GS_CLASSES[cls], patient_id=patient,
                    subset=subset, boxes=_boxes(p, size),
                    mask=gland_mask(size, p.gland_center, p.gland_axes),
                )
                images.append(img)
                params_out.append(p)
    order = rng.permutation(len(images))
    images = [images[i] for i in order]
    params_out = [params_out[i] for i in order]
    for i, img in enumerate(images):
        img.image_id = f"{subset}-{i:05d}"
    return (images, params_out) if with_params else images


def generate_dataset(spec: SyntheticSceneSpec, counts: dict, seed: int) -> list:
    """Train/val/test scenes with disjoint synthetic patients."""
    out = []
    for i, subset in enumerate(("train", "val", "test")):
        rng = np.random.default_rng([seed, i])
        out.extend(generate_synthetic(spec, counts[subset], rng, subset=subset, patient_prefix=f"{subset[:2]}"))
    return out


# -- real-slice preprocessing ------------------------------------------------

@dataclass
class VolumeMeta:
    px: float
    py: float
    patient_id: str = ""
    gs_label: str | None = None

    def __post_init__(self):
        if self.px <= 0 or self.py <= 0:
            raise ValueError("pixel spacing must be positive")


def fov_shape(meta: VolumeMeta, fov_mm: float = 100.0) -> tuple:
    """``(N_rows, N_cols)`` covering ``fov_mm`` at the slice's pixel spacing."""
    return int(round(fov_mm / meta.py)), int(round(fov_mm / meta.px))


def crop_fov(slice_, mask, meta: VolumeMeta, fov_mm: float = 100.0):
    """Crop a fixed physical field of view centred on the mask centroid.

    Regions outside the slice are zero-padded. Returns ``None`` (with a
    warning) when the mask is empty.
    """
    img = np.asarray(slice_, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape:
        raise ValueError("mask and slice shapes differ")
    if not mask.any():
        log.warning("empty mask for patient %s; slice skipped", meta.patient_id or "?")
        return None
    rows, cols = fov_shape(meta, fov_mm)
    rr, cc = np.nonzero(mask)
    cr, cc_ = rr.mean(), cc.mean()
    r0 = int(round(cr - (rows - 1) / 2))
    c0 = int(round(cc_ - (cols - 1) / 2))
    out = np.zeros((rows, cols))
    sr0, sc0 = max(r0, 0), max(c0, 0)
    sr1, sc1 = min(r0 + rows, img.shape[0]), min(c0 + cols, img.shape[1])
    if sr1 > sr0 and sc1 > sc0:
        out[sr0 - r0:sr1 - r0, sc0 - c0:sc1 - c0] = img[sr0:sr1, sc0:sc1]
    return out


def resize(slice_, target: int = 128) -> np.ndarray:
    """Bilinear resample to ``target x target`` (pixel centres aligned)."""
    img = np.asarray(slice_, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("resize needs a non-empty 2-D slice")
    h, w = img.shape
    if (h, w) == (target, target):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.floor(x).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    r0, r1, fr = coords(h, target)
    c0, c1, fc = coords(w, target)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def zscore_volume(volume) -> np.ndarray:
    vol = np.asarray(volume, dtype=float)
    sd = vol.std()
    if not sd > 0:
        raise ValueError("zscore_volume: volume has zero standard deviation")
    return (vol - vol.mean()) / sd


def split_patients(images, ratios=(0.8, 0.1, 0.1), rng=0) -> dict:
    """Assign whole patients to train/val/test and tag ``image.subset``."""
    if any(not getattr(im, "patient_id", "") for im in images):
        raise ValueError("every image needs a patient_id")
    patients = sorted({im.patient_id for im in images})
    if len(patients) < 3:
        raise ValueError("need at least three patients for three non-empty subsets")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    order = [patients[i] for i in rng.permutation(len(patients))]
    counts = _quota(np.asarray(ratios, dtype=float) / np.sum(ratios), len(patients))
    if np.any(counts == 0):
        # borrow from the largest subset so none stays empty
        for i in np.nonzero(counts == 0)[0]:
            counts[int(np.argmax(counts))] -= 1
            counts[i] = 1
    assignment = {}
    start = 0
    for name, c in zip(("train", "val", "test"), counts):
        for pid in order[start:start + c]:
            assignment[pid] = name
        start += c
    out = {"train": [], "val": [], "test": []}
    for im in images:
        im.subset = assignment[im.patient_id]
        out[im.subset].append(im)
    return out


# -- on-disk format ----------------------------------------------------------

def save_dataset(images, directory, spec: SyntheticSceneSpec | None = None, seed: int | None = None) -> Path:
    """Write ``manifest.jsonl`` plus one raw little-endian float64 file per image."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for im in images:
        rel = f"images/{im.image_id}.f64"
        (directory / rel).write_bytes(np.ascontiguousarray(im.pixels, dtype="<f8").tobytes())
        rec = {
            "image_id": im.image_id, "file": rel, "shape": list(im.pixels.shape),
            "gs_label": im.gs_label, "isup_label": im.isup_label, "grade_label": im.grade_label,
            "patient_id": im.patient_id, "subset": im.subset, "boxes": im.boxes,
        }
        if im.mask is not None:
            mrel = f"images/{im.image_id}.mask.u8"
            (directory / mrel).write_bytes(np.asarray(im.mask, dtype=np.uint8).tobytes())
            rec["mask_file"] = mrel
        lines.append(json.dumps(rec, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"count": len(images)}
    if spec is not None:
        meta["spec"] = asdict(spec)
    if seed is not None:
        meta["seed"] = seed
    (directory / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return directory


def load_dataset(directory) -> list:
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    images = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        pix = np.frombuffer((directory / rec["file"]).read_bytes(), dtype="<f8").reshape(rec["shape"]).copy()
        mask = None
        if "mask_file" in rec:
            mask = np.frombuffer((directory / rec["mask_file"]).read_bytes(), dtype=np.uint8)
            mask = mask.reshape(rec["shape"]).astype(bool)
        images.append(LabeledImage(pixels=pix, gs_label=rec["gs_label"], patient_id=rec["patient_id"],
                                   subset=rec["subset"], boxes=rec.get("boxes", []), mask=mask,
                                   image_id=rec["image_id"]))
    return images


def manifest_hash(directory) -> str:
    """SHA-256 over the manifest and every referenced file."""
    directory = Path(directory)
    h = hashlib.sha256()
    manifest = (directory / "manifest.jsonl").read_bytes()
    h.update(manifest)
    for line in manifest.decode().splitlines():
        rec = json.loads(line)
        for key in ("file", "mask_file"):
            if key in rec:
                h.update((directory / rec[key]).read_bytes())
    return h.hexdigest()
