"""Synthetic multi-domain benchmark with scanner-like intensity shifts.

Each breast is one patient with a latent lesion rendered twice (CC and MLO
views) on independent tissue textures. Classes: negative is textured
background only, benign adds a smooth circular blob, malignant adds an
irregular spiculated blob. The per-domain intensity transform is applied
last: pixel <- gain * pixel^gamma_exp + offset + N(0, sigma), so domains
with identical seeds differ exactly by that map.

Also hosts the image-standardization pipeline (orientation, background
zeroing, resize, zero-mean/unit-variance), the high-range histogram fix,
the training augmentations, and ratio-controlled batch composition.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .tensor import load_tensor, save_tensor

__all__ = [
    "DomainSpec",
    "SampleRecord",
    "DomainDataset",
    "AugmentConfig",
    "Batch",
    "BatchComposer",
    "DEFAULT_COUNTS",
    "generate",
    "preprocess",
    "histogram_fix",
    "augment",
    "compose_batch",
    "save_dataset",
    "load_dataset",
    "label_vector",
]

log = logging.getLogger("bnshift.datagen")

CLASSES = ("negative", "benign", "malignant")
SPLITS = ("train", "val", "test")

# 2000 / 250 / 250 images (two views per breast), negatives train-only,
# test kept balanced so the PR-AUC chance baseline sits at 0.50.
DEFAULT_COUNTS = {
    "train": {"benign": 250, "malignant": 250, "negative": 500},
    "val": {"benign": 63, "malignant": 62},
    "test": {"benign": 63, "malignant": 62},
}


@dataclass
class DomainSpec:
    """Intensity-transform parameters standing in for one scanner vendor."""

    name: str
    gain: float = 1.0
    offset: float = 0.0
    gamma_exp: float = 1.0
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError(f"gain must be positive, got {self.gain}")
        if self.gamma_exp <= 0:
            raise ValueError(f"gamma exponent must be positive, got {self.gamma_exp}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")


@dataclass
class SampleRecord:
    patient_id: str
    study_id: str
    side: str
    view: str
    label: str
    domain: str
    split: str
    image_index: int


@dataclass
class DomainDataset:
    spec: DomainSpec
    image_size: int
    records: list
    images: np.ndarray  # [M, 1, H, W]

    def indices(self, split, label=None):
        return [
            i
            for i, r in enumerate(self.records)
            if r.split == split and (label is None or r.label == label)
        ]

    def split_records(self, split):
        return [r for r in self.records if r.split == split]


def label_vector(label):
    """Multi-label target [benign, malignant]; negatives are all-zero."""
    return {
        "negative": np.array([0.0, 0.0]),
        "benign": np.array([1.0, 0.0]),
        "malignant": np.array([0.0, 1.0]),
    }[label]


# -- rendering ---------------------------------------------------------------


def _texture(rng, size):
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16.0)
    span = field.max() - field.min()
    field = (field - field.min()) / span if span > 0 else np.zeros_like(field)
    # tissue sits against the left edge; intensity falls off to the right
    ramp = np.linspace(1.0, 0.15, size)[None, :]
    return (0.15 + 0.35 * field) * ramp


def _grid(size):
    return np.meshgrid(np.arange(size), np.arange(size), indexing="ij")


def _blob(size, center, radius, amp):
    rr, cc = _grid(size)
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    return amp * np.exp(-d2 / (2.0 * radius**2))

def _spiculated(size, center, radius, amp, angles, lengths, widths):
    rr, cc = _grid(size)
    img = _blob(size, center, radius, amp)
    dr, dc = rr - center[0], cc - center[1]
    for theta, length, width in zip(angles, lengths, widths):
        along = dr * math.cos(theta) + dc * math.sin(theta)
        across = -dr * math.sin(theta) + dc * math.cos(theta)
        ray = (along >= 0) & (along <= length)
        taper = np.clip(1.0 - along / length, 0.0, 1.0)
        img += np.where(ray, 0.8 * amp * taper * np.exp(-(across**2) / (2.0 * width**2)), 0.0)
    return img


@dataclass
class _Lesion:
    center: tuple
    radius: float
    amp: float
    angles: np.ndarray
    lengths: np.ndarray
    widths: np.ndarray


def _sample_lesion(rng, size, malignant):
    px = size / 64.0
    center = (
        rng.uniform(0.2 * size, 0.8 * size),
        rng.uniform(0.12 * size, 0.55 * size),
    )
    if malignant:
        radius = rng.uniform(3.0, 5.5) * px
        n_spikes = int(rng.integers(6, 12))
        angles = rng.uniform(0.0, 2.0 * math.pi, n_spikes)
        lengths = rng.uniform(1.8, 3.2, n_spikes) * radius
        widths = rng.uniform(0.6, 1.1, n_spikes) * px
    else:
        radius = rng.uniform(4.5, 7.5) * px
        angles = np.empty(0)
        lengths = np.empty(0)
        widths = np.empty(0)
    amp = rng.uniform(0.38, 0.55)
    return _Lesion(center, radius, amp, angles, lengths, widths)


def _render_view(rng, size, label, lesion):
    img = _texture(rng, size)
    if label != "negative":
        jitter = rng.uniform(-2.0, 2.0, size=2) * (size / 64.0)
        center = (lesion.center[0] + jitter[0], lesion.center[1] + jitter[1])
        radius = lesion.radius * rng.uniform(0.9, 1.1)
        amp = lesion.amp * rng.uniform(0.9, 1.1)
        if label == "malignant":
            angles = lesion.angles + rng.uniform(-0.3, 0.3)
            img += _spiculated(size, center, radius, amp, angles, lesion.lengths, lesion.widths)
        else:
            img += _blob(size, center, radius, amp)
    return np.clip(img, 0.0, 1.0)


def _apply_domain(img, spec, rng):
    out = spec.gain * img**spec.gamma_exp + spec.offset
    return out + rng.normal(0.0, spec.noise_sigma, size=img.shape)


def _interleaved_labels(class_counts):
    remaining = {c: int(class_counts.get(c, 0)) for c in CLASSES}
    cycle = ("benign", "malignant", "negative", "negative")
    order = []
    while any(remaining.values()):
        progressed = False
        for label in cycle:
            if remaining[label] > 0:
                order.append(label)
                remaining[label] -= 1
                progressed = True
        if not progressed:
            break
    return order


def generate(spec, counts=None, image_size=64):
    """Render one domain's dataset. Patients never straddle splits."""
    if image_size < 32:
        raise ValueError(f"image size must be >= 32, got {image_size}")
    counts = counts if counts is not None else DEFAULT_COUNTS
    for split, per_class in counts.items():
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        for label, k in per_class.items():
            if label not in CLASSES or int(k) < 1:
                raise ValueError(f"invalid count {label}={k} in split {split!r}")

    records, images = [], []
    breast_idx = 0
    for split in SPLITS:
        for label in _interleaved_labels(counts.get(split, {})):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, breast_idx]))
            lesion = _sample_lesion(rng, image_size, label == "malignant")
            patient = f"{spec.name}-P{breast_idx:05d}"
            study = f"{spec.name}-S{breast_idx:05d}"
            for view in ("CC", "MLO"):
                img = _render_view(rng, image_size, label, lesion)
                img = _apply_domain(img, spec, rng)
                records.append(
                    SampleRecord(patient, study, "L", view, label, spec.name, split, len(images))
                )
                images.append(img[None, :, :])
            breast_idx += 1
    return DomainDataset(spec, image_size, records, np.stack(images))


# -- standardization pipeline -------------------------------------------------


def _plane(image):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        return arr[0], True
    if arr.ndim == 2:
        return arr, False
    raise ValueError(f"expected a [H,W] or [1,H,W] image, got shape {arr.shape}")


def _restore(plane, had_channel):
    return plane[None, :, :] if had_channel else plane


def preprocess(image, size=None):
    """Orient left, zero outside the object bounding box, resize, standardize.

    Orientation compares absolute mass of the left and right halves and
    mirrors right-heavy images. Standardization brings the whole image to
    zero mean and unit variance; constant images are rejected.
    """
    plane, had_channel = _plane(image)
    if plane.size == 0:
        raise ValueError("empty image")
    half = plane.shape[1] // 2
    if np.abs(plane[:, :half]).sum() < np.abs(plane[:, plane.shape[1] - half :]).sum():
        plane = plane[:, ::-1]
    plane = _zero_outside_bbox(plane)
    if size is not None and plane.shape != (size, size):
        plane = ndimage.zoom(
            plane, (size / plane.shape[0], size / plane.shape[1]), order=1, mode="nearest"
        )
    var = plane.var()
    if var == 0:
        raise ValueError("constant image cannot be standardized")
    plane = (plane - plane.mean()) / math.sqrt(var)
    return _restore(np.ascontiguousarray(plane), had_channel)


def _zero_outside_bbox(plane):
    nz = np.nonzero(plane)
    if nz[0].size == 0:
        return plane
    r0, r1 = nz[0].min(), nz[0].max() + 1
    c0, c1 = nz[1].min(), nz[1].max() + 1
    out = np.zeros_like(plane)
    out[r0:r1, c0:c1] = plane[r0:r1, c0:c1]
    return out


def histogram_fix(image, trigger_threshold=5000.0, low_pct=1.0, high_pct=99.9):
    """Rescale images whose raw range runs far above the usual one.

    If the maximum exceeds the trigger: zero pixels outside the object
    bounding box, subtract the low percentile from everything, then clip
    above the high percentile of the shifted image. Below the trigger the
    image passes through untouched.
    """
    if not 0.0 < low_pct < high_pct <= 100.0:
        raise ValueError(f"invalid percentile pair ({low_pct}, {high_pct})")
    plane, had_channel = _plane(image)
    if plane.max() <= trigger_threshold:
        return _restore(plane.copy(), had_channel)
    plane = _zero_outside_bbox(plane)
    plane = plane - np.percentile(plane, low_pct)
    plane = np.minimum(plane, np.percentile(plane, high_pct))
    return _restore(plane, had_channel)


# -- augmentation ----------------------------------------------------------------


@dataclass
class AugmentConfig:
    noise_sigma: float = 0.005
    flip_p: float = 0.5
    rotation_deg: float = 15.0
    translation_frac: float = 0.1
    shear_deg: float = 25.0
    scale_range: tuple = (0.8, 1.6)


def augment(image, rng, cfg=None):
    """One random draw of the training augmentations (bilinear, zero fill)."""
    cfg = cfg or AugmentConfig()
    plane, had_channel = _plane(image)
    size = np.array(plane.shape, dtype=np.float64)
    theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    shear = math.radians(rng.uniform(-cfg.shear_deg, cfg.shear_deg))
    s = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(0.0, cfg.translation_frac, size=2) * size
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shr = np.array([[1.0, math.tan(shear)], [0.0, 1.0]])
    fwd = rot @ shr * s
    if not np.allclose(fwd, np.eye(2)) or shift.any():
        center = (size - 1.0) / 2.0
        inv = np.linalg.inv(fwd)
        offset = center - inv @ (center + shift)
        plane = ndimage.affine_transform(plane, inv, offset=offset, order=1, mode="constant", cval=0.0)
    if rng.random() < cfg.flip_p:
        plane = plane[:, ::-1]
    plane = plane + rng.normal(0.0, cfg.noise_sigma, size=plane.shape)
    return _restore(np.ascontiguousarray(plane), had_channel)


# -- batch composition ------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray  # [B, 1, H, W]
    labels: np.ndarray  # [B, 2] multi-label targets
    domains: np.ndarray  # [B, 2] one-hot {source, target}
    n_source: int


class BatchComposer:
    """Draws ratio-controlled batches from per-class pools without replacement.

    A pool that runs dry is reshuffled and reused (resampling with
    replacement across refills), logged once per refill.
    """

    RATIO = {"benign": 1, "malignant": 1, "negative": 2}

    def __init__(self, sources, rng, target=None, batch_size=8, augment_cfg=None):
        if batch_size % 4 != 0:
            raise ValueError("classification batch size must be divisible by 4 (1:1:2 ratio)")
        self.sources = list(sources)
        self.target = target
        self.rng = rng
        self.batch_size = batch_size
        self.augment_cfg = augment_cfg
        self._pools = {}
        for cls in CLASSES:
            items = [
                (ds, i)
                for ds in self.sources
                for i in ds.indices("train", cls)
            ]
            if not items:
                raise ValueError(f"source datasets have no train samples of class {cls!r}")
            self._pools[cls] = _Pool(cls, items, rng)
        if target is not None:
            items = [(target, i) for i in target.indices("train")]
            if not items:
                raise ValueError("target dataset has no train samples")
            self._pools["__target__"] = _Pool("target", items, rng)

    def _stack(self, picks, domain_onehot):
        images, labels, domains = [], [], []
        for ds, idx in picks:
            img = ds.images[idx]
            if self.augment_cfg is not None:
                img = augment(img, self.rng, self.augment_cfg)
            images.append(img)
            labels.append(label_vector(ds.records[idx].label))
            domains.append(domain_onehot)
        return np.stack(images), np.stack(labels), np.stack(domains)

    def classification_batch(self):
        unit = self.batch_size // 4
        picks = []
        for cls, ratio in self.RATIO.items():
            picks += self._pools[cls].draw(ratio * unit)
        images, labels, domains = self._stack(picks, np.array([1.0, 0.0]))
        return Batch(images, labels, domains, n_source=len(picks))

    def dat_batch(self):
        """Half source (class-ratio controlled), half target (domain labels only)."""
        if self.target is None:
            raise ValueError("dat_batch requires a target dataset")
        half = self.batch_size
        unit = half // 4
        src = []
        for cls, ratio in self.RATIO.items():
            src += self._pools[cls].draw(ratio * unit)
        tgt = self._pools["__target__"].draw(half)
        s_img, s_lab, s_dom = self._stack(src, np.array([1.0, 0.0]))
        t_img, t_lab, t_dom = self._stack(tgt, np.array([0.0, 1.0]))
        return Batch(
            np.concatenate([s_img, t_img]),
            np.concatenate([s_lab, t_lab]),
            np.concatenate([s_dom, t_dom]),
            n_source=len(src),
        )


class _Pool:
    def __init__(self, name, items, rng):
        self.name = name
        self.items = items
        self.rng = rng
        self._queue = []

    def draw(self, k):
        out = []
        while len(out) < k:
            if not self._queue:
                order = self.rng.permutation(len(self.items))
                self._queue = [self.items[i] for i in order]
                log.debug("pool %s reshuffled (%d items)", self.name, len(self.items))
            out.append(self._queue.pop())
        return out


def compose_batch(dataset, phase, dat_target=None, rng=None, batch_size=None, augment_cfg=None):
    """One batch: classification (2:2:4 of 8) or DAT (8 source + 8 target)."""
    rng = rng if rng is not None else np.random.default_rng()
    sources = dataset if isinstance(dataset, (list, tuple)) else [dataset]
    if phase == "classification":
        composer = BatchComposer(sources, rng, batch_size=batch_size or 8, augment_cfg=augment_cfg)
        return composer.classification_batch()
    if phase == "dat":
        if dat_target is None:
            raise ValueError("dat phase requires dat_target")
        composer = BatchComposer(
            sources, rng, target=dat_target, batch_size=batch_size or 8, augment_cfg=augment_cfg
        )
        return composer.dat_batch()
    raise ValueError(f"unknown phase {phase!r}")


# -- on-disk format -----------------------------------------------------------------


def save_dataset(dataset, out_dir):
    """Directory with a JSON manifest and one "BNST" tensor file per image."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest = {
        "format": 1,
        "domain": asdict(dataset.spec),
        "image_size": dataset.image_size,
        "records": [asdict(r) for r in dataset.records],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    for i in range(dataset.images.shape[0]):
        save_tensor(os.path.join(img_dir, f"{i:06d}.bnst"), dataset.images[i])


def load_dataset(path):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    records = [SampleRecord(**r) for r in manifest["records"]]
    images = np.stack(
        [load_tensor(os.path.join(path, "images", f"{r.image_index:06d}.bnst")) for r in records]
    )
    for pos, rec in enumerate(records):
        rec.image_index = pos
    return DomainDataset(
        DomainSpec(**manifest["domain"]), manifest["image_size"], records, images
    )
