"""Synthetic two-domain image data with a controllable shift.

Source images are procedurally rendered class glyphs (bar, cross, disk,
ring, corner wedge) at randomized positions and scales; target images come
from the same generator composed with a fixed shift (rotation, intensity
gain, additive noise, background lift), so the label-conditional
distributions differ only by the shift.

Unlabeled-target ground truth is kept for evaluation but firewalled behind
``eval_label()``: reading ``.label`` on an unlabeled sample raises, which is
what lets tests assert that no training operation ever touches it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np


class DataError(ValueError):
    """Dataset construction or container violation."""


class LabelFirewallError(RuntimeError):
    """Ground truth of an unlabeled-target sample was read outside eval."""


SOURCE = "source"
TARGET = "target"

GLYPH_NAMES = ("bar", "cross", "disk", "ring", "wedge")


class Sample:
    """One image with its class and domain of origin.

    ``label`` is only readable when the sample is part of a labeled split;
    evaluation code uses ``eval_label()``, the explicit eval-only channel.
    """

    __slots__ = ("image", "domain", "_label", "label_visible")

    def __init__(self, image: np.ndarray, label: int, domain: str, label_visible: bool = True):
        self.image = image
        self._label = int(label)
        self.domain = domain
        self.label_visible = label_visible

    @property
    def label(self) -> int:
        if not self.label_visible:
            raise LabelFirewallError(
                "ground-truth label of an unlabeled-target sample was read; "
                "training code must never do this (use eval_label() in eval paths)")
        return self._label

    def eval_label(self) -> int:
        return self._label

    def replace_image(self, image: np.ndarray) -> "Sample":
        return Sample(image, self._label, self.domain, self.label_visible)


@dataclass(frozen=True)
class ShiftSpec:
    """Parametric domain gap applied on top of the glyph generator."""

    rotation_deg: float = 0.0
    intensity_gain: float = 1.0
    noise_std: float = 0.0
    background: float = 0.0

    def validate(self) -> None:
        if not (0.0 < self.intensity_gain <= 2.0):
            raise DataError(f"intensity_gain {self.intensity_gain} outside (0, 2]")
        if not (0.0 <= self.noise_std <= 0.5):
            raise DataError(f"noise_std {self.noise_std} outside [0, 0.5]")
        if not (0.0 <= self.background <= 0.5):
            raise DataError(f"background {self.background} outside [0, 0.5]")


SHIFT_PRESETS = {
    "identity": ShiftSpec(),
    "default": ShiftSpec(rotation_deg=25.0, intensity_gain=0.7, noise_std=0.08, background=0.15),
}


@dataclass
class DomainDataset:
    """Labeled source, k-shot labeled target, and firewalled unlabeled target."""

    classes: int
    source: list[Sample]
    target_labeled: list[Sample]
    target_unlabeled: list[Sample]

    def validate(self) -> None:
        if self.target_labeled and len(self.target_labeled) * 10 > len(self.target_unlabeled):
            raise DataError(
                f"labeled-target split ({len(self.target_labeled)}) must stay <= "
                f"a tenth of the unlabeled split ({len(self.target_unlabeled)})")
        for s in self.source + self.target_labeled:
            if not s.label_visible:
                raise DataError("labeled split contains a firewalled sample")
        for s in self.target_unlabeled:
            if s.label_visible:
                raise DataError("unlabeled split contains a label-visible sample")

    @property
    def labeled(self) -> list[Sample]:
        """The training pool the supervised losses draw from."""
        return self.source + self.target_labeled

    def image_shape(self) -> tuple[int, int, int]:
        return self.source[0].image.shape


# ---------------------------------------------------------------------------
# glyph rendering

def _render_glyph(klass: int, rng: np.random.Generator, side: int) -> np.ndarray:
    img = np.zeros((side, side))
    amp = rng.uniform(0.75, 1.0)
    yy, xx = np.mgrid[0:side, 0:side]
    name = GLYPH_NAMES[klass]
    if name == "bar":
        thick = int(rng.integers(2, 4))
        length = int(rng.integers(7, 12))
        y0 = int(rng.integers(2, side - thick - 1))
        x0 = int(rng.integers(1, side - length))
        img[y0:y0 + thick, x0:x0 + length] = amp
    elif name == "cross":
        arm = int(rng.integers(3, 6))
        cy = int(rng.integers(arm + 1, side - arm - 1))
        cx = int(rng.integers(arm + 1, side - arm - 1))
        img[cy - 1:cy + 1, cx - arm:cx + arm + 1] = amp
        img[cy - arm:cy + arm + 1, cx - 1:cx + 1] = amp
    elif name == "disk":
        r = rng.uniform(2.4, 3.6)
        cy = rng.uniform(r + 1, side - r - 1)
        cx = rng.uniform(r + 1, side - r - 1)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2] = amp
    elif name == "ring":
        r = rng.uniform(3.6, 5.0)
        cy = rng.uniform(r + 0.5, side - r - 0.5)
        cx = rng.uniform(r + 0.5, side - r - 0.5)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        img[(d2 <= r ** 2) & (d2 >= (r - 2.0) ** 2)] = amp
    elif name == "wedge":
        s = int(rng.integers(7, 11))
        y0 = int(rng.integers(1, side - s))
        x0 = int(rng.integers(1, side - s))
        box = (yy >= y0) & (xx >= x0) & ((yy - y0) + (xx - x0) <= s)
        img[box] = amp
    else:  # pragma: no cover
        raise DataError(f"no glyph for class {klass}")
    return img[None, :, :]


# ---------------------------------------------------------------------------
# geometric helpers (nearest-neighbour resampling keeps everything exact at
# zero magnitude and dependency-free)

def _affine_bilinear(img: np.ndarray, a: float, b: float, c: float, d: float,
                     ty: float = 0.0, tx: float = 0.0, fill: float = 0.0) -> np.ndarray:
    """Sample img at [[a,b],[c,d]] @ (centered output coords) + (ty,tx).

    Bilinear weights collapse to exact copies on integer-aligned grids, so a
    zero-magnitude transform is the identity bit for bit.
    """
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    sy = a * (yy - cy) + b * (xx - cx) + cy + ty
    sx = c * (yy - cy) + d * (xx - cx) + cx + tx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros_like(img)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            iy = y0 + dy
            ix = x0 + dx
            inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
            iy_c = np.clip(iy, 0, h - 1)
            ix_c = np.clip(ix, 0, w - 1)
            weight = wy * wx
            for ch in range(img.shape[0]):
                out[ch] += weight * np.where(inside, img[ch, iy_c, ix_c], fill)
    return out


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    th = np.deg2rad(degrees)
    return _affine_bilinear(img, np.cos(th), np.sin(th), -np.sin(th), np.cos(th))


def apply_shift(img: np.ndarray, shift: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    out = img
    if shift.rotation_deg:
        out = _rotate(out, shift.rotation_deg)
    out = out * shift.intensity_gain + shift.background
    if shift.noise_std:
        out = out + rng.normal(0.0, shift.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset generation and the k-shot split

def generate_pair(seed: int, classes: int, n_src: int, n_tgt: int,
                  shift: ShiftSpec) -> DomainDataset:
    """Render the source split and the (not yet k-shot split) target pool.

    The target pool is returned in ``target_unlabeled`` with its labels
    already firewalled; ``split_kshot`` carves the k-shot labeled split out
    of it.  Fully determined by the seed.
    """
    if classes < 2:
        raise DataError(f"need at least 2 classes, got {classes}")
    if classes > len(GLYPH_NAMES):
        raise DataError(f"only {len(GLYPH_NAMES)} glyph classes available, asked for {classes}")
    if n_src < classes or n_tgt < classes:
        raise DataError("need at least one sample per class in each domain")
    shift.validate()
    side = 16
    src_rng = np.random.default_rng([seed, 101])
    tgt_rng = np.random.default_rng([seed, 202])
    source = []
    for i in range(n_src):
        k = i % classes
        source.append(Sample(_render_glyph(k, src_rng, side), k, SOURCE))
    target = []
    for i in range(n_tgt):
        k = i % classes
        img = apply_shift(_render_glyph(k, tgt_rng, side), shift, tgt_rng)
        target.append(Sample(img, k, TARGET, label_visible=False))
    ds = DomainDataset(classes=classes, source=source, target_labeled=[],
                       target_unlabeled=target)
    ds.validate()
    return ds


def split_kshot(target: list[Sample], k: int, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Exactly k labeled target samples per class, disjoint from the rest.

    k = 0 yields the fully unlabeled setting.  The input list may already
    be firewalled; the k picked samples come back label-visible.
    """
    if k < 0:
        raise DataError(f"k-shot count must be nonnegative, got {k}")
    by_class: dict[int, list[int]] = {}
    for idx, s in enumerate(target):
        by_class.setdefault(s.eval_label(), []).append(idx)
    rng = np.random.default_rng([seed, 303])
    chosen: set[int] = set()
    for klass in sorted(by_class):
        pool = by_class[klass]
        if len(pool) <= k:
            raise DataError(f"class {klass} has only {len(pool)} target samples, need > {k}")
        picks = rng.choice(len(pool), size=k, replace=False) if k else []
        chosen.update(pool[int(i)] for i in picks)
    labeled = [Sample(target[i].image, target[i].eval_label(), TARGET) for i in sorted(chosen)]
    unlabeled = [Sample(target[i].image, target[i].eval_label(), TARGET, label_visible=False)
                 for i in range(len(target)) if i not in chosen]
    return labeled, unlabeled


def make_dataset(seed: int, classes: int, n_src: int, n_tgt: int,
                 shift: ShiftSpec, k_shot: int) -> DomainDataset:
    """generate_pair followed by the k-shot split, validated."""
    pool = generate_pair(seed, classes, n_src, n_tgt, shift)
    labeled, unlabeled = split_kshot(pool.target_unlabeled, k_shot, seed)
    ds = DomainDataset(classes=classes, source=pool.source,
                       target_labeled=labeled, target_unlabeled=unlabeled)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# augmentations

def aug_weak(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal flip, then a random crop (87.5%..100% side) resized back."""
    img = sample.image
    _, h, w = img.shape
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    crop = int(round(rng.uniform(0.875, 1.0) * h))
    if crop < h:
        oy = int(rng.integers(0, h - crop + 1))
        ox = int(rng.integers(0, w - crop + 1))
        window = img[:, oy:oy + crop, ox:ox + crop]
        idx = (np.arange(h) * crop) // h
        img = window[:, idx[:, None], idx[None, :]]
    return sample.replace_image(np.ascontiguousarray(img))


def _t_rotate(img, rng):
    return _rotate(img, rng.uniform(-30.0, 30.0))


def _t_translate(img, rng):
    _, h, w = img.shape
    ty = rng.uniform(-0.25, 0.25) * h
    tx = rng.uniform(-0.25, 0.25) * w
    return _affine_bilinear(img, 1.0, 0.0, 0.0, 1.0, ty=ty, tx=tx)


def _t_invert(img, rng):
    m = rng.uniform(0.0, 1.0)
    return img + m * (1.0 - 2.0 * img)


def _t_contrast(img, rng):
    m = rng.uniform(-0.5, 0.5)
    mu = img.mean()
    return mu + (1.0 + m) * (img - mu)


def _t_brightness(img, rng):
    return img + rng.uniform(-0.3, 0.3)


def _box3(img):
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += padded[:, dy:dy + img.shape[1], dx:dx + img.shape[2]]
    return acc / 9.0


def _t_sharpen_blur(img, rng):
    m = rng.uniform(-1.0, 1.0)
    return img + m * (img - _box3(img))


def _t_cutout(img, rng):
    _, h, w = img.shape
    s = int(round(rng.uniform(0.0, 1.0) * 0.25 * h))
    if s == 0:
        return img
    cy = int(rng.integers(0, h - s + 1))
    cx = int(rng.integers(0, w - s + 1))
    out = img.copy()
    out[:, cy:cy + s, cx:cx + s] = 0.5
    return out


def _t_shear(img, rng):
    m = rng.uniform(-0.3, 0.3)
    return _affine_bilinear(img, 1.0, 0.0, m, 1.0)


STRONG_POOL: list[tuple[str, object]] = [
    ("rotate", _t_rotate),
    ("translate", _t_translate),
    ("invert", _t_invert),
    ("contrast", _t_contrast),
    ("brightness", _t_brightness),
    ("sharpen_blur", _t_sharpen_blur),
    ("cutout", _t_cutout),
    ("shear", _t_shear),
]


def aug_strong(sample: Sample, rng: np.random.Generator) -> Sample:
    """Two transforms sampled from the pool, composed in draw order, clamped."""
    img = sample.image
    for idx in rng.integers(0, len(STRONG_POOL), size=2):
        img = STRONG_POOL[int(idx)][1](img, rng)
    return sample.replace_image(np.clip(img, 0.0, 1.0))


# ---------------------------------------------------------------------------
# single-file binary container + PGM previews

_DATA_MAGIC = b"ECBDATA1"


def save_dataset(path, ds: DomainDataset, meta: dict) -> None:
    """Header (counts, geometry, seed, shift) + raw images and labels."""
    c, h, w = ds.image_shape()
    header = dict(meta)
    header.update({
        "classes": ds.classes,
        "n_src": len(ds.source),
        "n_tl": len(ds.target_labeled),
        "n_tu": len(ds.target_unlabeled),
        "channels": c, "side": h,
    })
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    order = ds.source + ds.target_labeled + ds.target_unlabeled
    images = np.stack([s.image for s in order]).astype("<f8")
    labels = np.asarray([s.eval_label() for s in order], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(images.tobytes())
        fh.write(labels.tobytes())


def load_dataset(path) -> tuple[DomainDataset, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_DATA_MAGIC)) != _DATA_MAGIC:
            raise DataError(f"{path}: not a dataset container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n = header["n_src"] + header["n_tl"] + header["n_tu"]
        c, side = header["channels"], header["side"]
        images = np.frombuffer(fh.read(8 * n * c * side * side), dtype="<f8")
        images = images.reshape(n, c, side, side).astype(np.float64)
        labels = np.frombuffer(fh.read(4 * n), dtype="<i4")
    cur = 0
    splits = []
    for count, domain, visible in ((header["n_src"], SOURCE, True),
                                   (header["n_tl"], TARGET, True),
                                   (header["n_tu"], TARGET, False)):
        splits.append([Sample(images[i].copy(), int(labels[i]), domain, visible)
                       for i in range(cur, cur + count)])
        cur += count
    ds = DomainDataset(classes=header["classes"], source=splits[0],
                       target_labeled=splits[1], target_unlabeled=splits[2])
    ds.validate()
    return ds, header


def shift_to_meta(shift: ShiftSpec) -> dict:
    return asdict(shift)


def shift_from_meta(meta: dict) -> ShiftSpec:
    return ShiftSpec(**meta)


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM preview of a [c,h,w] image in [0,1]."""
    gray = np.clip(img[0] * 255.0, 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
