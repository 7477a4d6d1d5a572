"""Synthetic shapes dataset and on-disk format.

Each sample is one solid shape on uniform-noise background; the mask is the
exact pixel support of the shape, covering 10%..40% of the image.  Samples are
generated independently from a per-index seed, so any subset is reproducible.

On disk: images are binary PPM (P6), masks binary PGM (P5, nonzero means
foreground), and a manifest of UTF-8 lines ``image<TAB>mask-or-dash<TAB>label``
with paths relative to the manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netpbm import read_netpbm, write_pgm, write_ppm

SHAPE_CLASSES = ("square", "circle", "triangle", "cross", "ring", "diamond", "bar_h", "bar_v")

_AREA_LO, _AREA_HI = 0.10, 0.40


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 in {0, 1}
    label: int


@dataclass
class Manifest:
    root: Path
    split: str
    records: list  # of (image_relpath, mask_relpath_or_None, label)

    def __len__(self):
        return len(self.records)


def _shape_mask(kind: str, side: int, rng) -> np.ndarray:
    """Rasterize one shape with area fraction inside [0.10, 0.40]."""
    yy, xx = np.mgrid[0:side, 0:side]
    for _ in range(64):
        frac = rng.uniform(0.13, 0.37)
        if kind == "square":
            s = max(2, round(side * np.sqrt(frac)))
            r0 = int(rng.integers(0, side - s + 1))
            c0 = int(rng.integers(0, side - s + 1))
            mask = (yy >= r0) & (yy < r0 + s) & (xx >= c0) & (xx < c0 + s)
        elif kind == "circle":
            rad = side * np.sqrt(frac / np.pi)
            cy = rng.uniform(rad, side - 1 - rad)
            cx = rng.uniform(rad, side - 1 - rad)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
        elif kind == "triangle":
            # isoceles, apex up; area ~ base*height/2
            height = side * np.sqrt(frac * 2 * 0.9)
            base = height
            y0 = rng.uniform(0, side - 1 - height)
            cx = rng.uniform(base / 2, side - 1 - base / 2)
            t = (yy - y0) / height
            mask = (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * base / 2)
        elif kind == "cross":
            # two centered bars; area = 2*length*arm - arm^2, needs length^2 > area
            length = side * rng.uniform(np.sqrt(frac) + 0.1, 0.85)
            arm = length - np.sqrt(length * length - frac * side * side)
            arm = max(arm, 2.0)
            cy = rng.uniform(length / 2, side - 1 - length / 2)
            cx = rng.uniform(length / 2, side - 1 - length / 2)
            horiz = (np.abs(yy - cy) <= arm / 2) & (np.abs(xx - cx) <= length / 2)
            vert = (np.abs(xx - cx) <= arm / 2) & (np.abs(yy - cy) <= length / 2)
            mask = horiz | vert
        elif kind == "ring":
            inner_ratio = rng.uniform(0.45, 0.6)
            r_out = side * np.sqrt(frac / (np.pi * (1 - inner_ratio ** 2)))
            r_in = inner_ratio * r_out
            cy = rng.uniform(r_out, side - 1 - r_out)
            cx = rng.uniform(r_out, side - 1 - r_out)
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            mask = (d2 <= r_out ** 2) & (d2 >= r_in ** 2)
        elif kind == "diamond":
            rad = side * np.sqrt(frac / 2)
            cy = rng.uniform(rad, side - 1 - rad)
            cx = rng.uniform(rad, side - 1 - rad)
            mask = np.abs(yy - cy) + np.abs(xx - cx) <= rad
        elif kind == "bar_h":
            hh = max(2, round(side * rng.uniform(0.15, 0.3)))
            ww = max(2, round(frac * side * side / hh))
            ww = min(ww, side)
            r0 = int(rng.integers(0, side - hh + 1))
            c0 = int(rng.integers(0, side - ww + 1))
            mask = (yy >= r0) & (yy < r0 + hh) & (xx >= c0) & (xx < c0 + ww)
        elif kind == "bar_v":
            ww = max(2, round(side * rng.uniform(0.15, 0.3)))
            hh = max(2, round(frac * side * side / ww))
            hh = min(hh, side)
            r0 = int(rng.integers(0, side - hh + 1))
            c0 = int(rng.integers(0, side - ww + 1))
            mask = (yy >= r0) & (yy < r0 + hh) & (xx >= c0) & (xx < c0 + ww)
        else:
            raise ValueError(f"unknown shape class {kind!r}")
        covered = mask.mean()
        if _AREA_LO <= covered <= _AREA_HI:
            return mask.astype(np.uint8)
    raise RuntimeError(f"could not place a {kind} within the area bounds")


def make_sample(seed: int, index: int, classes: int, image_side: int) -> Sample:
    """Deterministic sample for (seed, index): label is index mod classes."""
    if not 1 <= classes <= len(SHAPE_CLASSES):
        raise ValueError(f"classes must be in 1..{len(SHAPE_CLASSES)}, got {classes}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
    label = index % classes
    mask = _shape_mask(SHAPE_CLASSES[label], image_side, rng)
    image = rng.integers(0, 256, size=(image_side, image_side, 3), dtype=np.uint8)
    color = rng.integers(0, 256, size=3, dtype=np.uint8)
    image[mask.astype(bool)] = color
    float_img = image.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    return Sample(image=float_img, mask=mask, label=label)


def gen_synthetic(out_dir, n: int, classes: int, seed: int, image_side: int = 32,
                  val_n: int = 0) -> dict:
    """Write ``n`` training samples (plus ``val_n`` validation samples drawn
    from the same stream at indices n..n+val_n-1) under ``out_dir``.

    Returns per-class counts of the training split.  With ``val_n`` zero a
    single ``manifest.tsv`` is written; otherwise ``manifest_train.tsv`` and
    ``manifest_val.tsv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")

    def write_split(name, start, count):
        lines = []
        for i in range(start, start + count):
            sample = make_sample(seed, i, classes, image_side)
            img_rel = f"img{i:06d}.ppm"
            mask_rel = f"mask{i:06d}.pgm"
            rgb = np.round(sample.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            write_ppm(out / img_rel, rgb)
            write_pgm(out / mask_rel, sample.mask * 255)
            lines.append(f"{img_rel}\t{mask_rel}\t{sample.label}\n")
        (out / name).write_text("".join(lines), encoding="utf-8")
        return [int(line.split("\t")[2]) for line in lines]

    if val_n > 0:
        labels = write_split("manifest_train.tsv", 0, n)
        write_split("manifest_val.tsv", n, val_n)
    else:
        labels = write_split("manifest.tsv", 0, n)
    counts = {c: 0 for c in range(classes)}
    for lab in labels:
        counts[lab] += 1
    return counts


def load_manifest(data_dir, split=None) -> Manifest:
    """Load ``manifest_<split>.tsv`` if present, else ``manifest.tsv``."""
    root = Path(data_dir)
    candidates = []
    if split:
        candidates.append(root / f"manifest_{split}.tsv")
    candidates.append(root / "manifest.tsv")
    path = next((p for p in candidates if p.exists()), None)
    if path is None:
        raise FileNotFoundError(f"no manifest found in {root} (tried {[str(p) for p in candidates]})")
    records = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{ln}: expected 3 tab-separated fields, got {len(parts)}")
        img, mask, label = parts
        records.append((img, None if mask == "-" else mask, int(label)))
    return Manifest(root=root, split=split or "all", records=records)


def load_sample(manifest: Manifest, index: int) -> Sample:
    img_rel, mask_rel, label = manifest.records[index]
    raw = read_netpbm(manifest.root / img_rel)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    image = raw.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    if mask_rel is None:
        mask = np.zeros(raw.shape[:2], dtype=np.uint8)
    else:
        m = read_netpbm(manifest.root / mask_rel)
        if m.ndim != 2:
            raise ValueError(f"{mask_rel}: mask must be grayscale PGM")
        if m.shape != raw.shape[:2]:
            raise ValueError(f"{mask_rel}: mask {m.shape} does not match image {raw.shape[:2]}")
        mask = (m != 0).astype(np.uint8)
    return Sample(image=image, mask=mask, label=label)


@dataclass
class ArrayDataset:
    images: np.ndarray  # (n, C, H, W) float32
    masks: np.ndarray   # (n, H, W) uint8
    labels: np.ndarray  # (n,) int64

    def __len__(self):
        return self.images.shape[0]


def load_dataset(data_dir, split=None) -> ArrayDataset:
    manifest = load_manifest(data_dir, split)
    if len(manifest) == 0:
        raise ValueError(f"manifest in {data_dir} is empty")
    samples = [load_sample(manifest, i) for i in range(len(manifest))]
    return ArrayDataset(
        images=np.stack([s.image for s in samples]),
        masks=np.stack([s.mask for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
    )


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffling is a pure function of (seed, epoch)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, 0x5F73687566])))
    return rng.permutation(n)
