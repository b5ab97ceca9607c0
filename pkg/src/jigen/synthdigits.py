"""Rendered handwriting-like digit corpus, written in IDX format.

No digit corpus ships with the package and nothing is downloaded, so this
renders 28x28 grayscale glyphs from the system TrueType fonts with random
affine jitter, stroke thickening and blur. The output is MNIST-shaped: white
strokes on black, labels 0-9.
"""
from __future__ import annotations

import glob
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from .datasets import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, ManifestEntry, _read_idx, write_idx_images, write_idx_labels, write_manifest

FONT_GLOBS = ("/usr/share/fonts/**/*.ttf", "/usr/local/share/fonts/**/*.ttf")
CANVAS = 64


def _fonts() -> List[str]:
    paths = sorted({p for pattern in FONT_GLOBS for p in glob.glob(pattern, recursive=True)})
    return paths


def _load_font(path, size):
    if path is None:
        return ImageFont.load_default(size=size)
    return ImageFont.truetype(path, size)


def render_digit(label: int, rng: np.random.Generator, font_paths: List[str], size: int = 28) -> np.ndarray:
    path = font_paths[int(rng.integers(len(font_paths)))] if font_paths else None
    font = _load_font(path, int(rng.integers(34, 46)))
    img = Image.new("L", (CANVAS, CANVAS), 0)
    draw = ImageDraw.Draw(img)
    box = draw.textbbox((0, 0), str(label), font=font)
    x = (CANVAS - (box[2] - box[0])) / 2 - box[0]
    y = (CANVAS - (box[3] - box[1])) / 2 - box[1]
    draw.text((x, y), str(label), fill=255, font=font)

    if rng.random() < 0.5:
        img = img.filter(ImageFilter.MaxFilter(int(rng.choice([3, 5]))))
    # rotation + shear + anisotropic scale about the canvas center
    angle = np.deg2rad(rng.uniform(-15, 15))
    shear = rng.uniform(-0.3, 0.3)
    sx, sy = rng.uniform(0.8, 1.15, size=2)
    a = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) @ np.array([[1, shear], [0, 1]])
    a = a @ np.diag([sx, sy])
    inv = np.linalg.inv(a)
    c = CANVAS / 2
    offset = np.array([c, c]) - inv @ np.array([c, c])
    img = img.transform(
        img.size, Image.AFFINE, (inv[0, 0], inv[0, 1], offset[0], inv[1, 0], inv[1, 1], offset[1]),
        resample=Image.BILINEAR,
    )
    img = img.filter(ImageFilter.GaussianBlur(rng.uniform(0.3, 1.0)))

    # fit the ink into a 20x20 box, center by mass in a size x size frame (MNIST recipe)
    arr = np.asarray(img, dtype=np.float32)
    ys, xs = np.nonzero(arr > 10)
    if ys.size == 0:
        return np.zeros((size, size), dtype=np.uint8)
    crop = img.crop((xs.min(), ys.min(), xs.max() + 1, ys.max() + 1))
    inner = size * 20 // 28
    scale = inner / max(crop.size)
    crop = crop.resize((max(1, round(crop.size[0] * scale)), max(1, round(crop.size[1] * scale))), Image.LANCZOS)
    carr = np.asarray(crop, dtype=np.float32)
    total = carr.sum()
    cy = (carr.sum(axis=1) * np.arange(carr.shape[0])).sum() / total
    cx = (carr.sum(axis=0) * np.arange(carr.shape[1])).sum() / total
    jitter = rng.integers(-1, 2, size=2)
    top = int(round(size / 2 - cy)) + int(jitter[0])
    left = int(round(size / 2 - cx)) + int(jitter[1])
    top = min(max(top, 0), size - carr.shape[0])
    left = min(max(left, 0), size - carr.shape[1])
    out = np.zeros((size, size), dtype=np.float32)
    out[top:top + carr.shape[0], left:left + carr.shape[1]] = carr
    return np.clip(out, 0, 255).astype(np.uint8)


def render_digits(n: int, seed: int = 0, size: int = 28) -> Tuple[np.ndarray, np.ndarray]:
    """``n`` class-balanced glyphs (labels cycle 0..9 then get shuffled)."""
    rng = np.random.default_rng(seed)
    fonts = _fonts()
    labels = rng.permutation(np.arange(n) % 10).astype(np.uint8)
    images = np.stack([render_digit(int(lab), rng, fonts, size) for lab in labels]) if n else np.zeros((0, size, size), np.uint8)
    return images, labels


def write_digit_corpus(directory: Union[str, Path], n_train: int, n_test: int, seed: int = 0) -> dict:
    """Render train/test IDX file pairs; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split_name, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        imgs, labs = render_digits(n, s)
        ip = directory / f"{split_name}-images-idx3-ubyte"
        lp = directory / f"{split_name}-labels-idx1-ubyte"
        write_idx_images(ip, imgs)
        write_idx_labels(lp, labs)
        paths[split_name] = (ip, lp)
    return paths


# source domains and held-out target used by the desk-scale experiments
DEFAULT_DOMAINS = (
    ("digits", "kind=identity"),
    ("inverted", "kind=invert"),
    ("recolored", "kind=colorize seed=11; kind=channel-permute perm=2,0,1"),
)
DEFAULT_TARGET = ("noisy", "kind=noise-background seed=23")


def write_experiment_manifests(directory: Union[str, Path], n_train: int = 10_000, n_test: int = 2_000,
                               seed: int = 0) -> Tuple[Path, Path]:
    """Render the corpus plus a sources manifest and a target manifest.

    The ``n_train`` base glyphs are dealt round-robin into one disjoint shard per
    source domain, so the sources together hold ``n_train`` images.
    """
    directory = Path(directory)
    paths = write_digit_corpus(directory, n_train, n_test, seed)
    base_imgs = _read_idx(paths["train"][0], IDX_IMAGES_MAGIC, 3)
    base_labs = _read_idx(paths["train"][1], IDX_LABELS_MAGIC, 1)
    k = len(DEFAULT_DOMAINS)
    sources = []
    for i, (name, t) in enumerate(DEFAULT_DOMAINS):
        ip = directory / f"{name}-images-idx3-ubyte"
        lp = directory / f"{name}-labels-idx1-ubyte"
        write_idx_images(ip, base_imgs[i::k])
        write_idx_labels(lp, base_labs[i::k])
        sources.append(ManifestEntry(name, i, ip, lp, t))
    tip, tlp = paths["test"]
    target = [ManifestEntry(DEFAULT_TARGET[0], len(DEFAULT_DOMAINS), tip, tlp, DEFAULT_TARGET[1])]
    src_manifest = directory / "sources.manifest"
    tgt_manifest = directory / "target.manifest"
    write_manifest(src_manifest, sources)
    write_manifest(tgt_manifest, target)
    return src_manifest, tgt_manifest
