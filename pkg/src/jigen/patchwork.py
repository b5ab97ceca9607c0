"""Tile grids, jigsaw shuffling, augmentation and rotation for CHW images in [0, 1].

Convention: when recomposing with permutation ``order``, output grid position
``i`` receives input tile ``order[i]``. Tiles are indexed row-major.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .permgen import Permutation, PermutationSet

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class GridSpec:
    n: int
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"grid side must be >= 2, got {self.n}")
        if self.height < self.n or self.width < self.n:
            raise ValueError(f"{self.height}x{self.width} image is smaller than a {self.n}x{self.n} grid")

    @property
    def tile_h(self) -> int:
        return self.height // self.n

    @property
    def tile_w(self) -> int:
        return self.width // self.n

    @property
    def crop_hw(self) -> Tuple[int, int]:
        return self.n * self.tile_h, self.n * self.tile_w

    @property
    def crop_offset(self) -> Tuple[int, int]:
        ch, cw = self.crop_hw
        return (self.height - ch) // 2, (self.width - cw) // 2

    @property
    def n_tiles(self) -> int:
        return self.n * self.n


@dataclass(frozen=True)
class AugConfig:
    crop_retain_min: float = 0.8
    crop_retain_max: float = 1.0
    hflip_prob: float = 0.5
    tile_gray_prob: float = 0.1

    def __post_init__(self):
        if not 0 < self.crop_retain_min <= self.crop_retain_max <= 1:
            raise ValueError("need 0 < crop_retain_min <= crop_retain_max <= 1")
        for p in (self.hflip_prob, self.tile_gray_prob):
            if not 0 <= p <= 1:
                raise ValueError(f"probability out of range: {p}")

    @classmethod
    def off(cls) -> "AugConfig":
        return cls(1.0, 1.0, 0.0, 0.0)


def _check_grid(img: np.ndarray, grid: GridSpec) -> None:
    if img.shape[-2:] != (grid.height, grid.width):
        raise ValueError(f"image {img.shape[-2:]} does not match grid geometry {grid.height}x{grid.width}")


def center_crop(images: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Crop (..., H, W) to the largest n-multiple, centered."""
    _check_grid(images, grid)
    (oy, ox), (ch, cw) = grid.crop_offset, grid.crop_hw
    return images[..., oy:oy + ch, ox:ox + cw]


def decompose(img: np.ndarray, grid: GridSpec) -> List[np.ndarray]:
    """Center-crop and cut a CHW image into n*n row-major tiles."""
    crop = center_crop(img, grid)
    th, tw = grid.tile_h, grid.tile_w
    return [crop[:, r * th:(r + 1) * th, c * tw:(c + 1) * tw].copy() for r in range(grid.n) for c in range(grid.n)]


def recompose(tiles: Sequence[np.ndarray], perm: Permutation, grid: GridSpec) -> np.ndarray:
    if len(tiles) != grid.n_tiles:
        raise ValueError(f"expected {grid.n_tiles} tiles, got {len(tiles)}")
    if len(perm) != grid.n_tiles:
        raise ValueError(f"permutation has {len(perm)} entries, grid has {grid.n_tiles} tiles")
    rows = []
    for r in range(grid.n):
        rows.append(np.concatenate([tiles[perm.order[r * grid.n + c]] for c in range(grid.n)], axis=-1))
    return np.concatenate(rows, axis=-2)


def shuffle_batch(images: np.ndarray, orders: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Vectorized recompose(decompose(x)) for a (B, C, H, W) batch and (B, n*n) orders."""
    crop = center_crop(images, grid)
    b, c = crop.shape[:2]
    n, th, tw = grid.n, grid.tile_h, grid.tile_w
    tiles = crop.reshape(b, c, n, th, n, tw).transpose(0, 2, 4, 1, 3, 5).reshape(b, n * n, c, th, tw)
    picked = np.take_along_axis(tiles, np.asarray(orders)[:, :, None, None, None], axis=1)
    return picked.reshape(b, n, n, c, th, tw).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, n * th, n * tw)


def shuffle_image(img: np.ndarray, perm_index: int, pset: PermutationSet, grid: GridSpec) -> Tuple[np.ndarray, int]:
    if not 0 <= perm_index < len(pset):
        raise ValueError(f"permutation index {perm_index} outside [0, {len(pset)})")
    z = recompose(decompose(img, grid), pset.entries[perm_index], grid)
    return z, perm_index


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of (..., H, W); exact when sizes match."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, wy = axis_weights(h, out_h)
    x0, x1, wx = axis_weights(w, out_w)
    top = img[..., y0, :]
    bot = img[..., y1, :]
    rows = top + wy[:, None] * (bot - top)
    left = rows[..., x0]
    right = rows[..., x1]
    return (left + wx * (right - left)).astype(img.dtype)


def to_gray(img: np.ndarray) -> np.ndarray:
    luma = np.tensordot(LUMA, img, axes=(0, 0)).astype(img.dtype)
    return np.broadcast_to(luma, img.shape).copy()


def augment(img: np.ndarray, cfg: AugConfig, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Random crop + resize back, horizontal flip, per-tile grayscale.

    The same number of random draws is consumed whatever the config, so a
    no-op config leaves the stream aligned with an active one.
    """
    c, h, w = img.shape
    fh, fw = rng.uniform(cfg.crop_retain_min, cfg.crop_retain_max, size=2)
    u_off = rng.random(2)
    u_flip = rng.random()
    u_gray = rng.random(grid.n_tiles)

    ch = min(h, max(1, int(round(fh * h))))
    cw = min(w, max(1, int(round(fw * w))))
    oy = int(u_off[0] * (h - ch + 1))
    ox = int(u_off[1] * (w - cw + 1))
    out = resize_bilinear(img[:, oy:oy + ch, ox:ox + cw], h, w)
    if u_flip < cfg.hflip_prob:
        out = out[:, :, ::-1]
    out = np.ascontiguousarray(out)

    (cy, cx), th, tw = grid.crop_offset, grid.tile_h, grid.tile_w
    for t in np.flatnonzero(u_gray < cfg.tile_gray_prob):
        r, col = divmod(int(t), grid.n)
        sl = (slice(None), slice(cy + r * th, cy + (r + 1) * th), slice(cx + col * tw, cx + (col + 1) * tw))
        out[sl] = to_gray(out[sl])
    return np.clip(out, 0.0, 1.0)


def rotate(img: np.ndarray, k: int) -> Tuple[np.ndarray, int]:
    """Counter-clockwise rotation by k quarter turns; returns (image, k)."""
    if img.shape[-1] != img.shape[-2]:
        raise ValueError(f"rotate needs a square image, got {img.shape[-2]}x{img.shape[-1]}")
    if k not in (0, 1, 2, 3):
        raise ValueError(f"k must be in 0..3, got {k}")
    return np.ascontiguousarray(np.rot90(img, k, axes=(-2, -1))), k


def rotate_batch(images: np.ndarray, ks: Sequence[int]) -> np.ndarray:
    return np.stack([rotate(im, int(k))[0] for im, k in zip(images, ks)])


def write_pnm(img: np.ndarray, path: Union[str, Path]) -> None:
    """Write a 2-d map as binary PGM or a CHW image as binary PPM (values in [0, 1])."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    if arr.ndim == 2:
        h, w = arr.shape
        header, body = f"P5\n{w} {h}\n255\n", arr
    elif arr.ndim == 3 and arr.shape[0] in (1, 3):
        if arr.shape[0] == 1:
            arr = np.repeat(arr, 3, axis=0)
        h, w = arr.shape[1:]
        header, body = f"P6\n{w} {h}\n255\n", arr.transpose(1, 2, 0)
    else:
        raise ValueError(f"cannot write shape {arr.shape} as PGM/PPM")
    data = np.round(body * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(header.encode("ascii") + data)


def dump_tiles(img: np.ndarray, grid: GridSpec, directory: Union[str, Path], prefix: str = "tile") -> List[Path]:
    """Debug helper: one PPM file per tile."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, tile in enumerate(decompose(img, grid)):
        p = directory / f"{prefix}_{i:02d}.ppm"
        write_pnm(tile, p)
        paths.append(p)
    return paths
