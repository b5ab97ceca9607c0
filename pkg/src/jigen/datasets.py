"""Digit datasets, synthetic visual domains and mixed ordered/shuffled batches."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .patchwork import AugConfig, GridSpec, augment, center_crop, resize_bilinear, rotate_batch, shuffle_batch
from .permgen import PermutationSet

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
ROTATION_CLASSES = 4


class IdxParseError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = path
        self.offset = offset


@dataclass
class Dataset:
    name: str
    domain_id: int
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    C: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.C):
            raise ValueError(f"labels outside [0, {self.C})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


# --- IDX -------------------------------------------------------------------

def _read_idx(path: Union[str, Path], magic: int, ndims: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndims
    if len(raw) < 4:
        raise IdxParseError(path, 0, f"file too short for magic number ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxParseError(path, 0, f"bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise IdxParseError(path, len(raw), f"truncated header, need {header} bytes")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < need:
        raise IdxParseError(path, len(raw), f"truncated payload: expected {need} bytes after offset {header}, found {len(raw) - header}")
    if len(raw) - header > need:
        raise IdxParseError(path, header + need, "unexpected trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist", domain_id: int = 0, C: int = 10) -> Dataset:
    """Parse an IDX image/label file pair into a grayscale (N, 1, rows, cols) dataset."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxParseError(labels_path, 4, f"label count {labels.shape[0]} != image count {images.shape[0]}")
    if labels.size and labels.max() >= C:
        bad = int(np.argmax(labels >= C))
        raise IdxParseError(labels_path, 8 + bad, f"label {labels[bad]} outside [0, {C})")
    return Dataset(name, domain_id, images[:, None].astype(np.float32) / 255.0, labels.astype(np.int64), C)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def normalize_32rgb(d: Dataset, size: int = 32) -> Dataset:
    imgs = d.images
    if imgs.shape[-2:] != (size, size):
        imgs = resize_bilinear(imgs, size, size)
    if imgs.shape[1] == 1:
        imgs = np.repeat(imgs, 3, axis=1)
    return replace(d, images=np.ascontiguousarray(imgs, dtype=np.float32))


# --- synthetic domains -----------------------------------------------------

KINDS = ("identity", "invert", "colorize", "noise-background", "channel-permute", "posterize")


@dataclass(frozen=True)
class DomainTransformSpec:
    kind: str
    params: Dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown domain transform {self.kind!r}; expected one of {', '.join(KINDS)}")

    @classmethod
    def parse(cls, text: str) -> "DomainTransformSpec":
        """Parse ``"kind=channel-permute perm=2,0,1 seed=3"``."""
        fields = {}
        for token in text.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise ValueError(f"transform token {token!r} is not key=value")
            fields[key] = value
        if "kind" not in fields:
            raise ValueError(f"transform spec {text!r} has no kind")
        kind = fields.pop("kind")
        seed = int(fields.pop("seed", 0))
        return cls(kind, fields, seed)

    def __str__(self) -> str:
        extra = "".join(f" {k}={v}" for k, v in sorted(self.params.items()))
        return f"kind={self.kind} seed={self.seed}{extra}"


def parse_transform_chain(text: str) -> List[DomainTransformSpec]:
    """``;``-separated transforms applied left to right. Empty text means identity."""
    parts = [p.strip() for p in text.split(";") if p.strip()]
    return [DomainTransformSpec.parse(p) for p in parts] or [DomainTransformSpec("identity")]


def _random_colors(rng, n, low=0.0, high=1.0):
    return rng.uniform(low, high, size=(n, 3, 1, 1)).astype(np.float32)


def _smooth_noise(rng, n, h, w, cell: int) -> np.ndarray:
    coarse = rng.random((n, 3, max(1, h // cell), max(1, w // cell))).astype(np.float32)
    return resize_bilinear(coarse, h, w)


def _apply(spec: DomainTransformSpec, imgs: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    n, c, h, w = imgs.shape
    if spec.kind == "identity":
        return imgs.copy()
    if spec.kind == "invert":
        return 1.0 - imgs
    gray = imgs.mean(axis=1, keepdims=True) if c == 3 else imgs
    if spec.kind == "colorize":
        # digit strokes in one random color over a darker random background color
        fg = _random_colors(rng, n, 0.5, 1.0)
        bg = _random_colors(rng, n, 0.0, 0.4)
        return bg + gray * (fg - bg)
    if spec.kind == "noise-background":
        # colored smooth-noise backgrounds; strokes blended by absolute difference
        cell = int(spec.params.get("cell", 4))
        bg = _smooth_noise(rng, n, h, w, cell)
        return np.abs(bg - gray)
    if spec.kind == "channel-permute":
        perm = [int(v) for v in spec.params.get("perm", "2,0,1").split(",")]
        if sorted(perm) != list(range(c)):
            raise ValueError(f"channel permutation {perm} does not match {c} channels")
        return imgs[:, perm]
    if spec.kind == "posterize":
        levels = int(spec.params.get("levels", 3))
        if levels < 2:
            raise ValueError("posterize needs levels >= 2")
        return np.round(imgs * (levels - 1)) / (levels - 1)
    raise ValueError(f"unknown domain transform {spec.kind!r}")


def synth_domain(base: Dataset, spec: Union[DomainTransformSpec, Sequence[DomainTransformSpec]],
                 domain_id: Optional[int] = None, name: Optional[str] = None) -> Dataset:
    """Apply one transform (or a chain) to every image; labels are copied."""
    specs = [spec] if isinstance(spec, DomainTransformSpec) else list(spec)
    imgs = base.images
    for s in specs:
        imgs = np.clip(_apply(s, imgs), 0.0, 1.0).astype(np.float32)
    return Dataset(
        name or f"{base.name}/{'+'.join(s.kind for s in specs)}",
        base.domain_id + 1 if domain_id is None else domain_id,
        imgs,
        base.labels.copy(),
        base.C,
    )


# --- splits and batches ----------------------------------------------------

def split(d: Dataset, holdout_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < holdout_fraction < 1:
        raise ValueError(f"holdout fraction must be in (0, 1), got {holdout_fraction}")
    order = np.random.default_rng(seed).permutation(len(d))
    n_hold = int(math.floor(holdout_fraction * len(d) + 1e-9))
    return d.subset(np.sort(order[n_hold:])), d.subset(np.sort(order[:n_hold]))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, h, w), already cropped / shuffled
    class_labels: np.ndarray
    jigsaw_labels: np.ndarray  # auxiliary labels: permutation index or rotation quarter-turns
    ordered_mask: np.ndarray
    domain_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.class_labels)


def compose_batch(
    sources: Sequence[Dataset],
    B: int,
    beta: float,
    pset: Optional[PermutationSet],
    grid: GridSpec,
    aug: AugConfig,
    rng: np.random.Generator,
    aux_task: str = "jigsaw",
) -> Batch:
    """Draw B images round-robin over domains; round(beta*B) stay ordered, the rest are shuffled.

    Shuffled rows get a permutation index drawn uniformly from 1..P-1 (the
    identity is reserved for ordered rows). With ``aux_task="rotation"`` the
    non-ordered rows are rotated by 1..3 quarter turns instead.
    """
    if not sources or any(len(s) == 0 for s in sources):
        raise ValueError("compose_batch needs non-empty sources")
    if B < 1:
        raise ValueError("batch size must be >= 1")
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if aux_task not in ("jigsaw", "rotation"):
        raise ValueError(f"unknown aux task {aux_task!r}")
    n_ordered = round_half_up(beta * B)
    if aux_task == "jigsaw" and n_ordered < B and (pset is None or len(pset) < 2):
        raise ValueError("shuffled rows need a permutation set with P >= 2")

    S = len(sources)
    start = int(rng.integers(S))
    dom = (start + np.arange(B)) % S
    picks = np.empty(B, dtype=np.int64)
    for s in range(S):
        rows = np.flatnonzero(dom == s)
        picks[rows] = rng.integers(len(sources[s]), size=rows.size)
    ordered = np.zeros(B, dtype=bool)
    ordered[rng.permutation(B)[:n_ordered]] = True
    if aux_task == "jigsaw":
        n_aux = len(pset) if pset is not None else 1
    else:
        n_aux = ROTATION_CLASSES
    draws = rng.integers(1, n_aux, size=B) if n_aux > 1 else np.zeros(B, dtype=np.int64)
    aux = np.where(ordered, 0, draws)

    raw = np.stack([augment(sources[s].images[i], aug, grid, rng) for s, i in zip(dom, picks)])
    if aux_task == "jigsaw":
        orders = pset.as_array()[aux] if pset is not None else np.tile(np.arange(grid.n_tiles), (B, 1))
        images = shuffle_batch(raw, orders, grid)
    else:
        images = rotate_batch(center_crop(raw, grid), aux)
    labels = np.array([sources[s].labels[i] for s, i in zip(dom, picks)], dtype=np.int64)
    domain_ids = np.array([sources[s].domain_id for s in dom], dtype=np.int64)
    return Batch(np.ascontiguousarray(images, dtype=np.float32), labels, aux.astype(np.int64), ordered, domain_ids)


# --- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    name: str
    domain_id: int
    images_path: Path
    labels_path: Path
    transform: str

    def load(self) -> Dataset:
        base = normalize_32rgb(load_idx(self.images_path, self.labels_path, self.name, self.domain_id))
        return synth_domain(base, parse_transform_chain(self.transform), domain_id=self.domain_id, name=self.name)


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """Lines of ``name, domain_id, images_path, labels_path, transform_spec``.

    Paths are relative to the manifest. The transform field may itself contain
    commas. Blank lines and ``#`` comments are ignored.
    """
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",", 4)]
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 comma-separated fields")
        name, dom, imgs, labs, transform = parts
        parse_transform_chain(transform)
        entries.append(ManifestEntry(name, int(dom), path.parent / imgs, path.parent / labs, transform))
    if not entries:
        raise ValueError(f"{path}: manifest lists no datasets")
    return entries


def write_manifest(path: Union[str, Path], entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    lines = ["# name, domain_id, images_path, labels_path, transform_spec"]
    for e in entries:
        imgs = Path(e.images_path)
        labs = Path(e.labels_path)
        try:
            imgs, labs = imgs.relative_to(path.parent), labs.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{e.name}, {e.domain_id}, {imgs}, {labs}, {e.transform}")
    path.write_text("\n".join(lines) + "\n")
