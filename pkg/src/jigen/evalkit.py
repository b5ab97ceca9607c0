"""Evaluation: accuracy, confusion matrices, auxiliary-head accuracy, CAM and ablation sweeps.

Only the object head is used for class predictions; the auxiliary head is read
solely by :func:`jigsaw_accuracy` / :func:`aux_accuracy` diagnostics.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .datasets import Dataset
from .model import Model, forward
from .patchwork import GridSpec, rotate_batch, shuffle_batch, write_pnm
from .permgen import PermutationSet

log = logging.getLogger(__name__)

EVAL_BATCH = 256


def _crop_to_model(m: Model, images: np.ndarray) -> np.ndarray:
    h, w = m.spec.input_size
    H, W = images.shape[-2:]
    if H < h or W < w:
        raise ValueError(f"images {H}x{W} smaller than model input {h}x{w}")
    oy, ox = (H - h) // 2, (W - w) // 2
    return images[..., oy:oy + h, ox:ox + w]


def _logits(m: Model, images: np.ndarray, head: str) -> np.ndarray:
    out = []
    for i in range(0, len(images), EVAL_BATCH):
        o = forward(m, np.ascontiguousarray(images[i:i + EVAL_BATCH]), heads="both" if head == "aux" else "object")
        out.append((o.aux_logits if head == "aux" else o.class_logits).data)
    return np.concatenate(out) if out else np.zeros((0, m.spec.A if head == "aux" else m.spec.C), np.float32)


def predict(m: Model, d: Dataset) -> np.ndarray:
    """Object-head argmax on unaugmented, center-cropped, ordered images."""
    if d.C != m.spec.C:
        raise ValueError(f"dataset has {d.C} classes, model has {m.spec.C}")
    return _logits(m, _crop_to_model(m, d.images), "object").argmax(axis=1)


def accuracy(m: Model, d: Dataset) -> float:
    if len(d) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float((predict(m, d) == d.labels).mean())


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        C = self.counts.shape[0]
        w.writerow(["true\\pred"] + [str(c) for c in range(C)])
        for c in range(C):
            w.writerow([str(c)] + [str(int(v)) for v in self.counts[c]])
        return buf.getvalue()


def confusion_matrix(m: Model, d: Dataset) -> ConfusionMatrix:
    pred = predict(m, d)
    counts = np.zeros((d.C, d.C), dtype=np.int64)
    np.add.at(counts, (d.labels, pred), 1)
    return ConfusionMatrix(counts)


def jigsaw_accuracy(m: Model, d: Dataset, pset: PermutationSet, grid: GridSpec, seed: int = 0) -> float:
    """Shuffle each image by a uniformly drawn non-identity permutation; fraction of indices recovered."""
    if m.spec.aux_task != "jigsaw":
        raise ValueError("model has no jigsaw head")
    if m.spec.A != len(pset):
        raise ValueError(f"aux head has {m.spec.A} outputs but the permutation set has {len(pset)}")
    if len(pset) < 2:
        raise ValueError("need at least one non-identity permutation")
    rng = np.random.default_rng(seed)
    labels = rng.integers(1, len(pset), size=len(d))
    images = shuffle_batch(d.images, pset.as_array()[labels], grid)
    return float((_logits(m, images, "aux").argmax(axis=1) == labels).mean())


def rotation_accuracy(m: Model, d: Dataset, grid: GridSpec, seed: int = 0) -> float:
    """Rotate each center-cropped image by 1-3 quarter turns; fraction of rotations recovered."""
    if m.spec.aux_task != "rotation":
        raise ValueError("model has no rotation head")
    rng = np.random.default_rng(seed)
    labels = rng.integers(1, 4, size=len(d))
    images = rotate_batch(_crop_to_model(m, d.images), labels)
    return float((_logits(m, images, "aux").argmax(axis=1) == labels).mean())


def aux_accuracy(m: Model, d: Dataset, pset: Optional[PermutationSet], grid: GridSpec, seed: int = 0) -> float:
    if m.spec.aux_task == "jigsaw":
        return jigsaw_accuracy(m, d, pset, grid, seed)
    return rotation_accuracy(m, d, grid, seed)


def cam(m: Model, img: np.ndarray, class_index: int) -> np.ndarray:
    """Class activation map: object-head weights for ``class_index`` applied to the
    final feature maps, min-max normalized to [0, 1] (all zeros if flat)."""
    if not m.spec.gap:
        raise NotImplementedError("CAM needs a global-average-pooled backbone")
    if not 0 <= class_index < m.spec.C:
        raise ValueError(f"class index {class_index} outside [0, {m.spec.C})")
    x = _crop_to_model(m, np.asarray(img, dtype=np.float32)[None])
    fmap = forward(m, np.ascontiguousarray(x), heads="object").feature_maps.data[0].astype(np.float64)
    weights = m.object_head[0].data[:, class_index].astype(np.float64)
    return normalize_map(np.tensordot(weights, fmap, axes=(0, 0)))


def normalize_map(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def write_cam(heatmap: np.ndarray, stem: Union[str, Path]) -> List[Path]:
    """Write ``<stem>.pgm`` and ``<stem>.csv``."""
    stem = Path(stem)
    pgm, csv_path = stem.with_suffix(".pgm"), stem.with_suffix(".csv")
    write_pnm(heatmap, pgm)
    csv_path.write_text("\n".join(",".join(f"{v:.6f}" for v in row) for row in heatmap) + "\n")
    return [pgm, csv_path]


# --- ablation sweeps -------------------------------------------------------

AXES = {"alpha": "alpha", "beta": "beta", "P": "P", "grid": "grid"}
AXIS_ALIASES = {"α": "alpha", "β": "beta", "a": "alpha", "b": "beta", "p": "P"}


def normalize_axis(axis: str) -> str:
    axis = AXIS_ALIASES.get(axis, axis)
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from alpha, beta, P, grid")
    return axis


@dataclass
class SweepRow:
    label: str
    settings: Dict[str, float]
    accuracies: List[float]
    failures: List[str] = field(default_factory=list)
    degenerate: bool = False

    @property
    def mean(self) -> Optional[float]:
        return float(np.mean(self.accuracies)) if self.accuracies else None

    @property
    def std(self) -> Optional[float]:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) >= 2 else None


@dataclass
class SweepReport:
    axis: str
    rows: List[SweepRow]
    baseline: SweepRow  # Deep All reference: alpha=0, beta=1

    def wins_over_baseline(self, row: SweepRow) -> int:
        """Repetitions in which ``row`` beats the baseline run with the same seed."""
        return sum(a > b for a, b in zip(row.accuracies, self.baseline.accuracies))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "value", "alpha", "beta", "P", "grid", "runs", "mean_acc", "std_acc",
                    "deep_all_mean", "wins_vs_deep_all", "degenerate", "failures"])
        for row in [self.baseline] + self.rows:
            s = row.settings
            w.writerow([
                self.axis, row.label, s["alpha"], s["beta"], s["P"], s["grid"], len(row.accuracies),
                "" if row.mean is None else f"{row.mean:.6f}",
                "" if row.std is None else f"{row.std:.6f}",
                "" if self.baseline.mean is None else f"{self.baseline.mean:.6f}",
                self.wins_over_baseline(row),
                int(row.degenerate), len(row.failures),
            ])
        return buf.getvalue()

    def to_json(self) -> str:
        def enc(row):
            return {"label": row.label, "settings": row.settings, "accuracies": row.accuracies,
                    "mean": row.mean, "std": row.std, "failures": row.failures, "degenerate": row.degenerate}
        return json.dumps({"axis": self.axis, "baseline": enc(self.baseline), "rows": [enc(r) for r in self.rows]},
                          indent=2, sort_keys=True)


def _run_cell(args):
    from .trainer import train_da, train_dg

    cfg, sources, target, mode = args
    try:
        if mode == "da":
            model, _ = train_da(cfg, sources, target)
        else:
            model, _ = train_dg(cfg, sources)
        return accuracy(model, target), None
    except Exception as exc:  # recorded per cell; the sweep keeps going
        return None, f"{type(exc).__name__}: {exc}"


def _settings(cfg) -> Dict[str, float]:
    return {"alpha": cfg.alpha, "beta": cfg.beta, "P": cfg.P, "grid": cfg.grid}


def ablation_sweep(base_cfg, axis: str, values: Sequence, repetitions: int, sources: Sequence[Dataset],
                   target: Dataset, mode: str = "dg", workers: Optional[int] = None) -> SweepReport:
    """Train one run per (value, repetition) with seed ``base_cfg.seed + rep`` and evaluate on ``target``.

    A Deep All reference row (alpha=0, beta=1) over the same seeds is always
    included. ``workers`` defaults to the JIGEN_THREADS environment variable (1
    when unset); results do not depend on it.
    """
    axis = normalize_axis(axis)
    if not values:
        raise ValueError("sweep needs at least one value")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    cast = int if axis in ("P", "grid") else float
    values = [cast(v) for v in values]

    cells = []
    labels = ["deep_all"] + [str(v) for v in values]
    configs = [replace(base_cfg, alpha=0.0, beta=1.0)] + [replace(base_cfg, **{AXES[axis]: v}) for v in values]
    for cfg in configs:
        for rep in range(repetitions):
            cells.append((replace(cfg, seed=base_cfg.seed + rep), list(sources), target, mode))

    if workers is None:
        workers = int(os.environ.get("JIGEN_THREADS", "1") or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    rows = []
    for i, (label, cfg) in enumerate(zip(labels, configs)):
        chunk = results[i * repetitions:(i + 1) * repetitions]
        accs = [a for a, err in chunk if err is None]
        fails = [err for a, err in chunk if err is not None]
        for err in fails:
            log.warning("sweep cell %s=%s failed: %s", axis, label, err)
        rows.append(SweepRow(label, _settings(cfg), accs, fails, degenerate=cfg.beta == 0))
    return SweepReport(axis, rows[1:], rows[0])


def write_sweep(report: SweepReport, directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = directory / "sweep.csv", directory / "sweep.json"
    csv_path.write_text(report.to_csv())
    json_path.write_text(report.to_json() + "\n")
    return [csv_path, json_path]
