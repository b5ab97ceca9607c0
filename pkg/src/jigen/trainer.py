"""Training loops for domain generalization (DG) and unsupervised adaptation (DA).

Batch ``step`` of epoch ``epoch`` is always composed from
``np.random.default_rng([seed, epoch, step])`` (source) and
``np.random.default_rng([seed, epoch, step, 1])`` (target), so runs are
reproducible and a DA run with zero target weights replays the DG trajectory.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import evalkit
from .datasets import Batch, Dataset, compose_batch, split
from .model import Model, ModelSpec, build_model, da_terms, forward, jigen_loss
from .patchwork import AugConfig, GridSpec
from .permgen import PermutationSet, generate_permutation_set
from .tensorgrad import SGD, add, backward, load_checkpoint, save_checkpoint
from .tensorgrad.checkpoint import CheckpointError

log = logging.getLogger(__name__)

CONFIG_VERSION = "1"
METRICS_HEADER = ("epoch", "l_c", "l_p", "l_e", "val_acc", "jigsaw_acc", "lr")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.7
    beta: float = 0.6
    eta: float = 0.1
    alpha_s: float = 0.7
    alpha_t: float = 0.7
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.001
    lr_drop_factor: float = 0.1
    lr_drop_at: float = 0.8
    momentum: float = 0.0
    seed: int = 0
    aux_task: str = "jigsaw"
    grid: int = 3
    P: int = 30
    holdout_fraction: float = 0.1
    crop_retain_min: float = 0.8
    crop_retain_max: float = 1.0
    hflip_prob: float = 0.5
    tile_gray_prob: float = 0.1

    def validate(self) -> None:
        if not 0 <= self.beta <= 1:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        for name in ("alpha", "eta", "alpha_s", "alpha_t", "momentum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.lr_drop_at <= 1:
            raise ValueError(f"lr_drop_at must be in (0, 1], got {self.lr_drop_at}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.aux_task not in ("jigsaw", "rotation"):
            raise ValueError(f"unknown aux_task {self.aux_task!r}")
        if self.grid < 2:
            raise ValueError("grid must be >= 2")
        if self.aux_task == "jigsaw" and self.P < 2:
            raise ValueError("jigsaw task needs P >= 2")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in (0, 1)")
        self.aug()

    def aug(self) -> AugConfig:
        return AugConfig(self.crop_retain_min, self.crop_retain_max, self.hflip_prob, self.tile_gray_prob)

    @property
    def aux_classes(self) -> int:
        return self.P if self.aux_task == "jigsaw" else 4

    def to_fields(self) -> Dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) if f.type != "str" else getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_fields(cls, data: Dict[str, str]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, text in data.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kind = known[key].type
            try:
                kwargs[key] = int(text) if kind == "int" else float(text) if kind == "float" else text.strip()
            except ValueError:
                raise ValueError(f"config key {key!r}: cannot parse {text!r} as {kind}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def parse_kv(text: str) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def format_kv(data: Dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in data.items())


def load_config(path: Union[str, Path]) -> TrainConfig:
    return TrainConfig.from_fields(parse_kv(Path(path).read_text()))


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``lr`` before ceil(lr_drop_at * epochs), ``lr * lr_drop_factor`` from then on."""
    # round() guards against 0.8 * 30 = 24.000000000000004
    drop_epoch = math.ceil(round(cfg.lr_drop_at * cfg.epochs, 9))
    return cfg.lr if epoch < drop_epoch else cfg.lr * cfg.lr_drop_factor


@dataclass
class EpochRecord:
    epoch: int
    l_c: float
    l_p: float
    l_e: float
    val_acc: float
    jigsaw_acc: float
    lr: float


@dataclass
class MetricLog:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch records must be consecutive")
        self.records.append(rec)

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.records:
            w.writerow([r.epoch] + [f"{getattr(r, k):.8g}" for k in METRICS_HEADER[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != METRICS_HEADER:
            raise ValueError("metrics file has an unexpected header")
        out = cls()
        for row in rows[1:]:
            out.append(EpochRecord(int(row[0]), *(float(v) for v in row[1:])))
        return out


@lru_cache(maxsize=16)
def permutation_set(n_tiles: int, P: int, seed: int) -> PermutationSet:
    return generate_permutation_set(n_tiles, P, seed)


@dataclass
class RunSetup:
    grid: GridSpec
    pset: Optional[PermutationSet]
    spec: ModelSpec


def make_setup(cfg: TrainConfig, image_hw: Tuple[int, int], C: int) -> RunSetup:
    grid = GridSpec(cfg.grid, *image_hw)
    pset = permutation_set(grid.n_tiles, cfg.P, cfg.seed) if cfg.aux_task == "jigsaw" else None
    spec = ModelSpec(C=C, A=cfg.aux_classes, aux_task=cfg.aux_task, input_size=grid.crop_hw)
    return RunSetup(grid, pset, spec)


def batch_rng(seed: int, epoch: int, step: int, stream: int = 0) -> np.random.Generator:
    key = [seed, epoch, step] if stream == 0 else [seed, epoch, step, stream]
    return np.random.default_rng(key)


def _check_sources(sources: Sequence[Dataset]) -> None:
    if not sources:
        raise ValueError("at least one source dataset is required")
    shapes = {s.images.shape[1:] for s in sources}
    if len(shapes) != 1:
        raise ValueError(f"source image shapes differ: {shapes}")
    if len({s.C for s in sources}) != 1:
        raise ValueError("source class counts differ")


def _holdout(cfg: TrainConfig, sources: Sequence[Dataset]) -> Tuple[List[Dataset], Dataset]:
    trains, holds = [], []
    for i, s in enumerate(sources):
        tr, ho = split(s, cfg.holdout_fraction, cfg.seed + i)
        trains.append(tr)
        holds.append(ho)
    holdout = Dataset(
        "holdout", -1,
        np.concatenate([h.images for h in holds]),
        np.concatenate([h.labels for h in holds]),
        sources[0].C,
    )
    return trains, holdout


def train_step(model: Model, opt: SGD, batch: Batch, alpha: float, lr: float) -> Tuple[float, float, float]:
    """One SGD step on the joint loss; returns (total, L_c, L_p)."""
    out = forward(model, batch.images)
    total, l_c, l_p = jigen_loss(out, batch, alpha)
    backward(total)
    opt.step(lr)
    return total.item(), l_c.item(), l_p.item()


def _epoch_record(epoch, model, setup, holdout, cfg, sums, n_steps, lr, l_e) -> EpochRecord:
    val_acc = evalkit.accuracy(model, holdout)
    aux_acc = evalkit.aux_accuracy(model, holdout, setup.pset, setup.grid, seed=cfg.seed)
    return EpochRecord(epoch, float(sums[0] / n_steps), float(sums[1] / n_steps), float(l_e), val_acc, aux_acc, lr)


def train_dg(
    cfg: TrainConfig,
    sources: Sequence[Dataset],
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[Model, MetricLog]:
    cfg.validate()
    _check_sources(sources)
    trains, holdout = _holdout(cfg, sources)
    setup = make_setup(cfg, sources[0].images.shape[-2:], sources[0].C)
    model = build_model(setup.spec, cfg.seed)
    opt = SGD(model.parameters(), cfg.momentum)
    aug = cfg.aug()
    steps = math.ceil(sum(len(t) for t in trains) / cfg.batch_size)
    metrics = MetricLog()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        sums = np.zeros(2)
        for step in range(steps):
            batch = compose_batch(trains, cfg.batch_size, cfg.beta, setup.pset, setup.grid, aug,
                                  batch_rng(cfg.seed, epoch, step), cfg.aux_task)
            _, l_c, l_p = train_step(model, opt, batch, cfg.alpha, lr)
            sums += (l_c, l_p)
        rec = _epoch_record(epoch, model, setup, holdout, cfg, sums, steps, lr, float("nan"))
        metrics.append(rec)
        log.info("epoch %d l_c=%.4f l_p=%.4f val_acc=%.4f aux_acc=%.4f", epoch, rec.l_c, rec.l_p, rec.val_acc, rec.jigsaw_acc)
        if on_epoch:
            on_epoch(rec)
    return model, metrics


def train_da(
    cfg: TrainConfig,
    sources: Sequence[Dataset],
    target_unlabeled: Dataset,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[Model, MetricLog]:
    """DG training plus, per step, one unlabeled target batch (entropy + aux loss).

    Source and target gradients are summed before a single SGD step. Target
    labels are replaced by zeros before any batch is composed.
    """
    cfg.validate()
    _check_sources(sources)
    if target_unlabeled.images.shape[1:] != sources[0].images.shape[1:]:
        raise ValueError("target images must match source image shape")
    target = replace(target_unlabeled, labels=np.zeros(len(target_unlabeled), dtype=np.int64))
    trains, holdout = _holdout(cfg, sources)
    setup = make_setup(cfg, sources[0].images.shape[-2:], sources[0].C)
    model = build_model(setup.spec, cfg.seed)
    opt = SGD(model.parameters(), cfg.momentum)
    aug = cfg.aug()
    steps = math.ceil(sum(len(t) for t in trains) / cfg.batch_size)
    metrics = MetricLog()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        sums = np.zeros(3)
        for step in range(steps):
            src = compose_batch(trains, cfg.batch_size, cfg.beta, setup.pset, setup.grid, aug,
                                batch_rng(cfg.seed, epoch, step), cfg.aux_task)
            tgt = compose_batch([target], cfg.batch_size, cfg.beta, setup.pset, setup.grid, aug,
                                batch_rng(cfg.seed, epoch, step, 1), cfg.aux_task)
            src_total, l_c, l_p = jigen_loss(forward(model, src.images), src, cfg.alpha_s)
            tgt_total, l_e, _ = da_terms(forward(model, tgt.images), tgt, cfg.alpha_t, cfg.eta)
            backward(src_total)
            if tgt_total.parents:
                backward(tgt_total)
            opt.step(lr)
            sums += (l_c.item(), l_p.item(), l_e.item())
        rec = _epoch_record(epoch, model, setup, holdout, cfg, sums[:2], steps, lr, sums[2] / steps)
        metrics.append(rec)
        log.info("epoch %d l_c=%.4f l_p=%.4f l_e=%.4f val_acc=%.4f", epoch, rec.l_c, rec.l_p, rec.l_e, rec.val_acc)
        if on_epoch:
            on_epoch(rec)
    return model, metrics


# --- run bundles -----------------------------------------------------------

class RunLoadError(ValueError):
    pass


@dataclass
class RunBundle:
    model: Model
    cfg: TrainConfig
    log: MetricLog
    extra: Dict[str, str] = field(default_factory=dict)


def save_run(model: Model, metrics: MetricLog, cfg: TrainConfig, directory: Union[str, Path],
             extra: Optional[Dict[str, str]] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = {"format_version": CONFIG_VERSION}
    data.update(cfg.to_fields())
    data.update(model.spec.to_fields())
    for k, v in (extra or {}).items():
        data[f"extra.{k}"] = v
    (directory / "config.txt").write_text(format_kv(data))
    save_checkpoint(model.parameters(), directory / "checkpoint.jgck")
    (directory / "metrics.csv").write_text(metrics.to_csv())
    return directory


def load_run(directory: Union[str, Path]) -> RunBundle:
    directory = Path(directory)
    try:
        data = parse_kv((directory / "config.txt").read_text())
    except OSError as exc:
        raise RunLoadError(f"{directory}: no run config ({exc})") from exc
    if data.pop("format_version", None) != CONFIG_VERSION:
        raise RunLoadError(f"{directory}: unsupported run format version")
    model_fields = {k: data.pop(k) for k in list(data) if k.startswith("model.")}
    extra = {k[len("extra."):]: data.pop(k) for k in list(data) if k.startswith("extra.")}
    try:
        cfg = TrainConfig.from_fields(data)
        spec = ModelSpec.from_fields(model_fields)
        model = build_model(spec, cfg.seed)
        model.load_state(load_checkpoint(directory / "checkpoint.jgck"))
        metrics = MetricLog.from_csv((directory / "metrics.csv").read_text())
    except (CheckpointError, KeyError, ValueError, OSError) as exc:
        raise RunLoadError(f"{directory}: {exc}") from exc
    return RunBundle(model, cfg, metrics, extra)
