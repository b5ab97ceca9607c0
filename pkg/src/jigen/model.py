"""Shared convolutional backbone with an object head and an auxiliary (jigsaw or rotation) head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .datasets import Batch
from .tensorgrad import (
    Parameter,
    Tensor,
    add,
    affine,
    conv2d,
    entropy,
    global_avg_pool,
    maxpool2d,
    relu,
    scale,
    softmax_cross_entropy,
)

AUX_TASKS = ("jigsaw", "rotation")


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    pool: int = 0  # maxpool window (and stride) after the relu; 0 = none

    def to_text(self) -> str:
        return f"{self.out_channels}x{self.kernel}/{self.stride}/{self.padding}/{self.pool}"

    @classmethod
    def from_text(cls, text: str) -> "ConvSpec":
        head, *rest = text.strip().split("/")
        out, kernel = head.split("x")
        stride, padding, pool = (int(v) for v in rest)
        return cls(int(out), int(kernel), stride, padding, pool)


DEFAULT_CONVS = (ConvSpec(32, 3, pool=2), ConvSpec(64, 3, pool=2), ConvSpec(128, 3))


@dataclass(frozen=True)
class ModelSpec:
    C: int = 10
    A: int = 30
    aux_task: str = "jigsaw"
    convs: Tuple[ConvSpec, ...] = DEFAULT_CONVS
    gap: bool = True
    in_channels: int = 3
    input_size: Tuple[int, int] = (30, 30)

    def validate(self) -> None:
        if not self.gap:
            raise ValueError("backbone must end in global average pooling")
        if self.C < 2 or self.A < 2:
            raise ValueError(f"need C >= 2 and A >= 2, got C={self.C}, A={self.A}")
        if self.aux_task not in AUX_TASKS:
            raise ValueError(f"aux_task must be one of {AUX_TASKS}, got {self.aux_task!r}")
        if not self.convs:
            raise ValueError("conv stack is empty")
        h, w = self.input_size
        for i, c in enumerate(self.convs):
            if c.out_channels < 1 or c.kernel < 1 or c.stride < 1 or c.padding < 0 or c.pool < 0:
                raise ValueError(f"conv layer {i} has invalid settings: {c}")
            h = (h + 2 * c.padding - c.kernel) // c.stride + 1
            w = (w + 2 * c.padding - c.kernel) // c.stride + 1
            if c.pool:
                h, w = h // c.pool, w // c.pool
            if h < 1 or w < 1:
                raise ValueError(f"input {self.input_size} collapses to nothing at conv layer {i}")

    @property
    def feature_dim(self) -> int:
        return self.convs[-1].out_channels

    def to_fields(self) -> Dict[str, str]:
        return {
            "model.C": str(self.C),
            "model.A": str(self.A),
            "model.aux_task": self.aux_task,
            "model.convs": ",".join(c.to_text() for c in self.convs),
            "model.in_channels": str(self.in_channels),
            "model.input_size": f"{self.input_size[0]}x{self.input_size[1]}",
        }

    @classmethod
    def from_fields(cls, fields: Dict[str, str]) -> "ModelSpec":
        h, w = fields["model.input_size"].split("x")
        return cls(
            C=int(fields["model.C"]),
            A=int(fields["model.A"]),
            aux_task=fields["model.aux_task"],
            convs=tuple(ConvSpec.from_text(t) for t in fields["model.convs"].split(",")),
            in_channels=int(fields["model.in_channels"]),
            input_size=(int(h), int(w)),
        )


@dataclass
class Model:
    spec: ModelSpec
    backbone: List[Tuple[Parameter, Parameter]]
    object_head: Tuple[Parameter, Parameter]
    aux_head: Tuple[Parameter, Parameter]

    def parameters(self) -> List[Parameter]:
        out = [p for pair in self.backbone for p in pair]
        return out + list(self.object_head) + list(self.aux_head)

    def backbone_parameters(self) -> List[Parameter]:
        return [p for pair in self.backbone for p in pair]

    def state(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = [p.name for p in params if p.name not in state]
        if missing or len(state) != len(params):
            raise ValueError(f"state does not match model parameters (missing: {missing})")
        for p in params:
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float32)
            p.zero_grad()


def _uniform(rng, shape, bound) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Seeded fan-in uniform init: He bound for conv layers, 1/sqrt(fan_in) for heads, zero biases.

    Parameters are drawn backbone first, then object head, then aux head, so a
    model with the same seed but a different aux head shares backbone and
    object-head values bit for bit.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    backbone = []
    cin = spec.in_channels
    for i, c in enumerate(spec.convs):
        fan_in = cin * c.kernel * c.kernel
        w = Parameter(_uniform(rng, (c.out_channels, cin, c.kernel, c.kernel), np.sqrt(6.0 / fan_in)), f"backbone.conv{i}.weight")
        b = Parameter(np.zeros(c.out_channels, np.float32), f"backbone.conv{i}.bias")
        backbone.append((w, b))
        cin = c.out_channels
    d = spec.feature_dim
    obj = (Parameter(_uniform(rng, (d, spec.C), 1 / np.sqrt(d)), "object.weight"), Parameter(np.zeros(spec.C, np.float32), "object.bias"))
    aux = (Parameter(_uniform(rng, (d, spec.A), 1 / np.sqrt(d)), "aux.weight"), Parameter(np.zeros(spec.A, np.float32), "aux.bias"))
    return Model(spec, backbone, obj, aux)


@dataclass
class Outputs:
    class_logits: Tensor
    aux_logits: Tensor
    feature_maps: Tensor  # last conv activation, (B, D, h, w)
    features: Tensor  # GAP output, (B, D)


def forward_backbone(m: Model, images) -> Tuple[Tensor, Tensor]:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    expected = (m.spec.in_channels,) + tuple(m.spec.input_size)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"model expects (B, {expected[0]}, {expected[1]}, {expected[2]}) input, got {x.shape}")
    h = x
    for (w, b), c in zip(m.backbone, m.spec.convs):
        h = relu(conv2d(h, w, b, stride=c.stride, padding=c.padding))
        if c.pool:
            h = maxpool2d(h, c.pool)
    return h, global_avg_pool(h)


def forward(m: Model, images, heads: str = "both") -> Outputs:
    """One backbone pass feeding both heads (``heads="object"`` skips the aux head)."""
    fmap, feat = forward_backbone(m, images)
    cls = affine(feat, *m.object_head)
    aux = affine(feat, *m.aux_head) if heads == "both" else None
    return Outputs(cls, aux, fmap, feat)


def _weighted_sum(terms) -> Tensor:
    # zero-weight terms are left out of the graph entirely so they cannot leak
    # gradient (not even signed zeros) into shared parameters
    total = None
    for weight, term in terms:
        if weight == 0:
            continue
        part = term if weight == 1 else scale(term, weight)
        total = part if total is None else add(total, part)
    return total if total is not None else Tensor(np.zeros(()))


def jigen_loss(out: Outputs, batch: Batch, alpha: float) -> Tuple[Tensor, Tensor, Tensor]:
    """Object loss on ordered rows only, aux loss on every row; total = L_c + alpha * L_p."""
    l_c = softmax_cross_entropy(out.class_logits, batch.class_labels, batch.ordered_mask.astype(np.float64))
    l_p = softmax_cross_entropy(out.aux_logits, batch.jigsaw_labels)
    return _weighted_sum([(1.0, l_c), (alpha, l_p)]), l_c, l_p


def da_terms(out: Outputs, batch: Batch, alpha_t: float, eta: float) -> Tuple[Tensor, Tensor, Tensor]:
    """(total, entropy on ordered rows, aux loss on all rows) for an unlabeled target batch."""
    l_e = entropy(out.class_logits, mask=batch.ordered_mask)
    l_p = softmax_cross_entropy(out.aux_logits, batch.jigsaw_labels)
    return _weighted_sum([(eta, l_e), (alpha_t, l_p)]), l_e, l_p


def da_loss(out: Outputs, batch: Batch, alpha_t: float, eta: float) -> Tensor:
    return da_terms(out, batch, alpha_t, eta)[0]
