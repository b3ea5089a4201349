"""Teacher/student network, its losses and the per-sample training loop.

Teacher and student share this exact architecture: a small strided conv
backbone feeding a detection head and a relation head. Each head runs
``deform_layers`` deformable 3x3 convolutions whose sampling offsets come from
auxiliary zero-initialised 3x3 convolutions, followed by a 1x1 projection.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .gradcore import Tensor, backward, clip_gradients, concat, conv2d, deform_conv2d, mse, relu, sigmoid
from .gradcore.optim import Optimizer
from .fields import ObjectTargets, RelationTargets

log = logging.getLogger(__name__)

REL_CHANNELS = 7


@dataclass(frozen=True)
class NetworkConfig:
    widths: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 1, 1)
    head_width: int = 32
    kernel: int = 3
    deform_layers: int = 2
    num_classes: int = 3
    num_predicates: int = 6
    prior_logit: float = -2.0
    seed: int = 0

    def __post_init__(self):
        if self.deform_layers < 1:
            raise ValueError("each head needs at least one deformable layer")
        if len(self.widths) != len(self.strides):
            raise ValueError("widths and strides must have the same length")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.num_classes < 1 or self.num_predicates < 1:
            raise ValueError("num_classes and num_predicates must be positive")

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    def architecture_hash(self) -> str:
        """Hash of everything that fixes parameter shapes (the seed is excluded)."""
        d = asdict(self)
        d.pop("seed")
        d.pop("prior_logit")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        for key in ("widths", "strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ForwardOutput:
    h: Tensor  # [C, Hf, Wf]
    s: Tensor  # [2, Hf, Wf]
    r: Tensor  # [P, 7, Hf, Wf]
    offsets: list[Tensor]  # detection-head layers then relation-head layers
    features: Tensor  # backbone output


@dataclass
class LossBreakdown:
    det: float = 0.0
    rel: float = 0.0
    semi: float = 0.0
    feature: float = 0.0
    total: float = 0.0
    mode: int = 0
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict[str, float]:
        return {"det": self.det, "rel": self.rel, "semi": self.semi, "feature": self.feature, "total": self.total}


class Network:
    """Parameters plus a pure forward function."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def forward(self, x) -> ForwardOutput:
        return forward(x, self.params, self.config)

    def copy(self) -> "Network":
        return Network(self.config, {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in self.params.items()})

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: p.shape for k, p in self.params.items()}

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def is_backbone(name: str) -> bool:
    return name.startswith("backbone.")


def _head_layout(config: NetworkConfig) -> dict[str, int]:
    return {"det": config.num_classes + 2, "rel": config.num_predicates * REL_CHANNELS}


def init_params(config: NetworkConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    k = config.kernel
    params: dict[str, np.ndarray] = {}

    def he(cout, cin, ks):
        return rng.normal(0.0, math.sqrt(2.0 / (cin * ks * ks)), size=(cout, cin, ks, ks))

    cin = 3
    for i, width in enumerate(config.widths):
        params[f"backbone.{i}.weight"] = he(width, cin, k)
        params[f"backbone.{i}.bias"] = np.zeros(width)
        cin = width
    feat = cin
    for head, nout in _head_layout(config).items():
        c = feat
        for layer in range(config.deform_layers):
            params[f"{head}.offset{layer}.weight"] = np.zeros((2 * k * k, c, k, k))
            params[f"{head}.offset{layer}.bias"] = np.zeros(2 * k * k)
            params[f"{head}.dcn{layer}.weight"] = he(config.head_width, c, k)
            params[f"{head}.dcn{layer}.bias"] = np.zeros(config.head_width)
            c = config.head_width
        params[f"{head}.proj.weight"] = rng.normal(0.0, math.sqrt(1.0 / c), size=(nout, c, 1, 1))
        bias = np.zeros(nout)
        if head == "det":
            bias[: config.num_classes] = config.prior_logit
        else:
            bias[0::REL_CHANNELS] = config.prior_logit
        params[f"{head}.proj.bias"] = bias
    return {name: Tensor(v, requires_grad=True, name=name) for name, v in params.items()}


def _head(x: Tensor, params, prefix: str, config: NetworkConfig, offsets: list[Tensor]) -> Tensor:
    pad = config.kernel // 2
    y = x
    for layer in range(config.deform_layers):
        off = conv2d(y, params[f"{prefix}.offset{layer}.weight"], params[f"{prefix}.offset{layer}.bias"], 1, pad)
        offsets.append(off)
        y = relu(deform_conv2d(y, params[f"{prefix}.dcn{layer}.weight"], off, params[f"{prefix}.dcn{layer}.bias"]))
    return conv2d(y, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"], 1, 0)


def forward(x, params: dict[str, Tensor], config: NetworkConfig) -> ForwardOutput:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"network input must be [3,H,W], got {x.shape}")
    R = config.stride
    if x.shape[1] % R or x.shape[2] % R:
        raise ValueError(f"input dims {x.shape[1:]} are not divisible by the feature stride {R}")
    pad = config.kernel // 2
    y = x
    for i, stride in enumerate(config.strides):
        y = relu(conv2d(y, params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"], stride, pad))
    features = y
    offsets: list[Tensor] = []
    det = _head(features, params, "det", config, offsets)
    rel = _head(features, params, "rel", config, offsets)
    C, P = config.num_classes, config.num_predicates
    hf, wf = det.shape[1:]
    h = sigmoid(det[:C])
    s = det[C:]
    r = rel.reshape(P, REL_CHANNELS, hf, wf)
    alpha = sigmoid(r[:, 0:1])
    r = concat([alpha, r[:, 1:]], axis=1)
    return ForwardOutput(h=h, s=s, r=r, offsets=offsets, features=features)


# ---------------------------------------------------------------- losses


MASKED_NORMS = ("all", "support")


def masked_mse(a: Tensor, b: np.ndarray, mask: np.ndarray, over: str = "all") -> Tensor:
    """Squared error restricted to ``mask``.

    ``over="support"`` averages over the selected elements only;
    ``over="all"`` divides the masked sum by every element, which keeps the
    regression terms on the same per-element scale as the dense heatmap and
    confidence terms (with the support mean, a handful of centre cells
    outweigh the whole heatmap and training collapses it to zero).
    """
    if over == "support":
        return mse(a, b, mask=mask)
    if over != "all":
        raise ValueError(f"unknown masked normalisation {over!r}; choose from {MASKED_NORMS}")
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)
    return mse(a * Tensor(m), Tensor(np.asarray(b) * m))


def loss_det(out: ForwardOutput, targets: ObjectTargets, over: str = "all") -> Tensor:
    """Heatmap MSE over every cell plus size error at ground-truth centres."""
    if out.h.shape != targets.heatmap.shape or out.s.shape != targets.size.shape:
        raise ValueError(
            f"detection shape mismatch: h {out.h.shape} vs {targets.heatmap.shape}, s {out.s.shape} vs {targets.size.shape}"
        )
    return mse(out.h, targets.heatmap) + masked_mse(out.s, targets.size, targets.center_mask[None], over)


def loss_rel(out: ForwardOutput, targets: RelationTargets, over: str = "all") -> Tensor:
    """Confidence MSE everywhere plus geometry error on the support mask."""
    if out.r.shape != targets.field.shape:
        raise ValueError(f"relation shape mismatch: {out.r.shape} vs {targets.field.shape}")
    alpha = mse(out.r[:, 0], targets.field[:, 0])
    geom = masked_mse(out.r[:, 1:], targets.field[:, 1:], targets.support[:, None], over)
    return alpha + geom


def select_guided(offsets: Sequence, n_det_layers: int, det: bool = True, rel: bool = True) -> list:
    chosen = []
    for i, o in enumerate(offsets):
        if (i < n_det_layers and det) or (i >= n_det_layers and rel):
            chosen.append(o)
    return chosen


def loss_semi(
    student: Sequence[Tensor],
    teacher: Sequence,
    n_det_layers: int,
    det: bool = True,
    rel: bool = True,
) -> Tensor:
    """Mean squared offset difference over the selected head layers.

    Teacher offsets are constants; nothing flows back into them.
    """
    if len(student) != len(teacher):
        raise ValueError(f"offset lists differ in length: {len(student)} vs {len(teacher)}")
    for i, (s, t) in enumerate(zip(student, teacher)):
        tshape = t.shape if hasattr(t, "shape") else np.shape(t)
        if tuple(s.shape) != tuple(tshape):
            raise ValueError(f"offset layer {i} misaligned: {s.shape} vs {tshape}")
    s_sel = select_guided(student, n_det_layers, det, rel)
    t_sel = select_guided(teacher, n_det_layers, det, rel)
    if not s_sel:
        return Tensor(0.0)
    s_cat = concat([o.reshape(-1) for o in s_sel])
    t_cat = np.concatenate([np.asarray(t.data if isinstance(t, Tensor) else t).reshape(-1) for t in t_sel])
    return mse(s_cat, Tensor(t_cat))


def loss_feature(student_features: Tensor, teacher_features) -> Tensor:
    t = teacher_features.data if isinstance(teacher_features, Tensor) else teacher_features
    return mse(student_features, Tensor(np.asarray(t)))


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(det, rel, semi=0.0, mode: int = 0, feature=0.0, fully: bool = False, semi_weight: float = 1.0) -> LossBreakdown:
    """``det + rel + semi * mode`` (plus the feature term for fully-teaching)."""
    if mode not in (0, 1):
        raise ValueError(f"mode must be 0 or 1, got {mode!r}")
    graph = None
    if any(isinstance(t, Tensor) for t in (det, rel, semi, feature)):
        graph = det + rel + semi * (float(mode) * semi_weight)
        if fully:
            graph = graph + feature
    total = _value(det) + _value(rel) + _value(semi) * (float(mode) * semi_weight)
    if fully:
        total = total + _value(feature)
    return LossBreakdown(
        det=_value(det),
        rel=_value(rel),
        semi=_value(semi),
        feature=_value(feature),
        total=total,
        mode=mode,
        graph=graph,
    )


# ---------------------------------------------------------------- training


@dataclass
class Regime:
    lr_backbone: float = 5e-5
    lr_heads: float = 5e-4
    clip: float = 5e-5
    epochs: int = 60
    optimizer: str = "adam"
    semi_weight: float = 1.0
    feature_weight: float = 1.0
    masked_norm: str = "all"

    def __post_init__(self):
        if self.masked_norm not in MASKED_NORMS:
            raise ValueError(f"masked_norm must be one of {MASKED_NORMS}, got {self.masked_norm!r}")


@dataclass
class TrainItem:
    id: str
    input: np.ndarray
    objects: ObjectTargets
    relations: RelationTargets


class NonFiniteLoss(FloatingPointError):
    def __init__(self, sample_id: str, detail: str):
        super().__init__(f"non-finite loss on sample {sample_id!r}: {detail}")
        self.sample_id = sample_id


# teacher(item) -> (offsets, backbone features) as plain arrays
TeacherFn = Callable[[TrainItem], tuple[list[np.ndarray], np.ndarray]]


def lr_rule(regime: Regime) -> Callable[[str], float]:
    return lambda name: regime.lr_backbone if is_backbone(name) else regime.lr_heads


def compute_loss(
    net: Network,
    item: TrainItem,
    mode: int = 0,
    teacher: tuple[list[np.ndarray], np.ndarray] | None = None,
    guide: tuple[bool, bool] = (True, True),
    fully: bool = False,
    regime: Regime | None = None,
) -> LossBreakdown:
    regime = regime or Regime()
    out = net.forward(item.input)
    det = loss_det(out, item.objects, regime.masked_norm)
    rel = loss_rel(out, item.relations, regime.masked_norm)
    semi: Tensor | float = 0.0
    feature: Tensor | float = 0.0
    if mode == 1 and teacher is not None:
        t_off, t_feat = teacher
        semi = loss_semi(out.offsets, t_off, net.config.deform_layers, *guide)
        if fully:
            feature = loss_feature(out.features, t_feat) * regime.feature_weight
    return total_loss(det, rel, semi, mode, feature, fully and mode == 1, regime.semi_weight)


def train_step(net: Network, opt: Optimizer, loss: LossBreakdown, regime: Regime, sample_id: str) -> None:
    if not np.isfinite(loss.total):
        raise NonFiniteLoss(sample_id, f"total={loss.total}")
    for p in net.params.values():
        p.zero_grad()
    backward(loss.graph)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in net.params.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(sample_id, f"non-finite gradient of {k}")
    opt.step(clip_gradients(grads, regime.clip))


def mean_breakdown(rows: Iterable[LossBreakdown], mode: int) -> LossBreakdown:
    rows = list(rows)
    n = max(len(rows), 1)
    return LossBreakdown(
        det=sum(r.det for r in rows) / n,
        rel=sum(r.rel for r in rows) / n,
        semi=sum(r.semi for r in rows) / n,
        feature=sum(r.feature for r in rows) / n,
        total=sum(r.total for r in rows) / n,
        mode=mode,
    )


def train_epoch(
    net: Network,
    items: Sequence[TrainItem],
    opt: Optimizer,
    regime: Regime,
    mode: int = 0,
    teacher: TeacherFn | None = None,
    guide: tuple[bool, bool] = (True, True),
    fully: bool = False,
) -> LossBreakdown:
    """One pass over ``items`` in the given order; returns the mean breakdown."""
    if not items:
        raise ValueError("train_epoch needs a nonempty slice")
    rows = []
    for item in items:
        t = teacher(item) if (mode == 1 and teacher is not None) else None
        loss = compute_loss(net, item, mode, t, guide, fully, regime)
        train_step(net, opt, loss, regime, item.id)
        rows.append(replace(loss, graph=None))  # keeping the graph would hold every step's activations
    return mean_breakdown(rows, mode)
