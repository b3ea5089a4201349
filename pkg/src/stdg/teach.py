"""Two-phase depth-guided training and its ablation variants.

Phase one trains a teacher on a depth encoding (HHA by default) with the
offset term switched off. Phase two trains a student of identical
architecture on RGB, with the frozen teacher's deformable offsets as extra
regression targets.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .eval import DecodeOptions, EvalItem, EvalReport, run_eval
from .fields import ObjectTargets, RelationTargets, encode_objects, encode_relations
from .gradcore.optim import OptimConfig, make_optimizer
from .hha import CameraModel, HhaParams, compute_hha, teacher_input
from .model import (
    LossBreakdown,
    Network,
    NetworkConfig,
    NonFiniteLoss,
    Regime,
    TrainItem,
    compute_loss,
    loss_det,
    loss_rel,
    lr_rule,
    mean_breakdown,
    total_loss,
    train_epoch,
    train_step,
)
from .scenes.generate import derive_seed

log = logging.getLogger(__name__)

VARIANTS = (
    "semi",
    "combine_training",
    "no_det_guide",
    "no_rel_guide",
    "raw_depth_teacher",
    "h_only",
    "hh_only",
    "fully_teaching",
    "no_teacher_baseline",
)
NEEDS_TEACHER = ("semi", "no_det_guide", "no_rel_guide", "fully_teaching")
TEACHER_ENCODING = {"raw_depth_teacher": "raw_depth", "h_only": "h_only", "hh_only": "hh_only"}

# display order and labels of the ablation table
ABLATION_ROWS = (
    ("combine_training", "combine training"),
    ("no_det_guide", "no detection guide"),
    ("no_rel_guide", "no relation guide"),
    ("raw_depth_teacher", "raw depth teacher"),
    ("h_only", "disparity only"),
    ("hh_only", "disparity + height"),
    ("fully_teaching", "fully teaching"),
    ("no_teacher_baseline", "no teacher"),
    ("semi", "semi-teaching"),
)
EPOCH_COLUMNS = ("epoch", "det", "rel", "semi", "feature", "total")


class PlanError(ValueError):
    pass


class MissingDepth(ValueError):
    def __init__(self, sample_id: str):
        super().__init__(f"sample {sample_id!r} has no depth")
        self.sample_id = sample_id


class ConfigMismatch(ValueError):
    pass


@dataclass
class TeachingPlan:
    variant: str = "semi"
    teacher_checkpoint: str | None = None
    seeds: tuple[int, ...] = (0,)
    epochs: int | None = None  # overrides the regime's epoch count when set
    dataset: str | None = None
    cache_teacher: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PlanError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        self.seeds = tuple(int(s) for s in self.seeds)

    def check(self, has_teacher: bool) -> None:
        if self.variant in NEEDS_TEACHER and not has_teacher:
            raise PlanError(f"variant {self.variant!r} needs a trained teacher")
        if self.variant == "combine_training" and has_teacher:
            raise PlanError("combine_training trains its own teacher and must not be given one")

    @property
    def mode(self) -> int:
        return 0 if self.variant == "no_teacher_baseline" else 1

    @property
    def guide(self) -> tuple[bool, bool]:
        return {"no_det_guide": (False, True), "no_rel_guide": (True, False)}.get(self.variant, (True, True))

    @property
    def fully(self) -> bool:
        return self.variant == "fully_teaching"

    @property
    def teacher_encoding(self) -> str:
        return TEACHER_ENCODING.get(self.variant, "hha")

    def to_json(self) -> dict:
        return {**asdict(self), "seeds": list(self.seeds)}


@dataclass
class Prepared:
    """A sample with its dense targets and every requested teacher input."""

    id: str
    split: str
    graph: object
    rgb: np.ndarray
    objects: ObjectTargets
    relations: RelationTargets
    teacher_inputs: dict[str, np.ndarray] = field(default_factory=dict)
    gravity: dict = field(default_factory=dict)

    def item(self, encoding: str | None = None) -> TrainItem:
        if encoding is None:
            x = self.rgb
        else:
            if encoding not in self.teacher_inputs:
                raise MissingDepth(self.id)
            x = self.teacher_inputs[encoding]
        return TrainItem(self.id, x, self.objects, self.relations)

    def eval_item(self, encoding: str | None = None) -> EvalItem:
        return EvalItem(self.id, self.item(encoding).input, self.graph)


def prepare_samples(
    samples: Sequence,
    config: NetworkConfig,
    encodings: Sequence[str] = ("hha",),
    camera: CameraModel | None = None,
    hha_params: HhaParams | None = None,
) -> list[Prepared]:
    out = []
    R = config.stride
    for s in samples:
        dims = s.rgb.shape[1:]
        p = Prepared(
            s.id,
            s.split,
            s.graph,
            s.rgb,
            encode_objects(s.graph, dims, R, config.num_classes),
            encode_relations(s.graph, dims, R, config.num_predicates),
        )
        if s.depth is not None and encodings:
            cam = getattr(s, "camera", None) or camera
            hha = compute_hha(s.depth, cam, hha_params)
            p.gravity = {"low_confidence": bool(hha.gravity.low_confidence), "residual_deg": float(hha.gravity.residual_deg)}
            for enc in encodings:
                p.teacher_inputs[enc] = teacher_input(hha, s.depth, enc)
        out.append(p)
    return out


@dataclass
class RunRecord:
    plan: dict
    role: str
    seed: int
    epochs_configured: int
    epochs: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    wall_clock: float = 0.0
    aborted: str | None = None

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=EPOCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.epochs:
            w.writerow({k: (repr(float(row[k])) if k != "epoch" else row[k]) for k in EPOCH_COLUMNS})
        return buf.getvalue()

    def to_json(self) -> dict:
        return asdict(self)


def teacher_seed(seed: int) -> int:
    return derive_seed(seed, 0x7EAC) & 0xFFFFFFFF


def student_seed(seed: int) -> int:
    return derive_seed(seed, 0x57D) & 0xFFFFFFFF


def _optimizer(net: Network, regime: Regime):
    return make_optimizer(net.params, lr_rule(regime), OptimConfig(kind=regime.optimizer))


def _orders(n: int, epochs: int, seed: int):
    rng = np.random.default_rng(derive_seed(seed, 0x0DE5))
    for _ in range(epochs):
        yield rng.permutation(n)


def _row(epoch: int, b: LossBreakdown) -> dict:
    return {"epoch": epoch, **b.as_row()}


def train_teacher(
    prepared: Sequence[Prepared],
    config: NetworkConfig,
    regime: Regime,
    encoding: str = "hha",
    seed: int = 0,
    on_epoch: Callable[[int, LossBreakdown], None] | None = None,
) -> tuple[Network, RunRecord]:
    """Mode-0 training on a depth encoding of every train sample."""
    train = [p for p in prepared if p.split == "train"]
    for p in train:
        if encoding not in p.teacher_inputs:
            raise MissingDepth(p.id)
    net = Network(replace(config, seed=teacher_seed(seed)))
    opt = _optimizer(net, regime)
    rec = RunRecord({"role": "teacher", "encoding": encoding}, "teacher", seed, regime.epochs)
    t0 = time.perf_counter()
    for e, order in enumerate(_orders(len(train), regime.epochs, seed)):
        try:
            b = train_epoch(net, [train[i].item(encoding) for i in order], opt, regime, mode=0)
        except NonFiniteLoss as err:
            rec.aborted = str(err)
            break
        rec.epochs.append(_row(e, b))
        if on_epoch:
            on_epoch(e, b)
    rec.wall_clock = time.perf_counter() - t0
    return net, rec


def distill_offsets(teacher: Network, x: np.ndarray, student_config: NetworkConfig) -> list[np.ndarray]:
    """Teacher offsets on its own input, as plain arrays outside any gradient graph."""
    if teacher.config.architecture_hash() != student_config.architecture_hash():
        raise ConfigMismatch("teacher and student architectures differ")
    out = teacher.forward(x)
    return [o.data.copy() for o in out.offsets]


def _teacher_fn(teacher: Network, encoding: str, cache: bool):
    memo: dict[str, tuple[list[np.ndarray], np.ndarray]] = {}
    lookup: dict[str, np.ndarray] = {}

    def fn(item: TrainItem):
        if cache and item.id in memo:
            return memo[item.id]
        out = teacher.forward(lookup[item.id])
        res = ([o.data.copy() for o in out.offsets], out.features.data.copy())
        if cache:
            memo[item.id] = res
        return res

    return fn, lookup


def train_student(
    prepared: Sequence[Prepared],
    teacher: Network | None,
    plan: TeachingPlan,
    config: NetworkConfig,
    regime: Regime,
    seed: int = 0,
    on_epoch: Callable[[int, LossBreakdown], None] | None = None,
) -> tuple[Network, RunRecord]:
    """RGB training under ``plan``. Combine training builds and updates its own teacher."""
    plan.check(teacher is not None)
    if plan.epochs is not None:
        regime = replace(regime, epochs=plan.epochs)
    if teacher is not None and teacher.config.architecture_hash() != config.architecture_hash():
        raise ConfigMismatch("teacher and student architectures differ")
    train = [p for p in prepared if p.split == "train"]
    enc = plan.teacher_encoding
    net = Network(replace(config, seed=student_seed(seed)))
    opt = _optimizer(net, regime)
    rec = RunRecord(plan.to_json(), "student", seed, regime.epochs)
    t0 = time.perf_counter()
    if plan.variant == "combine_training":
        _combine(net, opt, train, plan, config, regime, seed, rec, on_epoch)
    else:
        tfn = None
        if plan.mode == 1 and teacher is not None:
            tfn, lookup = _teacher_fn(teacher, enc, plan.cache_teacher)
            for p in train:
                if enc not in p.teacher_inputs:
                    raise MissingDepth(p.id)
                lookup[p.id] = p.teacher_inputs[enc]
        for e, order in enumerate(_orders(len(train), regime.epochs, seed)):
            try:
                b = train_epoch(net, [train[i].item() for i in order], opt, regime, plan.mode, tfn, plan.guide, plan.fully)
            except NonFiniteLoss as err:
                rec.aborted = str(err)
                break
            rec.epochs.append(_row(e, b))
            if on_epoch:
                on_epoch(e, b)
    rec.wall_clock = time.perf_counter() - t0
    return net, rec


def _combine(net, opt, train, plan, config, regime, seed, rec, on_epoch) -> Network:
    """Teacher and student both start from scratch and update every step."""
    teacher = Network(replace(config, seed=teacher_seed(seed)))
    t_opt = _optimizer(teacher, regime)
    enc = plan.teacher_encoding
    for p in train:
        if enc not in p.teacher_inputs:
            raise MissingDepth(p.id)
    for e, order in enumerate(_orders(len(train), regime.epochs, seed)):
        rows = []
        try:
            for i in order:
                p = train[i]
                t_item = p.item(enc)
                t_out = teacher.forward(t_item.input)
                t_loss = total_loss(loss_det(t_out, t_item.objects, regime.masked_norm), loss_rel(t_out, t_item.relations, regime.masked_norm), mode=0)
                current = ([o.data.copy() for o in t_out.offsets], t_out.features.data.copy())
                train_step(teacher, t_opt, t_loss, regime, p.id)
                s_loss = compute_loss(net, p.item(), 1, current, plan.guide, False, regime)
                train_step(net, opt, s_loss, regime, p.id)
                rows.append(replace(s_loss, graph=None))
        except NonFiniteLoss as err:
            rec.aborted = str(err)
            break
        b = mean_breakdown(rows, 1)
        rec.epochs.append(_row(e, b))
        if on_epoch:
            on_epoch(e, b)
    return teacher


# ------------------------------------------------------------------ runs on disk


def write_run_dir(run_dir: str | Path, record: RunRecord, net: Network, report: EvalReport | None = None) -> Path:
    root = Path(run_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "plan.json").write_text(json.dumps({**record.plan, "seed": record.seed, "role": record.role}, indent=1, sort_keys=True))
    (root / "epochs.csv").write_text(record.epochs_csv())
    ck = save_checkpoint(net, root / "checkpoints" / "final", epoch=len(record.epochs), extra={"role": record.role, "seed": record.seed})
    record.checkpoint = str(ck)
    (root / "run.json").write_text(json.dumps({k: v for k, v in record.to_json().items() if k != "wall_clock"}, indent=1, sort_keys=True))
    (root / "timing.json").write_text(json.dumps({"wall_clock_s": record.wall_clock}, indent=1))
    if report is not None:
        (root / "report.json").write_text(report.dumps())
    return root


def evaluate_network(
    net: Network,
    prepared: Sequence[Prepared],
    inventory: set | None = None,
    encoding: str | None = None,
    opts: DecodeOptions | None = None,
) -> EvalReport:
    test = [p.eval_item(encoding) for p in prepared if p.split == "test"]

    def fwd(x):
        out = net.forward(x)
        return out.h.data, out.s.data, out.r.data

    return run_eval(fwd, test, net.config.stride, inventory=inventory, opts=opts)


def mean_report(reports: Sequence[EvalReport]) -> EvalReport | None:
    """Cell-wise mean; a cell missing from any report is dropped."""
    reports = [r for r in reports if r is not None]
    if not reports:
        return None
    first = reports[0]
    out = EvalReport(n_images=first.n_images)
    for t, ms in first.recall.items():
        if all(t in r.recall for r in reports):
            out.recall[t] = {m: {k: float(np.mean([r.recall[t][m][k] for r in reports])) for k in ks} for m, ks in ms.items()}
            out.mean_recall[t] = {m: float(np.mean([r.mean_recall[t][m] for r in reports])) for m in first.mean_recall[t]}
            zs = {}
            for m in first.zero_shot[t]:
                vals = [r.zero_shot[t][m] for r in reports]
                zs[m] = None if any(v is None for v in vals) else float(np.mean(vals))
            out.zero_shot[t] = zs
            out.ap50[t] = float(np.mean([r.ap50[t] for r in reports]))
    return out


@dataclass
class AblationRow:
    variant: str
    label: str
    records: list[RunRecord] = field(default_factory=list)
    reports: list[EvalReport] = field(default_factory=list)
    error: str | None = None

    @property
    def mean(self) -> EvalReport | None:
        return None if self.error else mean_report(self.reports)


@dataclass
class AblationMatrix:
    rows: list[AblationRow]
    teacher_reports: dict[str, list[EvalReport]] = field(default_factory=dict)

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def table(self) -> list[tuple[str, EvalReport | None]]:
        return [(r.label, r.mean) for r in self.rows]


def run_ablation_matrix(
    prepared: Sequence[Prepared],
    config: NetworkConfig,
    regime: Regime,
    seeds: Sequence[int],
    variants: Sequence[str] = VARIANTS,
    inventory: set | None = None,
    teacher_regime: Regime | None = None,
    opts: DecodeOptions | None = None,
    out_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
    shared_teacher_seed: int | None = None,
) -> AblationMatrix:
    """Every requested variant for every seed, sharing teachers, seeds and data order.

    With ``shared_teacher_seed`` set, one frozen teacher per encoding serves every
    student seed; otherwise each seed trains its own.
    A failing variant is recorded as a gap; the other rows still run.
    """
    say = progress or (lambda msg: log.info(msg))
    teacher_regime = teacher_regime or regime
    order = [v for v, _ in ABLATION_ROWS if v in variants]
    rows = [AblationRow(v, dict(ABLATION_ROWS)[v]) for v in order]
    teachers: dict[tuple[str, int], Network] = {}
    matrix = AblationMatrix(rows)
    for row in rows:
        for seed in seeds:
            plan = TeachingPlan(row.variant, seeds=(seed,))
            try:
                teacher = None
                if row.variant != "combine_training" and plan.mode == 1:
                    key = (plan.teacher_encoding, seed if shared_teacher_seed is None else shared_teacher_seed)
                    if key not in teachers:
                        say(f"teacher {key[0]} seed {key[1]}")
                        tnet, trec = train_teacher(prepared, config, teacher_regime, key[0], key[1])
                        if trec.aborted:
                            raise RuntimeError(f"teacher aborted: {trec.aborted}")
                        teachers[key] = tnet
                        matrix.teacher_reports.setdefault(key[0], []).append(
                            evaluate_network(tnet, prepared, inventory, key[0], opts)
                        )
                        if out_dir is not None:
                            write_run_dir(Path(out_dir) / f"teacher_{key[0]}_s{key[1]}", trec, tnet, matrix.teacher_reports[key[0]][-1])
                    teacher = teachers[key]
                say(f"{row.variant} seed {seed}")
                net, rec = train_student(prepared, teacher, plan, config, regime, seed)
                if rec.aborted:
                    raise RuntimeError(f"training aborted: {rec.aborted}")
                rep = evaluate_network(net, prepared, inventory, None, opts)
                row.records.append(rec)
                row.reports.append(rep)
                if out_dir is not None:
                    write_run_dir(Path(out_dir) / f"{row.variant}_s{seed}", rec, net, rep)
            except Exception as err:  # isolate per-variant failures
                log.warning("variant %s seed %s failed: %s", row.variant, seed, err)
                row.error = f"{type(err).__name__}: {err}"
                break
    return matrix
