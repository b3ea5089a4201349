"""The desk-scale depth-guidance benchmark.

A frozen configuration plus the checks the benchmark is judged by; see
``TrendResult.checks``.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .eval import EvalReport, table5_csv, table5_text
from .model import NetworkConfig, Regime
from .scenes.generate import SceneConfig, generate_dataset, train_triplet_inventory
from .teach import ABLATION_ROWS, prepare_samples, run_ablation_matrix

# frozen from the pilot run; see the notes for the calibration table
TEACHER_THRESHOLD = 0.5
NOISE_FLOOR = 0.02
VARIANTS = ("no_teacher_baseline", "semi", "fully_teaching")


@dataclass(frozen=True)
class TrendConfig:
    n_train: int = 500
    n_test: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(seed=2024))
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(widths=(8, 16, 32, 32), head_width=16))
    regime: Regime = field(default_factory=lambda: Regime(lr_backbone=2e-3, lr_heads=6e-3, epochs=8))
    # one frozen teacher serves all student seeds
    teacher_regime: Regime = field(default_factory=lambda: Regime(lr_backbone=4e-3, lr_heads=12e-3, epochs=16))
    teacher_seed: int = 0


@dataclass
class TrendResult:
    teacher: list[float]
    scores: dict[str, list[float]]  # variant -> per-seed SGDet g-R@20
    seconds: float
    table: list[tuple[str, EvalReport | None]] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    def mean(self, variant: str) -> float:
        return float(np.mean(self.scores[variant]))

    @property
    def noise(self) -> float:
        """Two standard errors of the paired fully-minus-semi difference, floored."""
        d = np.array(self.scores["fully_teaching"]) - np.array(self.scores["semi"])
        se = float(np.std(d, ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
        return max(NOISE_FLOOR, 2.0 * se)

    def checks(self) -> dict[str, tuple[bool, str]]:
        t = min(self.teacher) if self.teacher else float("nan")
        semi, base, fully = self.mean("semi"), self.mean("no_teacher_baseline"), self.mean("fully_teaching")
        return {
            "teacher": (bool(t >= TEACHER_THRESHOLD), f"min teacher SGDet g-R@20 {t:.3f} (threshold {TEACHER_THRESHOLD})"),
            "semi_vs_baseline": (bool(semi >= base), f"semi {semi:.3f} vs baseline {base:.3f}"),
            "fully_vs_semi": (bool(fully - semi <= self.noise), f"fully {fully:.3f} - semi {semi:.3f} = {fully - semi:+.3f} (noise {self.noise:.3f})"),
        }

    def to_json(self) -> dict:
        return {
            "teacher": self.teacher,
            "scores": self.scores,
            "noise": self.noise,
            "checks": {k: {"passed": v[0], "detail": v[1]} for k, v in self.checks().items()},
            "errors": self.errors,
        }


def sgdet_r20(report: EvalReport) -> float:
    return float(report.recall["SGDet"]["g"][20])


def run_trend(cfg: TrendConfig = TrendConfig(), out_dir: str | Path | None = None, progress: Callable[[str], None] | None = None) -> TrendResult:
    say = progress or (lambda msg: None)
    t0 = time.perf_counter()
    samples = generate_dataset(cfg.scene, cfg.n_train, cfg.n_test)
    inventory = train_triplet_inventory(samples)
    prepared = prepare_samples(samples, cfg.network, ("hha",), cfg.scene.camera())
    say(f"data ready ({len(samples)} samples) after {time.perf_counter() - t0:.0f}s")
    matrix = run_ablation_matrix(
        prepared, cfg.network, cfg.regime, cfg.seeds, VARIANTS, inventory, cfg.teacher_regime, out_dir=out_dir,
        progress=lambda m: say(f"[{time.perf_counter() - t0:.0f}s] {m}"), shared_teacher_seed=cfg.teacher_seed,
    )
    teacher = [sgdet_r20(r) for r in matrix.teacher_reports.get("hha", [])]
    scores = {row.variant: [sgdet_r20(r) for r in row.reports] for row in matrix.rows}
    errors = {row.variant: row.error for row in matrix.rows if row.error}
    res = TrendResult(teacher, scores, time.perf_counter() - t0, matrix.table(), errors)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trend.json").write_text(json.dumps(res.to_json(), indent=1, sort_keys=True))
        (out / "table5.csv").write_text(table5_csv(res.table))
        (out / "table5.txt").write_text(table5_text(res.table))
        (out / "timing.json").write_text(json.dumps({"seconds": res.seconds}, indent=1))
    return res


def describe(cfg: TrendConfig) -> dict:
    d = asdict(cfg)
    d["variants"] = [dict(ABLATION_ROWS)[v] for v in VARIANTS]
    return d


def format_result(res: TrendResult, labels: Sequence[str] = VARIANTS) -> str:
    lines = [f"teacher (hha) SGDet g-R@20: {', '.join(f'{v:.3f}' for v in res.teacher)}"]
    for v in labels:
        vals = res.scores.get(v, [])
        lines.append(f"{dict(ABLATION_ROWS)[v]:>14}: {', '.join(f'{x:.3f}' for x in vals)}  mean {np.mean(vals) if vals else float('nan'):.3f}")
    for name, (ok, detail) in res.checks().items():
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    lines.append(f"wall clock {res.seconds:.0f}s")
    return "\n".join(lines)
