"""Sweep the weight of the offset-matching term on one seed of the trend benchmark.

One HHA teacher is trained and shared by every student, so the sweep isolates
the weight. Prints SGDet g-R@20, SGCls g-R@20 and PredCls g-R@20 per weight.

    python scripts/semi_weight_pilot.py --weights 1 0.1 0.03 --seed 0
"""

import argparse
import time
from dataclasses import replace

from stdg.teach import TeachingPlan, evaluate_network, prepare_samples, train_student, train_teacher
from stdg.scenes.generate import generate_dataset, train_triplet_inventory
from stdg.trend import TrendConfig


def summary(rep) -> str:
    return "  ".join(f"{t} {rep.recall[t]['g'][20]:.3f}" for t in ("PredCls", "SGCls", "SGDet"))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--weights", type=float, nargs="+", default=[1.0, 0.1, 0.03])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--teacher-epochs", type=int)
    ap.add_argument("--baseline", action="store_true")
    args = ap.parse_args()
    cfg = TrendConfig()
    t0 = time.perf_counter()
    samples = generate_dataset(cfg.scene, cfg.n_train, cfg.n_test)
    inv = train_triplet_inventory(samples)
    prepared = prepare_samples(samples, cfg.network, ("hha",), cfg.scene.camera())
    t_regime = replace(cfg.teacher_regime, epochs=args.teacher_epochs) if args.teacher_epochs else cfg.teacher_regime
    teacher, _ = train_teacher(prepared, cfg.network, t_regime, "hha", args.seed)
    print(f"[{time.perf_counter() - t0:.0f}s] teacher   {summary(evaluate_network(teacher, prepared, inv, 'hha'))}", flush=True)
    if args.baseline:
        net, _ = train_student(prepared, None, TeachingPlan("no_teacher_baseline"), cfg.network, cfg.regime, args.seed)
        print(f"[{time.perf_counter() - t0:.0f}s] baseline  {summary(evaluate_network(net, prepared, inv))}", flush=True)
    for w in args.weights:
        net, _ = train_student(prepared, teacher, TeachingPlan("semi"), cfg.network, replace(cfg.regime, semi_weight=w), args.seed)
        print(f"[{time.perf_counter() - t0:.0f}s] semi w={w:<5} {summary(evaluate_network(net, prepared, inv))}", flush=True)


if __name__ == "__main__":
    main()
