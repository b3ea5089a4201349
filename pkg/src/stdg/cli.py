"""``stdg`` command line: gen-data, hha, train, eval, selfcheck, bench.

Exit codes: 0 success, 1 self-check failure, 2 configuration or usage error,
3 data error, 4 numeric failure, 5 partial completion.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_PARTIAL = 5

log = logging.getLogger("stdg")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


# ------------------------------------------------------------------ helpers


def _threads(args) -> int | None:
    raw = args.threads if args.threads is not None else os.environ.get("STDG_THREADS")
    if raw in (None, ""):
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"thread count must be an integer, got {raw!r}", EXIT_CONFIG)
    if n < 1:
        raise CliError(f"thread count must be positive, got {n}", EXIT_CONFIG)
    return n


def _config(args):
    from .config import ConfigError, load_config

    try:
        cfg = load_config(args.config)
    except ConfigError as err:
        raise CliError(str(err), EXIT_CONFIG)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, scene=replace(cfg.scene, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise CliError(f"output directory {out} is not writable: {err}", EXIT_DATA)
    return out


def _load_data(cfg, manifest: str | None):
    """Samples from a manifest, or freshly generated from the scene section."""
    from .scenes.dataset_io import ManifestError, load_external
    from .scenes.generate import generate_dataset, train_triplet_inventory

    path = manifest or cfg.data.manifest
    if path is None:
        samples = generate_dataset(cfg.scene, cfg.data.n_train, cfg.data.n_test)
        return samples, cfg.camera_model(), train_triplet_inventory(samples), 0
    try:
        res = load_external(path)
    except ManifestError as err:
        raise CliError(str(err), EXIT_DATA)
    if len(res.classes) != cfg.network.num_classes or len(res.predicates) != cfg.network.num_predicates:
        raise CliError(
            f"dataset vocabulary ({len(res.classes)} classes, {len(res.predicates)} predicates) does not match the network "
            f"({cfg.network.num_classes}, {cfg.network.num_predicates})",
            EXIT_CONFIG,
        )
    if not res.samples:
        raise CliError(f"no usable samples in {path}", EXIT_DATA)
    return res.samples, res.camera or cfg.camera, train_triplet_inventory(res.samples), len(res.rejected)


def _stamp(cfg) -> dict:
    return {"config_hash": cfg.config_hash()}


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg, args) -> int:
    from .scenes.dataset_io import save_dataset
    from .scenes.generate import PREDICATES, class_names, generate_dataset

    n_train = cfg.data.n_train if args.n_train is None else args.n_train
    n_test = cfg.data.n_test if args.n_test is None else args.n_test
    out = _out_dir(cfg)
    samples = generate_dataset(cfg.scene, n_train, n_test)
    path = save_dataset(samples, out, class_names(cfg.scene.num_classes), list(PREDICATES[: cfg.scene.num_predicates]), cfg.camera_model())
    m = json.loads(path.read_text())
    m.update(_stamp(cfg))
    path.write_text(json.dumps(m, indent=1, sort_keys=True))
    (out / "config.yaml").write_text(cfg.dumps())
    n_rel = sum(len(s.graph.relations) for s in samples)
    print(f"wrote {len(samples)} samples ({n_train} train, {n_test} test, {n_rel} relations) to {path}")
    return EXIT_OK


def cmd_hha(cfg, args) -> int:
    from .hha import compute_hha
    from .scenes.dataset_io import ManifestError, load_sample, read_manifest
    from .tensorio import save_tensor

    src = Path(args.manifest)
    try:
        m = read_manifest(src)
    except ManifestError as err:
        raise CliError(str(err), EXIT_DATA)
    out = Path(args.out) if args.out is not None else src.parent
    out = _out_dir(replace(cfg, out=str(out)))
    cam = None
    if "camera" in m:
        from .hha import CameraModel

        c = m["camera"]
        cam = CameraModel(float(c["focal_px"]), float(c["cx"]), float(c["cy"]))
    cam = cam or cfg.camera
    C, P = len(m["classes"]), len(m["predicates"])
    scale = float(m.get("depth_scale", 1e-3))
    skipped = 0
    entries = []
    for e in m["samples"]:
        e = dict(e)
        for key in ("rgb", "depth", "graph"):
            if e.get(key):
                e[key] = os.path.relpath(src.parent / e[key], out)
        try:
            s = load_sample(dict(e), out, C, P, scale, cam)
        except (KeyError, ValueError, OSError) as err:
            log.warning("skipping %s: %s", e.get("id"), err)
            skipped += 1
            entries.append(e)
            continue
        if s.depth is None:
            log.warning("skipping %s: no depth", s.id)
            skipped += 1
            entries.append(e)
            continue
        hha = compute_hha(s.depth, cam or _default_camera(s), cfg.hha)
        rel = f"hha/{s.id}.stdg"
        (out / "hha").mkdir(exist_ok=True)
        save_tensor(out / rel, hha.data)
        e["hha"] = rel
        e["hha_gravity"] = {
            "vector": [float(v) for v in hha.gravity.vector],
            "residual_deg": float(hha.gravity.residual_deg),
            "low_confidence": bool(hha.gravity.low_confidence),
        }
        entries.append(e)
    m["samples"] = entries
    m.update(_stamp(cfg))
    path = out / "manifest.json"
    path.write_text(json.dumps(m, indent=1, sort_keys=True))
    done = len(entries) - skipped
    print(f"hha written for {done}/{len(entries)} samples; manifest {path}")
    return EXIT_PARTIAL if skipped else EXIT_OK


def _default_camera(sample):
    from .hha import CameraModel

    H, W = sample.rgb.shape[1:]
    return CameraModel.default(W, H)


def _role_plan(cfg, role: str, teacher: str | None):
    from .teach import PlanError, TeachingPlan, VARIANTS

    if role == "teacher":
        return None
    if role == "student":
        variant = "semi"
    elif role == "baseline":
        variant = "no_teacher_baseline"
    elif role.startswith("ablation:"):
        variant = role.split(":", 1)[1]
        if variant != "all" and variant not in VARIANTS:
            raise CliError(f"unknown ablation variant {variant!r}; choose from all, {', '.join(VARIANTS)}", EXIT_CONFIG)
        if variant == "all":
            return "all"
    else:
        raise CliError(f"unknown role {role!r}", EXIT_CONFIG)
    try:
        plan = TeachingPlan(variant, teacher, cfg.plan.seeds, cfg.plan.epochs, cfg.plan.dataset, cfg.plan.cache_teacher)
        if variant in ("semi", "no_det_guide", "no_rel_guide", "fully_teaching"):
            plan.check(teacher is not None)
    except PlanError as err:
        raise CliError(f"{err} (pass --teacher <checkpoint>)", EXIT_CONFIG)
    return plan


def cmd_train(cfg, args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .eval import table5_csv, table5_text
    from .gradcore import NonFiniteError
    from .teach import (
        VARIANTS,
        ConfigMismatch,
        MissingDepth,
        PlanError,
        evaluate_network,
        prepare_samples,
        run_ablation_matrix,
        train_student,
        train_teacher,
        write_run_dir,
    )

    plan = _role_plan(cfg, args.role, args.teacher)
    teacher = None
    if args.teacher is not None:
        try:
            teacher, _ = load_checkpoint(args.teacher)
        except CheckpointError as err:
            raise CliError(str(err), EXIT_DATA)
        if teacher.config.architecture_hash() != cfg.network.architecture_hash():
            raise CliError("teacher checkpoint architecture does not match the configured network", EXIT_CONFIG)
    out = _out_dir(cfg)
    (out / "config.yaml").write_text(cfg.dumps())
    samples, cam, inventory, rejected = _load_data(cfg, args.data)
    encodings = ("hha",)
    if plan == "all":
        encodings = ("hha", "raw_depth", "h_only", "hh_only")
    elif plan is not None and plan.teacher_encoding != "hha":
        encodings = (plan.teacher_encoding,)
    prepared = prepare_samples(samples, cfg.network, encodings, cam, cfg.hha)
    opts = cfg.eval.decode
    try:
        if plan is None:
            seed = cfg.seed
            net, rec = train_teacher(prepared, cfg.network, cfg.effective_teacher_regime(), "hha", seed, _progress("teacher"))
            rep = None if rec.aborted else evaluate_network(net, prepared, inventory, "hha", opts)
            write_run_dir(out, rec, net, rep)
            if rec.aborted:
                raise CliError(rec.aborted, EXIT_NUMERIC)
        elif plan == "all":
            matrix = run_ablation_matrix(
                prepared, cfg.network, cfg.regime, cfg.plan.seeds, VARIANTS, inventory, cfg.effective_teacher_regime(), opts, out, print
            )
            rows = matrix.table()
            (out / "table5.csv").write_text(table5_csv(rows))
            (out / "table5.txt").write_text(table5_text(rows))
            print(table5_text(rows))
            if any(r.error for r in matrix.rows):
                return EXIT_PARTIAL
        else:
            if plan.mode == 1 and teacher is None and plan.variant != "combine_training":
                # depth-encoding ablations train their own teacher on that encoding
                teacher, trec = train_teacher(prepared, cfg.network, cfg.effective_teacher_regime(), plan.teacher_encoding, cfg.seed)
                if trec.aborted:
                    raise CliError(trec.aborted, EXIT_NUMERIC)
                write_run_dir(out / "teacher", trec, teacher)
            net, rec = train_student(prepared, teacher, plan, cfg.network, cfg.regime, cfg.seed, _progress(plan.variant))
            rep = None if rec.aborted else evaluate_network(net, prepared, inventory, None, opts)
            write_run_dir(out, rec, net, rep)
            if rec.aborted:
                raise CliError(rec.aborted, EXIT_NUMERIC)
    except (MissingDepth, ConfigMismatch, PlanError) as err:
        raise CliError(str(err), EXIT_DATA if isinstance(err, MissingDepth) else EXIT_CONFIG)
    except (NonFiniteError, FloatingPointError) as err:
        raise CliError(str(err), EXIT_NUMERIC)
    print(f"run written to {out}")
    return EXIT_PARTIAL if rejected else EXIT_OK


def _progress(name: str):
    def cb(epoch, b):
        print(f"{name} epoch {epoch}: det {b.det:.4f} rel {b.rel:.4f} semi {b.semi:.4f} total {b.total:.4f}", flush=True)

    return cb


def cmd_eval(cfg, args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .eval import EvalItem, EvalTask, run_eval, table1_csv, table1_row
    from .fields import encode_objects, encode_relations
    from .teach import prepare_samples

    tasks = tuple(EvalTask(t) for t in (args.task or cfg.eval.tasks))
    ks = tuple(args.k or cfg.eval.ks)
    if args.oracle == (args.checkpoint is not None):
        raise CliError("give exactly one of --checkpoint or --oracle", EXIT_CONFIG)
    if args.checkpoint is not None:
        try:
            net, manifest = load_checkpoint(args.checkpoint)
        except CheckpointError as err:
            raise CliError(str(err), EXIT_DATA)
        if args.config is not None and net.config.architecture_hash() != cfg.network.architecture_hash():
            raise CliError(
                f"checkpoint config hash {manifest.get('config_hash')} does not match the configured network", EXIT_CONFIG
            )
        cfg = replace(cfg, network=net.config)
    samples, cam, inventory, rejected = _load_data(cfg, args.data)
    test = [s for s in samples if s.split == "test"] or samples
    R = cfg.network.stride
    if args.oracle:
        C, P = cfg.network.num_classes, cfg.network.num_predicates

        def fwd(s):
            o = encode_objects(s.graph, s.dims, R, C)
            return o.heatmap, o.size, encode_relations(s.graph, s.dims, R, P).field

        items = [EvalItem(s.id, s, s.graph) for s in test]
    else:
        encoding = None if args.encoding == "rgb" else args.encoding
        prepared = prepare_samples(test, net.config, (encoding,) if encoding else (), cam, cfg.hha)

        def fwd(x):
            o = net.forward(x)
            return o.h.data, o.s.data, o.r.data

        items = [p.eval_item(encoding) for p in prepared]
    rep = run_eval(fwd, items, R, tasks, ks, inventory, cfg.eval.decode)
    out = _out_dir(cfg)
    (out / "report.json").write_text(rep.dumps())
    _write_json(out / "timing.json", {"images_per_sec": rep.images_per_sec})
    if not args.with_throughput:
        rep.images_per_sec = None
    if set(ks) >= {20, 50, 100} and len(tasks) == 3:
        (out / "table1.csv").write_text(table1_csv([table1_row(rep, args.method, args.backbone)]))
    problems = rep.audit()
    for p in problems:
        log.error("audit: %s", p)
    for t in rep.recall:
        cells = " ".join(f"R@{k} {rep.recall[t]['g'][k]:.3f}/{rep.recall[t]['ng'][k]:.3f}" for k in ks)
        print(f"{t}: {cells} AP50 {rep.ap50[t]:.3f}")
    if problems:
        return EXIT_NUMERIC
    return EXIT_PARTIAL if (rejected or rep.errors) else EXIT_OK


def cmd_selfcheck(cfg, args) -> int:
    from .selfcheck import run_selfcheck

    t0 = time.perf_counter()
    results = run_selfcheck(cfg.seed, args.perturb)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.1f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def cmd_bench(cfg, args) -> int:
    import numpy as np

    from .checkpoint import CheckpointError, load_checkpoint
    from .eval import EvalTask, predict
    from .model import Network
    from .scenes.graph import SceneGraph

    if args.checkpoint:
        try:
            net, _ = load_checkpoint(args.checkpoint)
        except CheckpointError as err:
            raise CliError(str(err), EXIT_DATA)
    else:
        net = Network(cfg.network)
    rng = np.random.default_rng(cfg.seed)
    x = rng.uniform(0, 1, size=(3, cfg.scene.height, cfg.scene.width))
    net.forward(x)
    t0 = time.perf_counter()
    for _ in range(args.n):
        o = net.forward(x)
        predict(o.h.data, o.s.data, o.r.data, SceneGraph([]), EvalTask.SGDET, net.config.stride, cfg.eval.decode)
    dt = time.perf_counter() - t0
    rate = args.n / dt
    out = _out_dir(cfg)
    _write_json(out / "bench.json", {"images": args.n, "seconds": dt, "images_per_sec": rate, "input": [3, cfg.scene.height, cfg.scene.width]})
    print(f"{rate:.1f} img/sec over {args.n} images")
    return EXIT_OK


# ------------------------------------------------------------------ entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stdg", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", help="numeric library threads (fallback: STDG_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)

    h = sub.add_parser("hha", help="convert every depth entry of a manifest to HHA")
    h.add_argument("manifest")

    t = sub.add_parser("train", help="train a teacher, student, baseline or ablation variant")
    t.add_argument("--role", required=True, help="teacher | student | baseline | ablation:<variant> | ablation:all")
    t.add_argument("--teacher", help="teacher checkpoint directory")
    t.add_argument("--data", help="dataset manifest (default: generate from the config)")

    e = sub.add_parser("eval", help="evaluate a checkpoint and write report.json and table1.csv")
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="evaluate the encoded ground truth instead of a network")
    e.add_argument("--data", help="dataset manifest (default: generate from the config)")
    e.add_argument("--task", action="append", choices=["PredCls", "SGCls", "SGDet"])
    e.add_argument("--k", action="append", type=int)
    e.add_argument("--encoding", default="rgb", help="network input: rgb or a depth encoding such as hha")
    e.add_argument("--method", default="ours")
    e.add_argument("--backbone", default="tiny")
    e.add_argument("--with-throughput", action="store_true", help="fill table1.csv img/sec (breaks byte-identical reruns)")

    s = sub.add_parser("selfcheck", help="gradient, deformable, codec and metric checks")
    s.add_argument("--perturb", help="scale one op's backward by 1.01 (tests the detector)")

    b = sub.add_parser("bench", help="forward plus decode throughput")
    b.add_argument("--checkpoint")
    b.add_argument("--n", type=int, default=20)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "hha": cmd_hha,
    "train": cmd_train,
    "eval": cmd_eval,
    "selfcheck": cmd_selfcheck,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        n = _threads(args)
        cfg = _config(args)
        if n is None and cfg.threads is not None:
            n = cfg.threads
        if n is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=n):
                return COMMANDS[args.command](cfg, args)
        return COMMANDS[args.command](cfg, args)
    except CliError as err:
        print(f"stdg: error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
