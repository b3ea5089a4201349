"""Dataset manifests on disk.

A manifest is JSON::

    {"samples": [{"id", "rgb", "depth", "depth_mode", "graph", "split"}],
     "classes": [...], "predicates": [...]}

Paths are relative to the manifest's directory. RGB may be a ``.stdg``
tensor ``[3,H,W]`` in [0,1] or an 8-bit image file; depth may be a ``.stdg``
or ``.npy`` array ``[H,W]`` or a 16-bit PNG scaled by ``depth_scale``. Optional
extension keys: top-level ``camera`` (``focal_px``, ``cx``, ``cy``) and
``depth_scale``; per-sample ``hha`` (a ``.stdg`` tensor ``[3,H,W]``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..hha import CameraModel, DepthMap
from ..tensorio import load_tensor, save_tensor
from .generate import Sample
from .graph import SceneGraph

log = logging.getLogger(__name__)

DEPTH_MODES = ("metric", "inverse-relative")


@dataclass
class LoadResult:
    samples: list[Sample]
    rejected: list[tuple[str, str]] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)
    predicates: list[str] = field(default_factory=list)
    camera: CameraModel | None = None
    manifest: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.samples)

    def __len__(self):
        return len(self.samples)


class ManifestError(ValueError):
    pass


def save_dataset(
    samples: list[Sample],
    out_dir: str | Path,
    classes: list[str],
    predicates: list[str],
    camera: CameraModel | None = None,
) -> Path:
    out = Path(out_dir)
    for sub in ("rgb", "depth", "graph"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        e = {"id": s.id, "rgb": f"rgb/{s.id}.stdg", "depth": None, "depth_mode": None, "graph": f"graph/{s.id}.json", "split": s.split}
        save_tensor(out / e["rgb"], s.rgb, dtype="f32")
        if s.depth is not None:
            e["depth"] = f"depth/{s.id}.stdg"
            e["depth_mode"] = s.depth_mode or "metric"
            save_tensor(out / e["depth"], np.where(s.depth.valid, s.depth.values, 0.0))
        (out / e["graph"]).write_text(json.dumps(s.graph.to_json(), sort_keys=True))
        entries.append(e)
    manifest = {"samples": entries, "classes": list(classes), "predicates": list(predicates)}
    if camera is not None:
        manifest["camera"] = {"focal_px": camera.focal_px, "cx": camera.cx, "cy": camera.cy}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> dict:
    try:
        m = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    for k in ("samples", "classes", "predicates"):
        if k not in m or not isinstance(m[k], list):
            raise ManifestError(f"manifest lacks list {k!r}")
    return m


def _read_rgb(path: Path) -> np.ndarray:
    if path.suffix == ".stdg":
        x = load_tensor(path)
    else:
        with Image.open(path) as im:
            x = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"rgb must be [3,H,W], got {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise ValueError("rgb values outside [0,1]")
    return x


def _read_depth(path: Path, scale: float) -> np.ndarray:
    if path.suffix == ".stdg":
        d = load_tensor(path)
    elif path.suffix == ".npy":
        d = np.load(path).astype(np.float64)
    else:
        with Image.open(path) as im:
            d = np.asarray(im, dtype=np.float64) * scale
    if d.ndim != 2:
        raise ValueError(f"depth must be [H,W], got {d.shape}")
    return d


def load_sample(entry: dict, root: Path, num_classes: int, num_predicates: int, depth_scale: float = 1e-3, camera=None) -> Sample:
    """One manifest entry; raises ``ValueError``/``OSError`` with a reason on any defect."""
    sid = str(entry["id"])
    split = entry.get("split", "train")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    rgb = _read_rgb(root / entry["rgb"])
    graph = SceneGraph.from_json(json.loads((root / entry["graph"]).read_text()))
    H, W = rgb.shape[1:]
    bad = graph.problems(W, H, num_classes, num_predicates)
    if bad:
        raise ValueError("; ".join(bad))
    depth, mode = None, entry.get("depth_mode")
    if entry.get("depth"):
        mode = mode or "metric"
        if mode not in DEPTH_MODES:
            raise ValueError(f"unknown depth_mode {mode!r}")
        raw = _read_depth(root / entry["depth"], depth_scale)
        if raw.shape != (H, W):
            raise ValueError(f"depth shape {raw.shape} does not match rgb {(H, W)}")
        depth = DepthMap(raw) if mode == "metric" else DepthMap.from_inverse_relative(raw)
    meta = {}
    if entry.get("hha"):
        meta["hha_path"] = str(root / entry["hha"])
    return Sample(sid, rgb, depth, graph, split, mode, camera, meta)


def load_external(manifest_path: str | Path) -> LoadResult:
    """Load every valid entry; defective entries are rejected with a reason and skipped."""
    path = Path(manifest_path)
    m = read_manifest(path)
    root = path.parent
    cam = None
    if "camera" in m:
        c = m["camera"]
        cam = CameraModel(float(c["focal_px"]), float(c["cx"]), float(c["cy"]))
    scale = float(m.get("depth_scale", 1e-3))
    C, P = len(m["classes"]), len(m["predicates"])
    res = LoadResult([], [], list(m["classes"]), list(m["predicates"]), cam, m)
    seen = set()
    for i, e in enumerate(m["samples"]):
        sid = str(e.get("id", f"#{i}"))
        try:
            if sid in seen:
                raise ValueError("duplicate id")
            s = load_sample(e, root, C, P, scale, cam)
        except (KeyError, ValueError, OSError, TypeError) as err:
            reason = f"missing key {err}" if isinstance(err, KeyError) else str(err)
            log.warning("rejected sample %s: %s", sid, reason)
            res.rejected.append((sid, reason))
            continue
        seen.add(sid)
        res.samples.append(s)
    return res
