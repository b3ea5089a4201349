"""Checkpoints: ``manifest.json`` plus one ``.stdg`` tensor per parameter."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from .gradcore import Tensor
from .model import Network, NetworkConfig
from .tensorio import load_tensor, save_tensor


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: Network, path: str | Path, epoch: int = 0, optimizer: dict | None = None, extra: dict | None = None) -> Path:
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    names = sorted(net.params)
    for name in names:
        save_tensor(root / "params" / f"{name}.stdg", net.params[name].data)
    manifest = {
        "config": asdict(net.config),
        "config_hash": net.config.architecture_hash(),
        "epoch": epoch,
        "optimizer": optimizer or {},
        "params": names,
        "extra": extra or {},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_checkpoint_manifest(path: str | Path) -> dict:
    f = Path(path) / "manifest.json"
    try:
        return json.loads(f.read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"no checkpoint manifest at {f}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest {f}: {e}") from e


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    root = Path(path)
    m = read_checkpoint_manifest(root)
    config = NetworkConfig.from_dict(m["config"])
    if config.architecture_hash() != m["config_hash"]:
        raise CheckpointError("checkpoint config does not match its recorded hash")
    net = Network(config)
    if sorted(net.params) != sorted(m["params"]):
        raise CheckpointError("checkpoint parameter names differ from the architecture")
    for name in m["params"]:
        arr = load_tensor(root / "params" / f"{name}.stdg")
        if arr.shape != net.params[name].shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape} != {net.params[name].shape}")
        net.params[name] = Tensor(arr, requires_grad=True, name=name)
    return net, m
