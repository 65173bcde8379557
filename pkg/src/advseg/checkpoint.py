"""Checkpoints: a directory of MT01 tensors plus ``manifest.json``.

Layout::

    <ckpt>/manifest.json
    <ckpt>/tensors/<network>/<param-name>.mt01
    <ckpt>/tensors/state/<key>.mt01      # optimizer accumulators etc.

The manifest records each network's spec, init seed and the file of every
parameter and buffer, followed by free-form JSON ``meta``.  Nothing
time-dependent is written, so identical runs give byte-identical files.
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import Network, NetworkSpec
from .tensor import load_mt01, save_mt01

FORMAT = "advseg-checkpoint/1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    networks: dict[str, Network]
    state: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def seg(self) -> Network:
        return self.networks["seg"]

    @property
    def disc(self) -> Network | None:
        return self.networks.get("disc")


def _write(root: Path, sub: str, name: str, arr: np.ndarray) -> str:
    rel = Path("tensors") / sub / f"{name}.mt01"
    save_mt01(root / rel, arr)
    return rel.as_posix()


def save_checkpoint(path, networks: dict[str, Network], state: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    root = Path(path)
    tmp = root.with_name(root.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    manifest = {"format": FORMAT, "networks": {}, "state": {}, "meta": meta or {}}
    for key, net in networks.items():
        (tmp / "tensors" / key).mkdir(parents=True)
        entry = {"spec": net.spec.to_dict(), "seed": net.seed, "group": net.group, "params": {}, "buffers": {}}
        for p in net.params:
            entry["params"][p.name] = _write(tmp, key, p.name, p.value)
        for name, arr in net.buffers().items():
            entry["buffers"][name] = _write(tmp, key, name, arr)
        manifest["networks"][key] = entry
    if state:
        (tmp / "tensors" / "state").mkdir(parents=True)
        for name, arr in state.items():
            manifest["state"][name] = {"file": _write(tmp, "state", name, arr), "shape": list(np.shape(arr))}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    # swap in atomically-ish so an interrupted save never clobbers the previous checkpoint
    if root.exists():
        shutil.rmtree(root)
    tmp.rename(root)
    return root


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: unknown checkpoint format {manifest.get('format')!r}")
    nets = {}
    for key, entry in manifest["networks"].items():
        spec = NetworkSpec.from_dict(entry["spec"])
        net = Network(spec, seed=entry["seed"], group=entry["group"])
        names = {p.name for p in net.params}
        if names != set(entry["params"]):
            raise CheckpointError(f"{key}: parameter set in manifest does not match its spec")
        for p in net.params:
            arr = load_mt01(root / entry["params"][p.name]).reshape(p.value.shape)
            p.value[...] = arr
        bufs = net.buffers()
        for name, file in entry["buffers"].items():
            bufs[name][...] = load_mt01(root / file).reshape(bufs[name].shape)
        nets[key] = net
    state = {
        name: load_mt01(root / info["file"]).reshape(info["shape"]) for name, info in manifest["state"].items()
    }
    return Checkpoint(nets, state, manifest["meta"])
