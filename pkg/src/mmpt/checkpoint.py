"""Checkpoints: a JSON manifest plus one raw little-endian tensor payload.

Layout of a checkpoint directory::

    manifest.json   format, config hash, step, seed, tensor table (name, shape, dtype, offset, nbytes)
    tensors.bin     concatenated tensor bytes in manifest order
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .config import MMPTConfig
from .model import MMPT
from .training import TrainState, init_state

FORMAT = "mmpt-checkpoint/1"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _tensor_table(model: MMPT, state: TrainState | None):
    items = [(name, p.detach()) for name, p in model.named_parameters()]
    if state is not None:
        for name, st in state.moments(model).items():
            for key in ("exp_avg", "exp_avg_sq", "step"):
                items.append((f"optim/{name}/{key}", st[key].detach()))
    return items


def save_checkpoint(model: MMPT, state: TrainState | None, path, *, config_hash: str | None = None,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    digest = hashlib.sha256()
    with open(path / "tensors.bin", "wb") as f:
        for name, t in _tensor_table(model, state):
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"tensor {name} has unsupported dtype {t.dtype}")
            raw = np.ascontiguousarray(t.cpu().numpy(), dtype=_DTYPES[t.dtype]).tobytes()
            f.write(raw)
            digest.update(raw)
            entries.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "config_hash": config_hash,
        "model_config": model.config.to_dict(),
        "step": state.step if state else 0,
        "seed": state.seed if state else model.config.seed,
        "loss_ema": state.loss_ema if state else None,
        "trainable": list(state.param_names) if state else [],
        "lr": state.optimizer.param_groups[0]["lr"] if state and state.optimizer else None,
        "payload_bytes": offset,
        "payload_sha256": digest.hexdigest(),
        "tensors": entries,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest.json") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: manifest.json is not valid JSON ({e})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def _read_tensors(path: Path, manifest: dict) -> dict[str, torch.Tensor]:
    raw = (path / "tensors.bin").read_bytes()
    if len(raw) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"tensors.bin is corrupted: manifest expects {manifest['payload_bytes']} bytes, found {len(raw)}")
    if hashlib.sha256(raw).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError("tensors.bin is corrupted: checksum mismatch")
    out = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=e["dtype"])
        if arr.size != int(np.prod(e["shape"])):
            raise CheckpointError(f"tensor {e['name']}: payload size does not match its shape {e['shape']}")
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return out


def load_weights(model: MMPT, tensors: dict[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint has no tensor named {missing[0]!r}")
    extra = sorted(n for n in tensors if not n.startswith("optim/") and n not in params)
    if extra:
        raise CheckpointError(f"checkpoint tensor {extra[0]!r} does not exist in the model")
    with torch.no_grad():
        for name, p in params.items():
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise CheckpointError(f"tensor {name!r}: checkpoint shape {tuple(t.shape)} vs model {tuple(p.shape)}")
            p.copy_(t.to(p.dtype))


def load_checkpoint(path, *, expected_config_hash: str | None = None, force: bool = False,
                    partition: str = "toy-full"):
    """Rebuild model and training state; returns (model, state, manifest)."""
    path = Path(path)
    manifest = read_manifest(path)
    if expected_config_hash is not None and manifest["config_hash"] != expected_config_hash and not force:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {manifest['config_hash']}, expected {expected_config_hash} "
            "(use --force to load anyway)")
    tensors = _read_tensors(path, manifest)
    model = MMPT(MMPTConfig.from_dict(manifest["model_config"]))
    load_weights(model, tensors)
    partition = manifest.get("extra", {}).get("partition", partition)
    state = init_state(model, manifest["lr"] or 1e-3, manifest["seed"], partition)
    if tuple(manifest["trainable"]) and tuple(manifest["trainable"]) != state.param_names:
        raise CheckpointError("trainable tensor set in the checkpoint does not match the partition")
    state.step = manifest["step"]
    state.loss_ema = manifest["loss_ema"]
    moments = {}
    for name in state.param_names:
        key = f"optim/{name}/exp_avg"
        if key in tensors:
            moments[name] = {k: tensors[f"optim/{name}/{k}"] for k in ("exp_avg", "exp_avg_sq", "step")}
    state.load_moments(model, moments)
    return model, state, manifest
