"""Checkpoint format: one SART tensor file per named layer tensor plus a JSON
manifest (names, shapes, freeze flags, config echo, format version)."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation, require
from .networks import DiscriminatorConfig, GeneratorConfig, ModelParams
from .tensorfile import read_tensor, write_tensor

FORMAT_VERSION = 1


def _file_name(tensor_name: str) -> str:
    return tensor_name.replace(".", "__") + ".sart"


def save_checkpoint(params: ModelParams, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = {}
    for name, tensor in params.named_tensors():
        arr = tensor.detach().cpu().numpy()
        stored_as_float = arr.dtype.kind in ("i", "u", "b")
        write_tensor(out_dir / _file_name(name),
                     arr.astype(np.float32) if stored_as_float else arr)
        layers[name] = {
            "file": _file_name(name),
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "frozen": bool(params.freeze.get(name, False)),
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "last_conv_layer": params.last_conv_layer,
        "seed": params.seed,
        "generator_config": dataclasses.asdict(params.g_config),
        "discriminator_config": dataclasses.asdict(params.d_config),
        "layers": layers,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(ckpt_dir, dtype: torch.dtype = torch.float32) -> ModelParams:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    require(manifest_path.exists(), f"no manifest.json in {ckpt_dir}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version in {ckpt_dir}")
    params = ModelParams(
        GeneratorConfig(**manifest["generator_config"]),
        DiscriminatorConfig(**manifest["discriminator_config"]),
        seed=int(manifest.get("seed", 0)), dtype=dtype)
    params.last_conv_layer = manifest["last_conv_layer"]

    per_component: dict[str, dict[str, torch.Tensor]] = {k: {} for k in params.components()}
    for name, meta in manifest["layers"].items():
        comp, sub = name.split(".", 1)
        require(comp in per_component, f"unknown component in layer name {name!r}")
        arr = read_tensor(ckpt_dir / meta["file"]).astype(meta["dtype"])
        per_component[comp][sub] = torch.from_numpy(arr)
        params.freeze[name] = bool(meta["frozen"])
    for comp, module in params.components().items():
        module.load_state_dict(per_component[comp], strict=True)
    for name, p in params.named_parameters():
        p.requires_grad_(not params.freeze.get(name, False))
    return params
