"""On-disk checkpoints: a JSON manifest plus one little-endian binary payload.

Tensors whose format fits in float32 (bf16, fp32) are written as ``<f4``,
which holds them exactly. Carrier-width tensors from wide-precision runs are
written as ``<f8`` so the round trip stays bit-exact for them too.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import LayerKind, ModelConfig, Parameter, ParameterSet
from .numerics import format_from_tag, quantize
from .optim import OptimizerState
from .precision import PrecisionPolicy

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError", "MANIFEST", "PAYLOAD"]

MANIFEST = "manifest.json"
PAYLOAD = "tensors.bin"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _dtype_for(tag: str) -> str:
    return "<f8" if format_from_tag(tag).is_carrier else "<f4"


def _entries(params: ParameterSet, state: OptimizerState | None):
    pol = params.policy
    w_tag = pol.weights_fmt.tag()
    for name, p in params.items():
        yield "param", name, p.layer_kind, w_tag, p.values
        if p.init_snapshot is not None:
            yield "init", name, p.layer_kind, w_tag, p.init_snapshot
    if state is not None:
        s_tag = pol.optimizer_state_fmt.tag()
        kinds = params.kinds()
        for group, table in (("m", state.m), ("v", state.v), ("master", state.master or {})):
            tag = pol.master_fmt.tag() if group == "master" else s_tag
            for name, arr in table.items():
                yield group, name, kinds[name], tag, arr


def save_checkpoint(path, params: ParameterSet, state: OptimizerState | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``tensors.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    with open(path / PAYLOAD, "wb") as fh:
        for group, name, kind, tag, arr in _entries(params, state):
            dtype = _dtype_for(tag)
            buf = np.ascontiguousarray(arr, dtype=np.float64).astype(dtype).tobytes()
            fh.write(buf)
            tensors.append(
                {
                    "group": group,
                    "name": name,
                    "layer_kind": LayerKind(kind).value,
                    "shape": list(np.shape(arr)),
                    "format": tag,
                    "dtype": dtype,
                    "offset": offset,
                    "nbytes": len(buf),
                }
            )
            offset += len(buf)
    manifest = {
        "version": VERSION,
        "model_config": params.cfg.to_dict(),
        "policy": params.policy.to_dict(),
        "optimizer": None if state is None else {"step": state.step, "extra": state.extra},
        "tensors": tensors,
        "extra": extra or {},
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path):
    """Return ``(params, state_or_None, extra)``; every tensor is checked against its format tag."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest in {path}") from None
    if manifest.get("version") != VERSION:
        raise CheckpointError("unsupported checkpoint version")
    blob = (path / PAYLOAD).read_bytes()
    cfg = ModelConfig(**manifest["model_config"])
    policy = PrecisionPolicy.from_dict(manifest["policy"])
    params = ParameterSet(cfg, policy)
    groups: dict[str, dict] = {"init": {}, "m": {}, "v": {}, "master": {}}
    for t in manifest["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"tensor {t['group']}/{t['name']} runs past the payload")
        arr = np.frombuffer(blob[t["offset"] : end], dtype=t["dtype"]).astype(np.float64).reshape(t["shape"])
        fmt = format_from_tag(t["format"])
        if not fmt.is_carrier and not np.array_equal(quantize(arr, fmt), arr, equal_nan=True):
            raise CheckpointError(f"tensor {t['group']}/{t['name']} holds values outside {fmt.name}")
        if t["group"] == "param":
            params[t["name"]] = Parameter(t["name"], LayerKind(t["layer_kind"]), arr.copy())
        else:
            groups[t["group"]][t["name"]] = arr.copy()
    for name, snap in groups["init"].items():
        params[name].init_snapshot = snap
    state = None
    if manifest["optimizer"] is not None:
        opt = manifest["optimizer"]
        state = OptimizerState(groups["m"], groups["v"], groups["master"] or None, opt["step"], opt.get("extra", {}))
    return params, state, manifest.get("extra", {})
