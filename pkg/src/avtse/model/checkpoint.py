"""Named-tensor archive.

Layout::

    AVTSE-CKPT v1 tensors=<n> meta_bytes=<m>\\n
    <m bytes of UTF-8 JSON metadata>
    then for each tensor:
    <name> <d0>x<d1>x...\\n          (a scalar has shape "scalar")
    <prod(shape) little-endian float32 values>
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig

MAGIC = "AVTSE-CKPT v1"
_HEAD = re.compile(r"^AVTSE-CKPT v1 tensors=(\d+) meta_bytes=(\d+)$")


class CheckpointError(ValueError):
    pass


def save_archive(path, tensors: dict[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [f"{MAGIC} tensors={len(tensors)} meta_bytes={len(meta_bytes)}\n".encode("ascii"), meta_bytes]
    for name, t in tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        chunks.append(f"{name} {shape}\n".encode("ascii"))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    m = _HEAD.match(blob[:nl].decode("ascii", errors="replace")) if nl >= 0 else None
    if m is None:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    n, meta_len = int(m.group(1)), int(m.group(2))
    pos = nl + 1
    meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    tensors = {}
    for _ in range(n):
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated tensor header")
        name, shape_txt = blob[pos:nl].decode("ascii").split(" ")
        shape = () if shape_txt == "scalar" else tuple(int(d) for d in shape_txt.split("x"))
        count = int(np.prod(shape)) if shape else 1
        pos = nl + 1
        payload = blob[pos:pos + 4 * count]
        if len(payload) != 4 * count:
            raise CheckpointError(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        pos += 4 * count
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return tensors, meta


def save_model(path, model, stage: str = "one", extra: dict | None = None) -> None:
    meta = {"config": model.cfg.to_dict(), "stage": stage}
    if extra:
        meta.update(extra)
    save_archive(path, model.state_dict(), meta)


def load_model(path, model=None):
    from .network import AVHuMARTSE

    tensors, meta = load_archive(path)
    if model is None:
        model = AVHuMARTSE(ModelConfig.from_dict(meta["config"]))
    load_state(model, tensors)
    return model, meta


def load_state(model, tensors: dict[str, np.ndarray], prefixes: tuple[str, ...] | None = None,
               strict: bool = True) -> list[str]:
    own = model.state_dict()
    loaded = []
    for name, target in own.items():
        if prefixes is not None and not name.startswith(prefixes):
            continue
        if name not in tensors:
            if strict:
                raise CheckpointError(f"missing tensor {name}")
            continue
        src = tensors[name]
        if tuple(src.shape) != tuple(target.shape):
            raise CheckpointError(f"{name}: shape {src.shape} != {tuple(target.shape)}")
        with torch.no_grad():
            target.copy_(torch.from_numpy(src).to(target.dtype))
        loaded.append(name)
    return loaded


# fairseq-style AV-HuBERT layer names -> cue-encoder transformer names
AVHUBERT_LAYER_MAP = {
    "self_attn.q_proj": "attn.q_proj",
    "self_attn.k_proj": "attn.k_proj",
    "self_attn.v_proj": "attn.v_proj",
    "self_attn.out_proj": "attn.out_proj",
    "self_attn_layer_norm": "attn_norm",
    "final_layer_norm": "ff_norm",
    "fc1": "fc1",
    "fc2": "fc2",
}
_LAYER_RE = re.compile(r"^(?:.*\.)?layers\.(\d+)\.(.+)\.(weight|bias)$")


def map_pretrained_name(name: str) -> str | None:
    """``encoder.layers.3.self_attn.q_proj.weight`` -> ``cue_encoder.layers.3.attn.q_proj.weight``."""
    m = _LAYER_RE.match(name)
    if m is None:
        return None
    idx, module, kind = m.groups()
    if module not in AVHUBERT_LAYER_MAP:
        return None
    return f"cue_encoder.layers.{idx}.{AVHUBERT_LAYER_MAP[module]}.{kind}"


def import_pretrained_transformer(model, path) -> list[str]:
    """Copy the first ``n_av_layers`` pretrained transformer layers into the cue encoder."""
    src, _ = load_archive(path)
    mapped = {}
    for name, arr in src.items():
        target = map_pretrained_name(name)
        if target is not None and int(target.split(".")[2]) < model.cfg.n_av_layers:
            mapped[target] = arr
    return load_state(model, mapped, prefixes=("cue_encoder.layers.",), strict=False)
