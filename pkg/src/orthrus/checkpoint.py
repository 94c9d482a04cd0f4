"""Versioned checkpoint container: text header + raw little-endian float32 data.

Layout:

    ORTH1\\n
    config.<field>=<value>\\n           (one line per ModelConfig field)
    meta.<key>=<value>\\n               (sealed flag and free-form metadata)
    tensor.<name>=<shape>;<offset>;<numel>\\n
    header_end\\n
    <raw float32 little-endian tensor data, concatenated>

Tensor names carry an ``ar.`` prefix for the frozen backbone and ``diff.``
for the trainable diffusion subset; offsets are bytes into the data section.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .model import DualViewTransformer, is_trainable_name, seal_backbone

MAGIC = b"ORTH1\n"


def _prefixed(name: str) -> str:
    return ("diff." if is_trainable_name(name) else "ar.") + name


def save_checkpoint(
    model: DualViewTransformer, path: str | Path, meta: dict | None = None
) -> None:
    path = Path(path)
    header_lines: list[str] = []
    for key, value in model.config.to_dict().items():
        header_lines.append(f"config.{key}={value}")
    header_lines.append(f"meta.sealed={int(model.sealed)}")
    for key, value in (meta or {}).items():
        header_lines.append(f"meta.{key}={value}")

    blobs: list[bytes] = []
    offset = 0
    for name, p in sorted(model.state_dict().items()):
        arr = p.detach().numpy().astype("<f4")
        raw = arr.tobytes()
        shape = "x".join(str(s) for s in arr.shape) or "1"
        header_lines.append(f"tensor.{_prefixed(name)}={shape};{offset};{arr.size}")
        blobs.append(raw)
        offset += len(raw)
    header_lines.append("header_end")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(("\n".join(header_lines) + "\n").encode("ascii"))
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path) -> tuple[DualViewTransformer, dict]:
    """Rebuild the model from a checkpoint; returns (model, meta dict)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    header_end = raw.index(b"header_end\n") + len(b"header_end\n")
    header = raw[len(MAGIC) : header_end].decode("ascii").splitlines()
    data = raw[header_end:]

    config_kv: dict[str, str] = {}
    meta: dict[str, str] = {}
    tensors: dict[str, tuple[tuple[int, ...], int, int]] = {}
    for line in header:
        if line == "header_end":
            break
        key, _, value = line.partition("=")
        if key.startswith("config."):
            config_kv[key[len("config.") :]] = value
        elif key.startswith("meta."):
            meta[key[len("meta.") :]] = value
        elif key.startswith("tensor."):
            shape_s, offset_s, numel_s = value.split(";")
            shape = tuple(int(s) for s in shape_s.split("x"))
            tensors[key[len("tensor.") :]] = (shape, int(offset_s), int(numel_s))

    config = ModelConfig.from_dict(config_kv)
    model = DualViewTransformer(config)
    state = {}
    for pname, (shape, offset, numel) in tensors.items():
        name = pname.split(".", 1)[1]  # strip ar./diff. routing prefix
        arr = np.frombuffer(data, dtype="<f4", count=numel, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    if meta.get("sealed") == "1":
        seal_backbone(model)
    return model, meta


def checkpoint_hash(path: str | Path) -> str:
    """Content hash of the checkpoint file, embedded into downstream artifacts."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
