"""Self-describing checkpoint files.

Layout: an 8-byte little-endian unsigned length, that many bytes of UTF-8
JSON header, then every parameter array as little-endian float64 in the
order listed under ``header["params"]``.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from typing import Any

import numpy as np
import torch
from torch import nn

from .diffcore import DTYPE

MAGIC = "flowbridge-checkpoint"
VERSION = 1


def write(path: str, kind: str, arrays: "OrderedDict[str, torch.Tensor]", config: dict, seed: int,
          metadata: dict | None = None) -> None:
    header = {
        "format": MAGIC,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "seed": int(seed),
        "metadata": metadata or {},
        "params": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v.detach().cpu().numpy(), dtype="<f8").tobytes())
    os.replace(tmp, path)


def read(path: str) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} file")
    arrays = OrderedDict()
    off = 8 + n
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(entry["shape"])
        arrays[entry["name"]] = torch.tensor(a, dtype=DTYPE)
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


def module_arrays(module: nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((prefix + k, v.detach()) for k, v in module.named_parameters())


def load_into(module: nn.Module, arrays: "OrderedDict[str, Any]", prefix: str = "") -> None:
    with torch.no_grad():
        for k, p in module.named_parameters():
            src = arrays[prefix + k]
            if tuple(src.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {prefix + k}")
            p.copy_(src)
