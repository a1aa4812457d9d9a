"""Binary checkpoint format.

Layout: b"BDLM" | u32 version | u32 header length | UTF-8 JSON header |
float32 little-endian payload, tensors in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .model import Denoiser, ModelConfig

MAGIC = b"BDLM"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: tuple(v.shape) for k, v in Denoiser(cfg).state_dict().items()}


def encode_checkpoint(params: dict[str, torch.Tensor], model_cfg: ModelConfig, step: int = 0,
                      meta: dict | None = None) -> bytes:
    names = list(params)
    header = {
        "config": asdict(model_cfg),
        "dtype": "float32",
        "meta": meta or {},
        "step": int(step),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        params[n].detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes() for n in names
    )
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload


def save_checkpoint(params: dict[str, torch.Tensor], model_cfg: ModelConfig, path: str | Path,
                    step: int = 0, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, model_cfg, step, meta))


def read_header(raw: bytes) -> tuple[dict, int]:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise BadMagicError("not a BDLM checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {VERSION}")
    if len(raw) < 12 + hlen:
        raise TruncatedPayloadError("file ends inside the header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    return header, 12 + hlen


def decode_checkpoint(raw: bytes) -> tuple[dict[str, torch.Tensor], ModelConfig, dict]:
    header, off = read_header(raw)
    cfg = ModelConfig(**header["config"])
    want = expected_shapes(cfg)
    seen = set()
    for t in header["tensors"]:
        name, shape = t["name"], tuple(t["shape"])
        if name not in want:
            raise ShapeError(f"unexpected tensor {name}")
        if shape != want[name]:
            raise ShapeError(f"tensor {name}: header shape {shape} != expected {want[name]}")
        seen.add(name)
    if seen != set(want):
        raise ShapeError(f"missing tensor(s): {sorted(set(want) - seen)}")
    need = sum(int(np.prod(t["shape"])) * 4 for t in header["tensors"])
    have = len(raw) - off
    if have != need:
        kind = "truncated" if have < need else "oversized"
        raise TruncatedPayloadError(f"{kind} payload: {have} bytes, expected {need}")
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float32)
        params[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
        off += 4 * n
    return params, cfg, header


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], ModelConfig, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def load_model(path: str | Path, precision: str = "single") -> tuple[Denoiser, dict]:
    from .tensorcore import dtype_of

    params, cfg, header = load_checkpoint(path)
    model = Denoiser(cfg)
    model.load_state_dict(params)
    return model.to(dtype_of(precision)), header
