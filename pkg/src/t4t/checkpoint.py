"""Binary checkpoint format.

Layout (all integers little-endian)::

    4 bytes   magic b"T4T1"
    u32       format version (1)
    u32       length of the config snapshot, then that many UTF-8 bytes
              (flat key=value lines describing the ModelConfig)
    u32       number of parameter blobs, then per blob:
                u16 name length, name (UTF-8)
                u8  rank, rank x u32 dims
                prod(dims) x float32 (little-endian)

Blobs appear in the model's registration order.
"""

from __future__ import annotations

import dataclasses
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import EncoderConfig, ModelConfig, TpmConfig, _fmt

MAGIC = b"T4T1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_snapshot(cfg: ModelConfig) -> str:
    lines = []
    for f in dataclasses.fields(EncoderConfig):
        lines.append(f"encoder.{f.name}={_fmt(getattr(cfg.encoder, f.name))}")
    for f in dataclasses.fields(TpmConfig):
        lines.append(f"tpm.{f.name}={_fmt(getattr(cfg.tpm, f.name))}")
    lines.append(f"general_classes={cfg.general_classes}")
    lines.append(f"trans_classes={cfg.trans_classes}")
    lines.append(f"dual_head={_fmt(cfg.dual_head)}")
    return "\n".join(lines) + "\n"


def parse_snapshot(text: str) -> ModelConfig:
    enc, tpm, top = {}, {}, {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, value = line.split("=", 1)
        if key.startswith("encoder."):
            enc[key[8:]] = value
        elif key.startswith("tpm."):
            tpm[key[4:]] = value
        else:
            top[key] = value

    def conv(default, value):
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(","))
        if isinstance(default, bool):
            return value == "true"
        if isinstance(default, int):
            return int(value)
        return value

    e0, t0 = EncoderConfig(), TpmConfig()
    encoder = EncoderConfig(**{k: conv(getattr(e0, k), v) for k, v in enc.items()})
    tpm_cfg = TpmConfig(**{k: conv(getattr(t0, k), v) for k, v in tpm.items()})
    return ModelConfig(encoder, tpm_cfg, int(top["general_classes"]), int(top["trans_classes"]),
                       top["dual_head"] == "true")


def save_checkpoint(path, model) -> None:
    snap = config_snapshot(model.cfg).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(snap)), snap]
    named = list(model.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple:
    """Return ``(ModelConfig, OrderedDict name -> float32 array)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a T4T1 checkpoint")
    pos = 4
    try:
        version, n = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        cfg = parse_snapshot(data[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode()
            pos += ln
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            state[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return cfg, state


def load_checkpoint(path, model=None):
    """Load into ``model`` (whose config must match the snapshot) or build a new one."""
    from .decoder import Trans4Trans

    cfg, state = read_checkpoint(path)
    if model is None:
        model = Trans4Trans(cfg)
    elif config_snapshot(model.cfg) != config_snapshot(cfg):
        raise CheckpointError(f"{path}: config snapshot does not match the model")
    model.load_state_dict(state)
    return model
