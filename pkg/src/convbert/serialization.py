"""Config files and binary checkpoints.

Config file: one ``key = value`` per line using :class:`ModelConfig` field
names; lines starting with ``#`` are comments. A ``preset = <name>`` line loads that preset
first and the remaining keys override it.

Checkpoint layout (all integers little-endian uint32):

    b"CVBT1"
    config block length, config block (UTF-8 key = value text)
    tensor count
    per tensor: name length, name (UTF-8), rank, extents..., float32 LE data
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from .encoder import PRESETS, ModelConfig, preset
from .errors import ConfigError, InputError
from .tensor import Tensor, parameter

MAGIC = b"CVBT1"
_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    if "bool" in str(kind):
        low = raw.lower()
        if low not in ("true", "false", "1", "0"):
            raise ConfigError(f"{key} expects true/false, got {raw!r}")
        return low in ("true", "1")
    try:
        if "float" in str(kind):
            return float(raw)
        if "int" in str(kind):
            return None if raw.lower() == "none" else int(raw)
    except ValueError:
        raise ConfigError(f"{key} expects a number, got {raw!r}") from None
    return raw


def parse_config(text: str) -> tuple[ModelConfig, dict[str, str]]:
    """Parse config text; returns the config and any extra (non-field) entries."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = raw
    extras = {k: values.pop(k) for k in list(values) if k not in _FIELDS and k != "preset"}
    base = values.pop("preset", None)
    changes = {k: _coerce(k, v) for k, v in values.items()}
    if base is not None:
        cfg = preset(base).replace(**changes)
    else:
        missing = [f for f in ("layers", "d", "d_emb", "ffn_inner", "heads") if f not in changes]
        if missing:
            raise ConfigError(f"config missing required keys: {', '.join(missing)}")
        cfg = ModelConfig(**changes)
    return cfg, extras


def format_config(cfg: ModelConfig, extras: dict[str, str] | None = None) -> str:
    lines = [f"{f} = {getattr(cfg, f)}" for f in _FIELDS]
    lines += [f"{k} = {v}" for k, v in (extras or {}).items()]
    return "\n".join(lines) + "\n"


def load_config(path_or_preset: str) -> ModelConfig:
    if path_or_preset in PRESETS and not Path(path_or_preset).exists():
        return preset(path_or_preset)
    return parse_config(Path(path_or_preset).read_text(encoding="utf-8"))[0]


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor], extras: dict[str, str] | None = None) -> None:
    block = format_config(cfg, extras).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict[str, str]]:
    """Returns ``(config, params, extras)``; parameters come back as float64."""
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic {data[:5]!r})")
    pos = 5

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (blen,) = take("<I")
        cfg, extras = parse_config(data[pos : pos + blen].decode("utf-8"))
        pos += blen
        (count,) = take("<I")
        params = {}
        for _ in range(count):
            (nlen,) = take("<I")
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = take("<I")
            shape = take(f"<{rank}I")
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            params[name] = parameter(arr.astype(np.float64), name=name)
    except struct.error as exc:
        raise InputError(f"{path}: truncated checkpoint") from exc
    return cfg, params, extras
