"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"FDAN"  u16 version=1
    u32 n    n bytes of UTF-8 JSON (model config, or optimizer metadata)
    repeated until EOF:
        u16 len, name bytes, u8 rank, rank x u32 dims, prod(dims) x f32 LE
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import FDAN, FdanConfig, ParamStore
from .tensor import Tensor

MAGIC = b"FDAN"
VERSION = 1


def write_container(path, meta: dict, entries) -> None:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(blob)), blob]
    for name, arr in entries:
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    buf = Path(path).read_bytes()
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an FDAN checkpoint")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} (expected {VERSION})")
    (blob_len,) = struct.unpack_from("<I", buf, 6)
    pos = 10
    if pos + blob_len > len(buf):
        raise FormatError(f"{path}: truncated config blob")
    try:
        meta = json.loads(buf[pos : pos + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed config blob ({exc})") from exc
    pos += blob_len

    entries = []
    while pos < len(buf):
        label = f"entry #{len(entries)}"
        try:
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + n > len(buf):
                raise FormatError(f"{path}: {label}: truncated name")
            name = buf[pos : pos + n].decode("utf-8")
            label = repr(name)
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
        except struct.error as exc:
            raise FormatError(f"{path}: {label}: truncated header") from exc
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: {label}: name is not UTF-8") from exc
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: tensor {label} truncated ({len(buf) - pos} of {nbytes} bytes)")
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
        entries.append((name, arr))
    return meta, entries


def save_checkpoint(params: ParamStore, config: FdanConfig, path) -> None:
    write_container(path, config.to_dict(), ((name, t.data) for name, t in params))


def load_checkpoint(path, model: FDAN | None = None) -> tuple[ParamStore, FdanConfig]:
    """Read a checkpoint; with ``model`` given, also copy the weights into it.

    Loading into a model whose architecture differs from the stored config is
    a :class:`ConfigError`.
    """
    meta, entries = read_container(path)
    try:
        config = FdanConfig.from_dict(meta)
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid model config ({exc})") from exc
    if model is not None:
        if model.config.architecture() != config.architecture():
            raise ConfigError(f"checkpoint config {config.architecture()} does not match model {model.config.architecture()}")
        model.params.load_state(dict(entries))
        return model.params, config
    params = ParamStore()
    for name, arr in entries:
        if name in params:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        params.add(name, Tensor(arr))
    return params, config
