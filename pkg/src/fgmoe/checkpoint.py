"""Binary checkpoints: magic "FGMC", version, a manifest of (name, shape,
freeze flag), little-endian float64 payloads, and a trailing CRC-32.

The wire format carries no architecture description, so loading requires
the experiment config that built the model; a config whose shapes disagree
with the manifest raises a named error.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .config import ExperimentConfig
from .errors import FormatError
from .model import build_model

MAGIC = b"FGMC"
VERSION = 1


def save_checkpoint(model, path) -> None:
    entries = model.state_entries()
    manifest = [struct.pack("<I", len(entries))]
    payload_parts = []
    for name, arr, trainable in entries:
        nb = name.encode("utf-8")
        manifest.append(struct.pack("<H", len(nb)))
        manifest.append(nb)
        manifest.append(struct.pack("<BB", 1 if trainable else 0, arr.ndim))
        manifest.append(struct.pack(f"<{max(arr.ndim, 0)}I", *arr.shape))
        payload_parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = struct.pack("<I", VERSION) + b"".join(manifest) + b"".join(payload_parts)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def read_manifest(raw: bytes):
    """Parse (name, shape, trainable) entries plus the payload offset."""
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"bad magic: expected {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError("truncated checkpoint while reading header")
    body = raw[4:-4]
    stored = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise FormatError("checksum mismatch: body CRC-32 does not match trailer")
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError(f"truncated checkpoint while reading {what}")
        out = body[pos:pos + n]
        pos += n
        return out

    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    count = struct.unpack("<I", take(4, "entry count"))[0]
    entries = []
    for k in range(count):
        nlen = struct.unpack("<H", take(2, f"entry {k} name length"))[0]
        name = take(nlen, f"entry {k} name").decode("utf-8")
        trainable, ndim = struct.unpack("<BB", take(2, f"entry {k} flags"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"entry {k} shape"))
        entries.append((name, tuple(shape), bool(trainable)))
    return entries, body, pos


def load_checkpoint(path, cfg: ExperimentConfig):
    """Rebuild the model for ``cfg`` and load a saved state into it."""
    with open(path, "rb") as fh:
        raw = fh.read()
    entries, body, pos = read_manifest(raw)
    model = build_model(cfg)
    state = model.state_entries()
    if len(state) != len(entries):
        raise FormatError(
            f"shape manifest mismatch: checkpoint has {len(entries)} entries, "
            f"model built from config has {len(state)}")
    for (name, shape, trainable), (mname, arr, _) in zip(entries, state):
        if name != mname or shape != arr.shape:
            raise FormatError(
                f"shape manifest mismatch at {mname!r} {arr.shape}: "
                f"checkpoint holds {name!r} {shape}")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, shape, trainable in entries:
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(body):
            raise FormatError(f"truncated checkpoint while reading payload of {name!r}")
        arr = np.frombuffer(body[pos:pos + 8 * n], dtype="<f8").reshape(shape).copy()
        pos += 8 * n
        if name in params:
            params[name].data = arr
            params[name].requires_grad = trainable
        else:
            buffers[name][...] = arr
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} unexpected trailing payload bytes")
    return model
