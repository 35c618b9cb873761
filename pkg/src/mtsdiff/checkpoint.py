"""Binary checkpoint format.

Layout::

    MTSDIFF-CKPT\\n
    key=<json value>\\n      (sorted keys, includes version and block count)
    ...
    END\\n
    blocks: u16 name length | name (utf-8) | u8 ndim | u32 dims... | float32 LE data
    8-byte blake2b digest of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .dataio import FormatError, NormStats
from .denoiser import ModelConfig
from .state import ModelState

MAGIC = b"MTSDIFF-CKPT\n"
VERSION = 1


class CheckpointError(FormatError):
    pass


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def to_bytes(state: ModelState) -> bytes:
    blocks = [(f"param/{n}", p.value) for n, p in state.named_parameters()]
    blocks += [(f"ema/{n}", state.ema[n]) for n, _ in state.named_parameters()]
    header = {
        "version": VERSION,
        "model": state.cfg.to_dict(),
        "seq_len": state.seq_len,
        "data_manifest": state.data_manifest,
        "stats": None if state.stats is None else {"mean": state.stats.mean, "std": state.stats.std},
        "label_freqs": state.label_freqs,
        "step": state.step,
        "extra": state.extra,
        "blocks": len(blocks),
    }
    out = bytearray(MAGIC)
    for key in sorted(header):
        out += f"{key}={json.dumps(header[key], sort_keys=True)}\n".encode()
    out += b"END\n"
    for name, arr in blocks:
        nb = name.encode()
        arr = np.asarray(arr)
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += _digest(bytes(out))
    return bytes(out)


def save_checkpoint(state: ModelState, path) -> None:
    Path(path).write_bytes(to_bytes(state))


def from_bytes(data: bytes, expect_manifest: dict | None = None) -> ModelState:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint")
    payload, digest = data[:-8], data[-8:]
    if _digest(payload) != digest:
        raise CheckpointError("checkpoint digest mismatch (file corrupted or truncated)")
    header = {}
    pos = len(MAGIC)
    while True:
        nl = payload.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("truncated checkpoint header")
        line = payload[pos:nl].decode(errors="replace")
        pos = nl + 1
        if line == "END":
            break
        key, sep, val = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line {line[:40]!r}")
        try:
            header[key] = json.loads(val)
        except json.JSONDecodeError:
            raise CheckpointError(f"malformed header value for {key!r}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} != {VERSION}")

    blocks = {}
    try:
        for _ in range(header["blocks"]):
            (nlen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 4 * count > len(payload):
                raise CheckpointError(f"block {name!r} truncated")
            blocks[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error:
        raise CheckpointError("truncated block table") from None
    if pos != len(payload):
        raise CheckpointError("trailing bytes after the last block")

    if expect_manifest is not None:
        check_manifest(header["data_manifest"], expect_manifest)
    cfg = ModelConfig(**header["model"])
    state = ModelState.from_config(cfg, header["seq_len"], header["data_manifest"], dtype=np.float32)
    for n, p in state.named_parameters():
        for kind in ("param", "ema"):
            key = f"{kind}/{n}"
            if key not in blocks:
                raise CheckpointError(f"missing block {key!r}")
            if blocks[key].shape != p.value.shape:
                raise CheckpointError(f"block {key!r} has shape {blocks[key].shape}, model expects {p.value.shape}")
        p.value = blocks[f"param/{n}"]
        state.ema[n] = blocks[f"ema/{n}"]
    if header["stats"] is not None:
        state.stats = NormStats(**header["stats"])
    state.label_freqs = header["label_freqs"]
    state.step = header["step"]
    state.extra = header.get("extra", {})
    return state


def load_checkpoint(path, expect_manifest: dict | None = None) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return from_bytes(path.read_bytes(), expect_manifest)


def check_manifest(have: dict, want: dict) -> None:
    """Raise unless two dataset manifests describe the same feature layout."""
    for key in ("seq_len", "numerical", "categorical", "label"):
        if have.get(key) != want.get(key):
            raise CheckpointError(f"manifest mismatch on {key!r}: checkpoint {have.get(key)!r} vs data {want.get(key)!r}")
