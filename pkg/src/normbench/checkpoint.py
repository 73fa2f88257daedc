"""NBCK checkpoint container: named little-endian float32 arrays plus a CRC.

Layout::

    b"NBCK" | u16 version | u32 meta_len | meta (UTF-8 JSON)
    | u32 count | count x (u16 name_len, name, u8 ndim, ndim x u32 dim, u64 offset)
    | float32 payload | u32 CRC32 of every preceding byte

Offsets are relative to the start of the payload.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NBCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict = field(default_factory=dict)  # name -> float32 ndarray
    meta: dict = field(default_factory=dict)


def dumps(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    head = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.arrays))]
    blobs = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype="<f4", order="C")
        raw = name.encode()
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", offset))
        data = arr.tobytes()
        blobs.append(data)
        offset += len(data)
    body = b"".join(head) + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(buf: bytes) -> Checkpoint:
    if len(buf) < 4 + 6 + 4 + 4 or buf[:4] != MAGIC:
        if buf[:4] != MAGIC and len(buf) >= 4:
            raise CheckpointError("not an NBCK checkpoint (bad magic)")
        raise CheckpointError("checksum error: file truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum error: CRC mismatch (file corrupt or truncated)")
    try:
        pos = 4
        version, meta_len = struct.unpack_from("<HI", body, pos)
        pos += 6
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(body[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            entries.append((name, shape, offset))
        arrays = {}
        for name, shape, offset in entries:
            n = int(np.prod(shape, dtype=np.int64))
            start = pos + offset
            if start + 4 * n > len(body):
                raise CheckpointError(f"array {name} runs past the payload")
            arrays[name] = np.frombuffer(body, dtype="<f4", count=n, offset=start).reshape(shape).astype(np.float32)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return Checkpoint(arrays, meta)


def save(path, ckpt: Checkpoint) -> None:
    data = dumps(ckpt)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


# -- model <-> checkpoint ---------------------------------------------------

def from_model(model, meta: dict | None = None) -> Checkpoint:
    """Parameters as ``param/<name>``, norm statistics as ``norm/<layer>/<field>``.

    The float32 payload is authoritative for arrays; the scalar hyperparameters
    (alpha, eps, update_count) are also kept exactly in ``meta["norm_scalars"]``.
    """
    arrays = {f"param/{k}": p.data for k, p in model.parameters().items()}
    scalars = {}
    for name, st in model.norm_states().items():
        arrays[f"norm/{name}/running_mean"] = st.running_mean
        arrays[f"norm/{name}/running_var"] = st.running_var
        arrays[f"norm/{name}/alpha"] = np.array([st.alpha])
        arrays[f"norm/{name}/eps"] = np.array([st.eps])
        arrays[f"norm/{name}/update_count"] = np.array([st.update_count])
        scalars[name] = {"alpha": st.alpha, "eps": st.eps, "update_count": st.update_count}
    meta = dict(meta or {})
    meta["norm_scalars"] = scalars
    return Checkpoint({k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}, meta)


def _layer_of(name: str) -> str:
    parts = name.split("/", 1)[-1].split("/")[0].split(".")
    return ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]


def _expected(model) -> dict:
    out = {f"param/{k}": p.shape for k, p in model.parameters().items()}
    for name, st in model.norm_states().items():
        for field_ in ("running_mean", "running_var"):
            out[f"norm/{name}/{field_}"] = st.running_mean.shape
        for field_ in ("alpha", "eps", "update_count"):
            out[f"norm/{name}/{field_}"] = (1,)
    return out


def into_model(model, ckpt: Checkpoint) -> None:
    """Copy parameters and norm statistics into ``model``; all-or-nothing."""
    expected = _expected(model)
    for name in sorted(set(ckpt.arrays) - set(expected)):
        raise CheckpointError(f"shape mismatch at layer {_layer_of(name)}: {name} not present in the model")
    for name, shape in expected.items():
        if name not in ckpt.arrays:
            raise CheckpointError(f"shape mismatch at layer {_layer_of(name)}: {name} missing from the checkpoint")
        if tuple(ckpt.arrays[name].shape) != tuple(shape):
            raise CheckpointError(f"shape mismatch at layer {_layer_of(name)}: {name} has shape "
                                  f"{tuple(ckpt.arrays[name].shape)}, model expects {tuple(shape)}")
    scalars = ckpt.meta.get("norm_scalars", {})
    for k, p in model.parameters().items():
        p.data[...] = ckpt.arrays[f"param/{k}"].astype(p.dtype)
    for name, st in model.norm_states().items():
        st.running_mean = ckpt.arrays[f"norm/{name}/running_mean"].astype(st.dtype)
        st.running_var = ckpt.arrays[f"norm/{name}/running_var"].astype(st.dtype)
        exact = scalars.get(name, {})
        st.alpha = float(exact.get("alpha", ckpt.arrays[f"norm/{name}/alpha"][0]))
        st.eps = float(exact.get("eps", ckpt.arrays[f"norm/{name}/eps"][0]))
        st.update_count = int(exact.get("update_count", ckpt.arrays[f"norm/{name}/update_count"][0]))
        st.loaded = True
