"""Binary dataset container (TWPS) and checkpoint (TWCK) files.

All integers and floats are little-endian. Writes go to a temp file in the
target directory and are renamed into place.

TWPS v1::

    "TWPS" u16 version  u32 B  u32 N  u32 runs  u32 n_total  u8 sensor_pos
    u8 n_materials  { u8 len  utf-8 name }*
    runs x { u32 run_label  u8 material  B*N f32 (row-major, bins x frames) }

TWCK v1::

    "TWCK" u16 version  u32 descriptor_len  descriptor (utf-8 JSON)
    u64 n_values  n_values x f64 (parameters then buffers, descriptor order)
    f64 best_val_loss  u32 epoch
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn.model import Architecture, ModelParams
from .nn.train import Checkpoint, cast_model
from .spectrogram import DB_RANGE, MATERIALS, SENSOR_POSITIONS, Spectrogram

DATASET_MAGIC = b"TWPS"
CHECKPOINT_MAGIC = b"TWCK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        # mkstemp creates 0600; use the permissions a plain open() would give
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(self.pos, f"truncated while reading {what} "
                                        f"({len(self.buf) - self.pos} of {n} bytes left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))
        return vals if len(vals) > 1 else vals[0]

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(self.pos, f"{len(self.buf) - self.pos} trailing bytes")


# ----------------------------------------------------------------------------
# dataset container


def encode_dataset(items: Sequence[Spectrogram], n_total: int) -> bytes:
    if not items:
        raise ValueError("no spectrograms to store")
    B, N = items[0].shape
    pos = {s.sensor_pos for s in items}
    if len(pos) != 1:
        raise ValueError("all runs must share one sensor position")
    parts = [DATASET_MAGIC, struct.pack("<HIIIIB", FORMAT_VERSION, B, N, len(items), n_total,
                                        SENSOR_POSITIONS.index(pos.pop()))]
    parts.append(struct.pack("<B", len(MATERIALS)))
    for name in MATERIALS:
        raw = name.encode()
        parts.append(struct.pack("<B", len(raw)) + raw)
    for s in items:
        if s.shape != (B, N):
            raise ValueError(f"run {s.run_label} has shape {s.shape}, expected {(B, N)}")
        parts.append(struct.pack("<IB", s.run_label, MATERIALS.index(s.material)))
        parts.append(np.ascontiguousarray(s.values, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> tuple[list[Spectrogram], int]:
    """Spectrograms and the stored total tool life."""
    r = _Reader(buf)
    if r.take(4, "magic") != DATASET_MAGIC:
        raise FormatError(0, "bad magic, not a TWPS dataset")
    version = r.unpack("H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(4, f"unsupported version {version}")
    B, N, runs, n_total, pos_idx = r.unpack("IIIIB", "header")
    if pos_idx >= len(SENSOR_POSITIONS):
        raise FormatError(r.pos - 1, f"bad sensor position code {pos_idx}")
    if B < 1 or N < 1:
        raise FormatError(6, f"bad dimensions B={B} N={N}")
    materials = []
    for _ in range(r.unpack("B", "material count")):
        at = r.pos
        name = r.take(r.unpack("B", "material name length"), "material name").decode("utf-8", "replace")
        if name not in MATERIALS:
            raise FormatError(at, f"unknown material {name!r}")
        materials.append(name)
    expected = r.pos + runs * (5 + 4 * B * N)
    if expected != len(buf):
        raise FormatError(r.pos, f"declared {runs} runs of {B}x{N} need {expected} bytes, "
                                 f"file has {len(buf)}")
    items = []
    for _ in range(runs):
        at = r.pos
        label, mat = r.unpack("IB", "run header")
        if mat >= len(materials):
            raise FormatError(at + 4, f"material index {mat} outside table")
        if label < 1:
            raise FormatError(at, f"bad run label {label}")
        data_at = r.pos
        v = np.frombuffer(r.take(4 * B * N, "run values"), dtype="<f4").reshape(B, N)
        bad = ~((v >= 0) & (v <= DB_RANGE))
        if bad.any():
            k = int(np.flatnonzero(bad.ravel())[0])
            raise FormatError(data_at + 4 * k, f"value {v.ravel()[k]} outside [0, {DB_RANGE}]")
        items.append(Spectrogram(v.astype(np.float32), int(label), materials[mat],
                                 SENSOR_POSITIONS[pos_idx]))
    r.done()
    return items, int(n_total)


def save_dataset(path, items: Sequence[Spectrogram], n_total: int) -> None:
    atomic_write(path, encode_dataset(items, n_total))


def load_dataset(path) -> tuple[list[Spectrogram], int]:
    return decode_dataset(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# checkpoint


def _descriptor(model: ModelParams) -> dict:
    return {
        "architecture": model.arch.to_dict(),
        "dtype": str(next(iter(model.params.values())).dtype),
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "buffers": [[k, list(v.shape)] for k, v in model.buffers.items()],
    }


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if not np.isfinite(ckpt.val_loss):
        raise ValueError("validation loss must be finite")
    desc = json.dumps(_descriptor(ckpt.model), sort_keys=True, separators=(",", ":")).encode()
    arrays = list(ckpt.model.params.values()) + list(ckpt.model.buffers.values())
    values = np.concatenate([np.asarray(a, dtype="<f8").ravel() for a in arrays])
    return b"".join([
        CHECKPOINT_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(desc)), desc,
        struct.pack("<Q", values.size), values.tobytes(),
        struct.pack("<dI", ckpt.val_loss, ckpt.epoch),
    ])


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(0, "bad magic, not a TWCK checkpoint")
    version = r.unpack("H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(4, f"unsupported version {version}")
    at = r.pos
    raw = r.take(r.unpack("I", "descriptor length"), "descriptor")
    try:
        desc = json.loads(raw)
        arch = Architecture.from_dict(desc["architecture"])
        dtype = np.dtype(desc["dtype"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(at + 4, f"bad architecture descriptor: {exc}") from exc
    expect = arch.param_shapes()
    declared = OrderedDict((k, tuple(s)) for k, s in desc["params"])
    if declared != expect:
        raise FormatError(at + 4, "parameter list does not match the architecture")
    buffers = OrderedDict((k, tuple(s)) for k, s in desc["buffers"])
    if buffers != arch.buffer_shapes():
        raise FormatError(at + 4, "buffer list does not match the architecture")
    total = sum(int(np.prod(s)) for s in list(declared.values()) + list(buffers.values()))
    at = r.pos
    n = r.unpack("Q", "value count")
    if n != total:
        raise FormatError(at, f"stores {n} values, architecture needs {total}")
    flat = np.frombuffer(r.take(8 * n, "parameter values"), dtype="<f8")
    val_loss, epoch = r.unpack("dI", "trailer")
    r.done()
    sizes = [int(np.prod(s)) for s in declared.values()]
    split = sum(sizes)
    params = _unflatten(flat[:split], declared)
    bufs = _unflatten(flat[split:], buffers)
    model = ModelParams(arch, params, bufs)
    return Checkpoint(cast_model(model, dtype), int(epoch), float(val_loss))


def _unflatten(flat, shapes) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    k = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        out[name] = flat[k:k + size].reshape(shape).astype(np.float64)
        k += size
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
