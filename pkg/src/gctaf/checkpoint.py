"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"GCTAF1"
    u64 metadata length, metadata bytes   (ModelConfig as canonical JSON)
    repeated until EOF:
        u32 name length, name (utf-8)
        u32 rank, rank x u64 extents
        prod(extents) x f64 values, row-major

Besides the model parameters a checkpoint may carry extra named arrays (the
training-set normalisation statistics, for instance).
"""
import json
import struct

import numpy as np

from .errors import FormatError
from .model import ModelConfig, check_params, init_params

MAGIC = b"GCTAF1"


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, cfg, params, extras=None):
    meta = canonical_json(cfg.to_dict()).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(meta)), meta]
    for name, t in params.named_parameters():
        chunks.append(_pack_tensor(name, t.data))
    for name, arr in (extras or {}).items():
        chunks.append(_pack_tensor(name, arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                              self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    """Return ``(ModelConfig, {name: ndarray})`` in file order."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic string; not a GCTAF1 checkpoint", 0)
    (meta_len,) = r.unpack("<Q", "metadata length")
    meta_at = r.pos
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(meta_len, "metadata").decode("utf-8")))
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"unreadable metadata: {exc}", meta_at) from None

    arrays = {}
    while r.pos < len(r.buf):
        at = r.pos
        (name_len,) = r.unpack("<I", "tensor name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not utf-8", at + 4) from None
        (rank,) = r.unpack("<I", f"rank of {name}")
        shape = r.unpack(f"<{rank}Q", f"extents of {name}")
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8")
        if name in arrays:
            raise FormatError(f"duplicate tensor {name!r}", at)
        arrays[name] = data.astype(np.float64).reshape(shape)
    return cfg, arrays


def load_checkpoint(path):
    """Return ``(cfg, params, extras)``; extras are arrays not owned by the model."""
    cfg, arrays = read_checkpoint(path)
    params = init_params(cfg)
    check_params(params, cfg)
    names = [name for name, _ in params.named_parameters()]
    missing = [n for n in names if n not in arrays]
    if missing:
        raise FormatError(f"checkpoint lacks parameters {missing[:5]}")
    for name, t in params.named_parameters():
        if arrays[name].shape != t.shape:
            raise FormatError(f"{name}: stored shape {list(arrays[name].shape)} does not match "
                              f"config shape {list(t.shape)}")
        t.data = arrays.pop(name)
    return cfg, params, arrays


def save_params(path, cfg, params):
    save_checkpoint(path, cfg, params)


def load_params(path):
    cfg, params, _ = load_checkpoint(path)
    return cfg, params
