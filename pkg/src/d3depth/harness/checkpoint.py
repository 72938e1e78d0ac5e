"""Binary checkpoints.

Layout, all integers little-endian::

    b"D3CK"  u32 version
    u32 n    n bytes of UTF-8 ``key=value`` lines (network config and metadata)
    u32 count, then per tensor:
        u16 name length, name, u8 ndim, u32 dims..., float32 payload
    u32 CRC-32 of every preceding byte

Tensors are named ``param/<name>``, ``bn/<name>/mean``, ``bn/<name>/var``,
``adam/m/<name>`` and ``adam/v/<name>``.
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np

from .. import tensor as T
from ..d3net import D3Model, NetConfig, layer_shapes
from ..exceptions import CorruptionError, FormatError

MAGIC = b"D3CK"
VERSION = 1


def _config_text(model: D3Model, meta: dict) -> bytes:
    lines = [f"{k}={v}" for k, v in model.config.as_dict().items()]
    lines += [f"bn_updates.{name}={s.updates}" for name, s in model.bn.items()]
    lines += [f"meta.{k}={v}" for k, v in meta.items()]
    return ("\n".join(lines) + "\n").encode()


def _tensor_table(model: D3Model, optimizer: T.Adam | None):
    yield from ((f"param/{k}", p.data) for k, p in model.params.items())
    for name, s in model.bn.items():
        yield f"bn/{name}/mean", s.mean
        yield f"bn/{name}/var", s.var
    if optimizer is not None:
        yield from ((f"adam/m/{k}", m) for k, m in optimizer.m.items())
        yield from ((f"adam/v/{k}", v) for k, v in optimizer.v.items())


def save_checkpoint(path, model: D3Model, optimizer: T.Adam | None = None, step: int = 0) -> None:
    """Write ``model`` (and optionally Adam state) with the training step."""
    meta = {"step": step}
    if optimizer is not None:
        meta.update(adam_t=optimizer.t, beta1=optimizer.beta1, beta2=optimizer.beta2, eps=optimizer.eps)
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    text = _config_text(model, meta)
    buf.write(struct.pack("<I", len(text)) + text)
    table = list(_tensor_table(model, optimizer))
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table:
        key = name.encode()
        buf.write(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CorruptionError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _parse_value(text):
    if text in ("True", "False"):
        return text == "True"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_checkpoint(path) -> tuple[D3Model, T.Adam | None, dict]:
    """Read a checkpoint; returns (model, optimizer or None, metadata)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: magic is {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data, path)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"{path}: format version {version} is not supported (expected {VERSION})")
    if len(data) < 12:
        raise CorruptionError(f"{path}: truncated")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptionError(f"{path}: checksum mismatch (file truncated or damaged)")
    r.data = data[:-4]

    (n,) = r.unpack("<I", "config length")
    entries = {}
    for line in r.take(n, "config").decode().splitlines():
        key, _, value = line.partition("=")
        entries[key] = _parse_value(value)
    config_keys = NetConfig().as_dict().keys()
    try:
        config = NetConfig(**{k: entries[k] for k in config_keys})
    except (KeyError, TypeError) as exc:
        raise CorruptionError(f"{path}: network config incomplete ({exc})") from None
    meta = {k[5:]: v for k, v in entries.items() if k.startswith("meta.")}

    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (klen,) = r.unpack("<H", "tensor name")
        name = r.take(klen, "tensor name").decode()
        (ndim,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{ndim}I", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * size, f"{name} payload")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise CorruptionError(f"{path}: {len(r.data) - r.pos} trailing bytes after tensor table")

    params, bn = {}, {}
    for name, shape in layer_shapes(config).items():
        arr = tensors.get(f"param/{name}")
        if arr is None or arr.shape != shape:
            got = None if arr is None else arr.shape
            raise CorruptionError(f"{path}: parameter {name} has shape {got}, config expects {shape}")
        params[name] = T.Tensor(arr.copy(), requires_grad=True, name=name)
        if name.endswith(".bn.gamma"):
            bname = name[: -len(".gamma")]
            mean, var = tensors.get(f"bn/{bname}/mean"), tensors.get(f"bn/{bname}/var")
            if mean is None or var is None or mean.shape != shape or var.shape != shape:
                raise CorruptionError(f"{path}: batchnorm statistics for {bname} missing or misshapen")
            bn[bname] = T.BatchNormState(mean.copy(), var.copy(), int(entries.get(f"bn_updates.{bname}", 0)))
    model = D3Model(config, params, bn)

    optimizer = None
    if "adam_t" in meta:
        optimizer = T.Adam(model.params, meta["beta1"], meta["beta2"], meta["eps"])
        optimizer.t = int(meta["adam_t"])
        for k, p in model.params.items():
            m, v = tensors.get(f"adam/m/{k}"), tensors.get(f"adam/v/{k}")
            if m is None or v is None or m.shape != p.shape or v.shape != p.shape:
                raise CorruptionError(f"{path}: optimizer state for {k} missing or misshapen")
            optimizer.m[k], optimizer.v[k] = m.copy(), v.copy()
    return model, optimizer, meta
