"""Binary checkpoint and client-upload formats (little-endian).

Layout::

    b"FHBN" | u32 version | u32 kind (0 = global model, 1 = client update)
    kind 0: u64 round
    kind 1: u64 client id | u64 sample count
    u32 n_params, then per parameter:
        u32 name length | utf-8 name | u32 ndim | u32 dims... | f32 data
    kind 0: u32 n_layers, then per layer:
        u32 name length | name | u32 C | f64 mean[C] | f64 var[C]
    kind 1: u32 n_layers, then per layer:
        u32 name length | name | u32 C | u64 count | f64 sum[C] | f64 sumsq[C]

Client-local parameters (HBN alpha) are never written.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict

import numpy as np

from fedhbn.federation import ClientUpdate, GlobalModel
from fedhbn.normalization import ChannelStats

MAGIC = b"FHBN"
VERSION = 1
KIND_GLOBAL = 0
KIND_UPDATE = 1


class FormatError(ValueError):
    pass


def _w_name(buf, name: str):
    raw = name.encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _r(buf, fmt):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise FormatError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _r_name(buf) -> str:
    (n,) = _r(buf, "<I")
    raw = buf.read(n)
    if len(raw) != n:
        raise FormatError("truncated checkpoint")
    return raw.decode()


def _r_array(buf, dtype, count):
    dt = np.dtype(dtype)
    raw = buf.read(dt.itemsize * count)
    if len(raw) != dt.itemsize * count:
        raise FormatError("truncated checkpoint")
    return np.frombuffer(raw, dtype=dt).copy()


def _w_params(buf, params):
    params = OrderedDict((k, v) for k, v in params.items() if not k.endswith(".alpha"))
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        _w_name(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _r_params(buf):
    (n,) = _r(buf, "<I")
    out = OrderedDict()
    for _ in range(n):
        name = _r_name(buf)
        (ndim,) = _r(buf, "<I")
        shape = _r(buf, f"<{ndim}I")
        out[name] = _r_array(buf, "<f4", int(np.prod(shape))).reshape(shape).astype(np.float32)
    return out


def _header(buf, kind):
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, kind))


def _check_header(buf, kind):
    if buf.read(4) != MAGIC:
        raise FormatError("not an FHBN file (bad magic)")
    version, got = _r(buf, "<II")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if got != kind:
        raise FormatError(f"expected record kind {kind}, found {got}")


def encode_global(gm: GlobalModel) -> bytes:
    buf = io.BytesIO()
    _header(buf, KIND_GLOBAL)
    buf.write(struct.pack("<Q", gm.round))
    _w_params(buf, gm.weights)
    buf.write(struct.pack("<I", len(gm.stats)))
    for name, (mean, var) in gm.stats.items():
        _w_name(buf, name)
        buf.write(struct.pack("<I", mean.size))
        buf.write(np.asarray(mean, "<f8").tobytes())
        buf.write(np.asarray(var, "<f8").tobytes())
    return buf.getvalue()


def decode_global(data: bytes) -> GlobalModel:
    buf = io.BytesIO(data)
    _check_header(buf, KIND_GLOBAL)
    (round_,) = _r(buf, "<Q")
    weights = _r_params(buf)
    (n,) = _r(buf, "<I")
    stats = {}
    for _ in range(n):
        name = _r_name(buf)
        (c,) = _r(buf, "<I")
        stats[name] = (_r_array(buf, "<f8", c).astype(np.float64), _r_array(buf, "<f8", c).astype(np.float64))
    return GlobalModel(weights, stats, round_)


def encode_update(update: ClientUpdate) -> bytes:
    buf = io.BytesIO()
    _header(buf, KIND_UPDATE)
    buf.write(struct.pack("<QQ", update.cid, update.num_samples))
    _w_params(buf, update.weights)
    buf.write(struct.pack("<I", len(update.stats)))
    for name, st in update.stats.items():
        _w_name(buf, name)
        buf.write(struct.pack("<IQ", st.channels, st.count))
        buf.write(np.asarray(st.sum, "<f8").tobytes())
        buf.write(np.asarray(st.sumsq, "<f8").tobytes())
    return buf.getvalue()


def decode_update(data: bytes) -> ClientUpdate:
    buf = io.BytesIO(data)
    _check_header(buf, KIND_UPDATE)
    cid, n = _r(buf, "<QQ")
    weights = _r_params(buf)
    (layers,) = _r(buf, "<I")
    stats = {}
    for _ in range(layers):
        name = _r_name(buf)
        c, count = _r(buf, "<IQ")
        stats[name] = ChannelStats(int(count), _r_array(buf, "<f8", c), _r_array(buf, "<f8", c))
    return ClientUpdate(int(cid), weights, stats, int(n))


def save_checkpoint(path, gm: GlobalModel) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_global(gm))


def load_checkpoint(path) -> GlobalModel:
    with open(path, "rb") as fh:
        return decode_global(fh.read())
