"""Binary model files.

Layout (all integers and floats little-endian)::

    b"BLKREW01"
    u64   payload length
    payload:
        u32   header length
        bytes header, UTF-8 JSON (layer table, per-layer representation)
        blobs, in layer order
    u32   CRC-32 of payload

Each parameterized layer is stored in exactly one representation:

* ``dense``: bias f64[R], weights f64[R*C]
* ``masked``: bias, weights, row-group bitset, column-group bitset
* ``reordered``: bias, order i64[R], then per group gather i64[k] and
  compact weights f64[rows*k], then the two group bitsets

Bitsets pack 64 groups per u64 word, bit ``b`` of word ``w`` holding group
``64*w + b`` in the ``(Br, Bc, m)`` / ``(Br, Bc, n)`` flattening.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .blocks import BlockScheme, LayerMask
from .nn import LayerSpec, Network
from .reorder import ReorderedModel, RowGroup

MAGIC = b"BLKREW01"
VERSION = 1


class ModelFileError(RuntimeError):
    pass


@dataclass
class ModelFile:
    """A network plus, per parameterized layer, an optional mask and reordered form.

    A layer with a reordered form is stored reordered; otherwise masked if it
    has a mask; otherwise dense.
    """

    network: Network
    masks: list[LayerMask | None] = field(default_factory=list)
    reordered: list[ReorderedModel | None] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.network.weights)
        self.masks = list(self.masks) or [None] * n
        self.reordered = list(self.reordered) or [None] * n
        if len(self.masks) != n or len(self.reordered) != n:
            raise ValueError("one mask slot and one reordered slot per parameterized layer")
        for i, (m, r) in enumerate(zip(self.masks, self.reordered)):
            if r is not None and m is None:
                raise ValueError(f"layer {i}: reordered form needs its mask")

    def representation(self, i: int) -> str:
        if self.reordered[i] is not None:
            return "reordered"
        return "masked" if self.masks[i] is not None else "dense"


def pack_bits(bits: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(bits, dtype=bool).ravel()
    words = (flat.size + 63) // 64
    padded = np.zeros(words * 64, dtype=bool)
    padded[:flat.size] = flat
    return np.packbits(padded, bitorder="little").tobytes()


def unpack_bits(raw: bytes, shape) -> np.ndarray:
    count = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    return bits[:count].astype(bool).reshape(shape)


def _bitset_bytes(count: int) -> int:
    return (count + 63) // 64 * 8


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _i64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


def encode(model: ModelFile) -> bytes:
    net = model.network
    blobs = io.BytesIO()
    params = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        rep = model.representation(i)
        entry = {"rep": rep, "shape": list(w.shape)}
        blobs.write(_f64(b))
        if rep == "dense":
            blobs.write(_f64(w))
        else:
            mask = model.masks[i]
            s = mask.scheme
            entry["scheme"] = [s.m, s.n, s.layer_rows, s.layer_cols, int(s.clamped)]
            if rep == "masked":
                blobs.write(_f64(w))
            else:
                r = model.reordered[i]
                entry["groups"] = [[g.start, g.stop, len(g.gather)] for g in r.groups]
                blobs.write(_i64(r.order))
                for g in r.groups:
                    blobs.write(_i64(g.gather))
                    blobs.write(_f64(g.weights))
            blobs.write(pack_bits(mask.row_alive))
            blobs.write(pack_bits(mask.col_alive))
        params.append(entry)
    header = {
        "version": VERSION,
        "layers": [{"kind": l.kind, "dims": list(l.dims), "has_bias": l.has_bias}
                   for l in net.layers],
        "params": params,
        "meta": model.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = struct.pack("<I", len(hbytes)) + hbytes + blobs.getvalue()
    return MAGIC + struct.pack("<Q", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFileError("model file truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def i64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<i8").astype(np.int64)


def decode(raw: bytes) -> ModelFile:
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise ModelFileError("not a BLKREW01 model file")
    (length,) = struct.unpack("<Q", raw[8:16])
    if len(raw) != 16 + length + 4:
        raise ModelFileError("model file length does not match its header")
    payload = raw[16:16 + length]
    (crc,) = struct.unpack("<I", raw[16 + length:])
    if zlib.crc32(payload) != crc:
        raise ModelFileError("checksum mismatch: model file is corrupted")
    (hlen,) = struct.unpack("<I", payload[:4])
    try:
        header = json.loads(payload[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"bad header: {exc}") from None
    if header.get("version") != VERSION:
        raise ModelFileError(f"unsupported model file version {header.get('version')}")
    layers = [LayerSpec(l["kind"], tuple(l["dims"]), l["has_bias"]) for l in header["layers"]]
    rd = _Reader(payload, 4 + hlen)
    weights, biases, masks, reordered = [], [], [], []
    for entry in header["params"]:
        rows, cols = entry["shape"]
        biases.append(rd.f64(rows))
        rep = entry["rep"]
        if rep == "dense":
            weights.append(rd.f64(rows * cols).reshape(rows, cols))
            masks.append(None)
            reordered.append(None)
            continue
        m, n, lr, lc, clamped = entry["scheme"]
        scheme = BlockScheme(m, n, lr, lc, clamped=bool(clamped))
        r = None
        if rep == "masked":
            weights.append(rd.f64(rows * cols).reshape(rows, cols))
        elif rep == "reordered":
            order = rd.i64(rows)
            groups = []
            for start, stop, k in entry["groups"]:
                gather = rd.i64(k)
                groups.append(RowGroup(start, stop, gather, rd.f64((stop - start) * k).reshape(stop - start, k)))
            r = ReorderedModel((rows, cols), order, groups)
            weights.append(r.to_dense())
        else:
            raise ModelFileError(f"unknown representation {rep!r}")
        rshape, cshape = scheme.group_shape("row"), scheme.group_shape("column")
        row_alive = unpack_bits(rd.take(_bitset_bytes(int(np.prod(rshape)))), rshape)
        col_alive = unpack_bits(rd.take(_bitset_bytes(int(np.prod(cshape)))), cshape)
        masks.append(LayerMask(scheme, row_alive, col_alive))
        reordered.append(r)
    if rd.pos != len(payload):
        raise ModelFileError("trailing bytes after last layer")
    net = Network(layers, weights, biases)
    return ModelFile(net, masks, reordered, header.get("meta", {}))


def save(model: ModelFile, path) -> None:
    Path(path).write_bytes(encode(model))


def load(path) -> ModelFile:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc.strerror}") from None
    return decode(raw)
