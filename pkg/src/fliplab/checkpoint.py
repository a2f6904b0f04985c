"""Checkpoint file I/O and the clean-vs-attacked diff tool.

Binary little-endian format: magic "BFLP", version u32 (=1), tensor count
u32; per tensor a u16 name length + UTF-8 name, kind u8 (0 int8-quant,
1 float64), ndim u8, dims as u32[], then scale f64 + int8 codes (kind 0)
or f64 values (kind 1). A CRC32 of everything preceding closes the file.

Model configuration rides along as a float64 tensor named "_meta"
(vocab, context, n_layer, n_head, d_model, seed); it is not a weight.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError
from .model import BitLocation, ModelConfig, ParamSet, QuantTensor, float_layout, weight_layout

MAGIC = b"BFLP"
VERSION = 1
META_NAME = "_meta"


def _meta_values(cfg: ModelConfig) -> np.ndarray:
    return np.asarray([cfg.vocab, cfg.context, cfg.n_layer, cfg.n_head,
                       cfg.d_model, cfg.seed], dtype=np.float64)


def save_checkpoint(params: ParamSet, path) -> None:
    body = bytearray()
    body += MAGIC
    quant = [params.qtensors[n] for n, _ in weight_layout(params.config)]
    floats = [(n, params.ftensors[n]) for n, _ in float_layout(params.config)]
    count = 1 + len(quant) + len(floats)
    body += struct.pack("<II", VERSION, count)

    def put_header(name: str, kind: int, dims):
        raw = name.encode("utf-8")
        body.extend(struct.pack("<H", len(raw)))
        body.extend(raw)
        body.extend(struct.pack("<BB", kind, len(dims)))
        for d in dims:
            body.extend(struct.pack("<I", d))

    put_header(META_NAME, 1, (6,))
    body += _meta_values(params.config).tobytes()
    for q in quant:
        put_header(q.name, 0, q.dims)
        body += struct.pack("<d", q.scale)
        body += np.ascontiguousarray(q.codes).tobytes()
    for name, arr in floats:
        put_header(name, 1, arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()

    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.at = 0

    def take(self, n: int, what: str) -> bytes:
        if self.at + n > len(self.blob):
            raise FormatError(f"truncated while reading {what}")
        out = self.blob[self.at:self.at + n]
        self.at += n
        return out

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]

    def f64(self, what):
        return struct.unpack("<d", self.take(8, what))[0]


def _read_tensors(path) -> dict[str, tuple[int, tuple[int, ...], float | None, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError("truncated while reading crc")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise FormatError("crc mismatch")
    r = _Reader(blob[:-4])
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    count = r.u32("tensor_count")
    tensors = {}
    for _ in range(count):
        nlen = r.u16("name_len")
        name = r.take(nlen, "name").decode("utf-8")
        kind = r.u8("kind")
        if kind not in (0, 1):
            raise FormatError(f"bad kind {kind} for tensor {name!r}")
        ndim = r.u8("ndim")
        dims = tuple(r.u32("dims") for _ in range(ndim))
        size = int(np.prod(dims)) if dims else 1
        if kind == 0:
            scale = r.f64("scale")
            codes = np.frombuffer(r.take(size, "codes"), dtype=np.int8).reshape(dims)
            tensors[name] = (0, dims, scale, codes)
        else:
            vals = np.frombuffer(r.take(8 * size, "values"), dtype="<f8").reshape(dims)
            tensors[name] = (1, dims, None, vals)
    if r.at != len(r.blob):
        raise FormatError("trailing bytes after last tensor")
    return tensors


def load_checkpoint(path) -> ParamSet:
    tensors = _read_tensors(path)
    if META_NAME not in tensors:
        raise FormatError("missing _meta tensor")
    meta = tensors[META_NAME][3]
    cfg = ModelConfig(*(int(x) for x in meta))
    qt, ft = {}, {}
    for name, _ in weight_layout(cfg):
        if name not in tensors:
            raise FormatError(f"missing tensor {name!r}")
        kind, dims, scale, data = tensors[name]
        if kind != 0:
            raise FormatError(f"tensor {name!r} has wrong kind")
        if scale <= 0.0:
            raise FormatError(f"non-positive scale for tensor {name!r}")
        qt[name] = QuantTensor(name, dims, data.copy(), scale)
    for name, _ in float_layout(cfg):
        if name not in tensors:
            raise FormatError(f"missing tensor {name!r}")
        kind, dims, _, data = tensors[name]
        if kind != 1:
            raise FormatError(f"tensor {name!r} has wrong kind")
        ft[name] = data.astype(np.float64).copy()
    return ParamSet(cfg, qt, ft)


def diff_checkpoints(path_a, path_b) -> list[BitLocation]:
    """Exactly the bit locations whose codes differ between two checkpoints."""
    ta, tb = _read_tensors(path_a), _read_tensors(path_b)
    if set(ta) != set(tb):
        raise FormatError("checkpoints carry different tensor sets")
    out: list[BitLocation] = []
    for name in ta:
        ka, dims_a, _, da = ta[name]
        kb, dims_b, _, db = tb[name]
        if ka != kb or dims_a != dims_b:
            raise FormatError(f"tensor {name!r} differs in kind or dims")
        if ka != 0:
            continue
        xor = (da.reshape(-1).view(np.uint8) ^ db.reshape(-1).view(np.uint8))
        for idx in np.nonzero(xor)[0]:
            bits = int(xor[idx])
            for b in range(8):
                if bits & (1 << b):
                    out.append(BitLocation(name, int(idx), b))
    return sorted(out)
