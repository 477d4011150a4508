"""Binary model files.

Layout (all integers little-endian)::

    b"RNC1"  | u32 version | u64 metadata length | UTF-8 JSON metadata
    zero padding to an 8-byte boundary
    per tensor, in manifest order:
        u32 dtype tag | u32 ndim | u64 * ndim shape | payload
        [f32 min, f32 scale]            (tag 2 only)
        zero padding to an 8-byte boundary
    u32 CRC-32 of every preceding byte

Dtype tags: 0 = float32, 1 = float64, 2 = 8-bit codes with min/scale.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .compress import PruneMask, QuantizedTensor, dequantize
from .data import Vocabulary
from .errors import BadMagicError, ChecksumError, FormatError, StorageError, UnsupportedVersionError
from .model import (
    GATES,
    DenseLstmLayer,
    DenseRnnLayer,
    LmModel,
    LowRankLstmLayer,
    ModelConfig,
    TTLstmLayer,
)
from .tt import TTMatrix

MAGIC = b"RNC1"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
TRAILER = struct.Struct("<I")
FRAME_BYTES = HEADER.size + TRAILER.size
TAGS = {"float32": 0, "float64": 1, "quant8": 2}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


def _pad(n: int) -> int:
    return (-n) % 8


def tensor_blob_size(shape, tag: str) -> int:
    code = TAGS[tag]
    n = 8 + 8 * len(shape) + math.prod(shape) * _DTYPES[code].itemsize
    if code == 2:
        n += 8
    return n + _pad(n)


def _blob(arr, code: int, q: QuantizedTensor | None = None) -> bytes:
    shape = q.shape if q is not None else arr.shape
    parts = [struct.pack("<II", code, len(shape)), struct.pack(f"<{len(shape)}Q", *shape)]
    if code == 2:
        parts += [q.codes.tobytes(), struct.pack("<ff", q.min, q.scale)]
    else:
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + b"\0" * _pad(len(body))


def _config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    if isinstance(d["tt_ranks"], tuple):
        d["tt_ranks"] = list(d["tt_ranks"])
    return d


def _config_from(d: dict) -> ModelConfig:
    d = dict(d)
    if isinstance(d.get("tt_ranks"), list):
        d["tt_ranks"] = tuple(d["tt_ranks"])
    return ModelConfig(**d)


def serialize(model: LmModel, precision: str = "float32") -> bytes:
    if precision not in ("float32", "float64"):
        raise ValueError(f"weights are stored as float32 or float64, not {precision!r}")
    params = model.named_params()
    manifest, blobs = [], []
    for name, arr in params.items():
        q = model.quantized.get(name)
        code = 2 if q is not None else TAGS[precision]
        manifest.append({"name": name, "tag": code, "shape": list(arr.shape)})
        blobs.append(_blob(arr, code, q))
    tt_modes = {}
    for l, layer in enumerate(model.layers):
        if isinstance(layer, TTLstmLayer):
            for p in ("W_", "V_"):
                for g in GATES:
                    mat = getattr(layer, p + g)
                    tt_modes[f"layers.{l}.{p}{g}"] = {"row_modes": list(mat.row_modes), "col_modes": list(mat.col_modes)}
    meta = {
        "format": "lmcompress-model",
        "config": _config_dict(model.config),
        "layer_kinds": [layer.kind for layer in model.layers],
        "tensors": manifest,
        "tt_modes": tt_modes,
        "shared": {f"layers.{l}.Wb": f"layers.{l - 1}.Ub" for l in range(1, len(model.layers))
                   if isinstance(model.layers[l], LowRankLstmLayer)},
        "vocab": None if model.vocab is None else model.vocab.tokens,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = HEADER.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes
    head += b"\0" * _pad(len(head))
    payload = head + b"".join(blobs)
    return payload + TRAILER.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}", path=str(path)) from None


def save(model: LmModel, path, precision: str = "float32") -> int:
    """Write ``model`` to ``path`` atomically; returns the number of bytes written."""
    data = serialize(model, precision)
    _atomic_write(Path(path), data)
    return len(data)


def _parse(data: bytes):
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a model file (bad magic bytes)")
    if len(data) < HEADER.size:
        raise ChecksumError("file truncated inside the header")
    _, version, meta_len = HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    if len(data) < FRAME_BYTES:
        raise ChecksumError("file truncated")
    body, (crc,) = data[:-TRAILER.size], TRAILER.unpack_from(data, len(data) - TRAILER.size)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checksum mismatch: file is truncated or corrupted")
    pos = HEADER.size
    try:
        meta = json.loads(body[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}") from None
    pos += meta_len
    pos += _pad(pos)
    tensors = {}
    for entry in meta["tensors"]:
        code, ndim = struct.unpack_from("<II", body, pos)
        shape = struct.unpack_from(f"<{ndim}Q", body, pos + 8)
        start = pos + 8 + 8 * ndim
        if code not in _DTYPES or list(shape) != entry["shape"]:
            raise FormatError(f"tensor {entry['name']} header does not match manifest")
        count = math.prod(shape)
        nbytes = count * _DTYPES[code].itemsize
        raw = np.frombuffer(body, dtype=_DTYPES[code], count=count, offset=start).reshape(shape)
        end = start + nbytes
        if code == 2:
            lo, scale = struct.unpack_from("<ff", body, end)
            tensors[entry["name"]] = QuantizedTensor(shape, raw.copy(), lo, scale)
            end += 8
        else:
            tensors[entry["name"]] = raw.astype(np.float64)
        pos = end + _pad(end - pos)
    return meta, tensors


def _build(meta, tensors) -> LmModel:
    quantized = {k: v for k, v in tensors.items() if isinstance(v, QuantizedTensor)}
    arrays = {k: dequantize(v).astype(np.float64) if isinstance(v, QuantizedTensor) else v
              for k, v in tensors.items()}
    cfg = _config_from(meta["config"])
    layers = []
    for l, kind in enumerate(meta["layer_kinds"]):
        pre = f"layers.{l}."
        get = lambda n: arrays[pre + n]
        if kind == "dense-rnn":
            layers.append(DenseRnnLayer(get("W"), get("V"), get("b")))
        elif kind == "dense-lstm":
            layers.append(DenseLstmLayer(**{p + g: get(p + g) for p in ("W_", "V_", "b_") for g in GATES}))
        elif kind == "lowrank-lstm":
            mats = {p + g: get(p + g) for p in ("Wa_", "Ua_", "b_") for g in GATES}
            Wb = layers[-1].Ub if layers else None
            layers.append(LowRankLstmLayer(get("Ub"), Wb=Wb, **mats))
        elif kind == "tt-lstm":
            mats = {"b_" + g: get("b_" + g) for g in GATES}
            for p in ("W_", "V_"):
                for g in GATES:
                    modes = meta["tt_modes"][pre + p + g]
                    cores, j = [], 0
                    while f"{pre}{p}{g}.core{j}" in arrays:
                        cores.append(arrays[f"{pre}{p}{g}.core{j}"])
                        j += 1
                    mats[p + g] = TTMatrix(cores, modes["row_modes"], modes["col_modes"])
            layers.append(TTLstmLayer(**mats))
        else:
            raise FormatError(f"unknown layer kind {kind!r}")
    vocab = None if meta.get("vocab") is None else Vocabulary(meta["vocab"])
    return LmModel(cfg, vocab, arrays["embedding"], layers, arrays["softmax.W"], arrays["softmax.b"], quantized)


def deserialize(data: bytes) -> LmModel:
    meta, tensors = _parse(data)
    try:
        return _build(meta, tensors)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"inconsistent model file: {exc}") from None


def load(path) -> LmModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}", path=str(path)) from None
    return deserialize(data)


def save_masks(mask: PruneMask, path):
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, __sparsity__=np.array(mask.sparsity),
                     **{k: v.astype(np.uint8) for k, v in mask.masks.items()})
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}", path=str(path)) from None


def load_masks(path) -> PruneMask:
    path = Path(path)
    try:
        with np.load(path) as npz:
            sparsity = float(npz["__sparsity__"])
            masks = {k: npz[k].astype(np.float64) for k in npz.files if k != "__sparsity__"}
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read mask file {path}: {exc}", path=str(path)) from None
    return PruneMask(masks, sparsity)
