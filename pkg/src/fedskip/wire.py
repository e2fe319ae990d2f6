"""Bit-exact little-endian codec for partial model updates, plus the
communication-cost accounting behind the headline "% of full model" metric.

Frame layout (all little-endian):

    magic "FSKP" | version u16 | round u32 | client_id u32 | weight u64
    [version 2 only: scale f64 | cohort_len u16 | cohort ids u32 each]
    layer_count u16
    per layer, ascending layer id:
        layer_id u16 | tensor_count u16
        per tensor, ascending name-hash:
            name_hash u64 | dtype u8 | rank u8 | dims u32*rank | payload

Version 1 carries float updates, version 2 fixed-point masked updates
(u64 payloads) along with their quantization scale and cohort. Tensor
names travel as FNV-1a 64 hashes; decoding resolves them against the
model's fixed tensor-name vocabulary."""

from __future__ import annotations

import struct

import numpy as np

from fedskip.errors import DecodeError
from fedskip.fed import ClientUpdate
from fedskip.model import ALL_TENSOR_NAMES, ModelConfig, tensor_shapes
from fedskip.partition import LayerPartition
from fedskip.secagg import MaskedUpdate

MAGIC = b"FSKP"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint64): 2}


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


_NAME_BY_HASH = {fnv1a64(n.encode()): n for n in ALL_TENSOR_NAMES}
assert len(_NAME_BY_HASH) == len(ALL_TENSOR_NAMES), "tensor name hash collision"


def _encode_tensors(out: bytearray, tensors: dict[int, dict[str, np.ndarray]]) -> None:
    out += struct.pack("<H", len(tensors))
    for gid in sorted(tensors):
        group = tensors[gid]
        out += struct.pack("<HH", gid, len(group))
        hashed = sorted((fnv1a64(name.encode()), name) for name in group)
        for h, name in hashed:
            t = group[name]
            code = _DTYPE_CODES[np.dtype(t.dtype)]
            out += struct.pack("<QBB", h, code, t.ndim)
            out += struct.pack(f"<{t.ndim}I", *t.shape)
            out += np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes()


def encode_update(update: ClientUpdate | MaskedUpdate) -> bytes:
    """Canonical bytes: layers ascending, tensors by name-hash."""
    out = bytearray(MAGIC)
    if isinstance(update, MaskedUpdate):
        out += struct.pack("<HIIQ", 2, update.round_idx, update.client_id, update.weight)
        out += struct.pack("<dH", update.scale, len(update.cohort))
        out += struct.pack(f"<{len(update.cohort)}I", *update.cohort)
        _encode_tensors(out, update.tensors)
    else:
        out += struct.pack("<HIIQ", 1, update.round_idx, update.client_id, update.weight)
        _encode_tensors(out, update.params)
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise DecodeError("truncated frame", self.off)
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return vals

    def take_bytes(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DecodeError("truncated payload", self.off)
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out


def decode_update(blob: bytes) -> ClientUpdate | MaskedUpdate:
    """Exact inverse of encode_update; never returns a partial value."""
    r = _Reader(blob)
    if r.take_bytes(4) != MAGIC:
        raise DecodeError("bad magic", 0)
    version, round_idx, client_id, weight = r.take("<HIIQ")
    if version not in (1, 2):
        raise DecodeError(f"unsupported version {version}", 4)
    scale, cohort = 0.0, ()
    if version == 2:
        scale, cohort_len = r.take("<dH")
        cohort = r.take(f"<{cohort_len}I")
    (layer_count,) = r.take("<H")
    tensors: dict[int, dict[str, np.ndarray]] = {}
    for _ in range(layer_count):
        gid, tensor_count = r.take("<HH")
        group: dict[str, np.ndarray] = {}
        for _ in range(tensor_count):
            name_off = r.off
            name_hash, dtype_code, rank = r.take("<QBB")
            if name_hash not in _NAME_BY_HASH:
                raise DecodeError(f"unknown tensor name hash {name_hash:#018x}", name_off)
            if dtype_code not in _DTYPES:
                raise DecodeError(f"unknown dtype code {dtype_code}", name_off + 8)
            dims = r.take(f"<{rank}I")
            dt = _DTYPES[dtype_code]
            n = int(np.prod(dims)) if rank else 1
            payload = r.take_bytes(n * dt.itemsize)
            arr = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
            group[_NAME_BY_HASH[name_hash]] = arr
        tensors[gid] = group
    if r.off != len(blob):
        raise DecodeError("trailing bytes after frame", r.off)
    if version == 2:
        return MaskedUpdate(round_idx=round_idx, client_id=client_id, weight=weight,
                            scale=scale, cohort=tuple(cohort), tensors=tensors)
    return ClientUpdate(round_idx=round_idx, client_id=client_id, weight=weight,
                        params=tensors)


# ---------------------------------------------------------------------------
# communication accounting
# ---------------------------------------------------------------------------


def group_param_counts(cfg: ModelConfig) -> dict[int, int]:
    return {gid: sum(int(np.prod(s)) for s in g.values())
            for gid, g in tensor_shapes(cfg).items()}


def comm_fraction(partition: LayerPartition, cfg: ModelConfig,
                  include_head: bool = True) -> float:
    """Payload bytes of a trainable update over payload bytes of a full
    update (uniform dtype, headers excluded). include_head=False drops the
    task head group from both sides."""
    counts = group_param_counts(cfg)
    head = cfg.head_group
    num_groups = set(partition.trainable)
    den_groups = set(counts)
    if not include_head:
        num_groups -= {head}
        den_groups -= {head}
    num = sum(counts[g] for g in num_groups)
    den = sum(counts[g] for g in den_groups)
    return num / den


def frame_bytes(cfg: ModelConfig, group_ids, dtype=np.float32, masked: bool = False,
                cohort_size: int = 0) -> int:
    """Exact encoded frame length for an update carrying these groups."""
    itemsize = np.dtype(dtype).itemsize if not masked else 8
    total = 4 + 2 + 4 + 4 + 8 + 2  # magic..weight + layer_count
    if masked:
        total += 8 + 2 + 4 * cohort_size
    shapes = tensor_shapes(cfg)
    for gid in group_ids:
        total += 4  # layer_id + tensor_count
        for shape in shapes[gid].values():
            total += 10 + 4 * len(shape) + int(np.prod(shape)) * itemsize
    return total
