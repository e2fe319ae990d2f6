"""Simulated secure aggregation: zero-sum pairwise masks over fixed-point
integers mod 2^64.

Each client quantizes its weight-scaled update to 64-bit fixed point and
adds one pseudorandom mask stream per peer (added below the peer id,
subtracted above it), so individual payloads look uniform while the
cohort-wide modular sum cancels every mask exactly. Pair seeds stand in
for a key agreement; client dropout is unsupported."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedskip.dp import canonical_items, flat_size
from fedskip.errors import ConfigError, ProtocolError
from fedskip.fed import ClientUpdate
from fedskip.model import TensorGroups
from fedskip.rng import Rng

DEFAULT_SCALE = float(2 ** 20)


@dataclass
class MaskedUpdate:
    round_idx: int
    client_id: int
    weight: int
    scale: float
    cohort: tuple[int, ...]  # sorted client ids the masks were built against
    tensors: dict[int, dict[str, np.ndarray]]  # uint64 payloads


def pair_seed_key(i: int, j: int) -> tuple[int, int]:
    if i == j:
        raise ConfigError("pair seed requires two distinct clients")
    return (i, j) if i < j else (j, i)


def mask_update(update: ClientUpdate, cohort: list[int],
                pair_seeds: dict[tuple[int, int], int], scale: float) -> MaskedUpdate:
    """Quantize round(value * weight * scale) mod 2^64 and add peer masks.

    Mask streams are consumed in canonical tensor order, so both ends of a
    pair generate identical streams that cancel in the cohort sum."""
    if scale <= 0:
        raise ConfigError(f"quantization scale must be positive, got {scale}")
    me = update.client_id
    if me not in cohort:
        raise ProtocolError(f"client {me} not in cohort {sorted(cohort)}")
    peers = [c for c in sorted(cohort) if c != me]
    for p in peers:
        if pair_seed_key(me, p) not in pair_seeds:
            raise ProtocolError(f"missing pair seed for clients ({me}, {p})")

    tensors: dict[int, dict[str, np.ndarray]] = {}
    for gid, name, t in canonical_items(update.params):
        q = np.round(t.astype(np.float64) * (update.weight * scale)).astype(np.int64)
        tensors.setdefault(gid, {})[name] = q.view(np.uint64).copy()

    n = flat_size(update.params)
    for p in peers:
        stream = Rng(pair_seeds[pair_seed_key(me, p)]).fill_u64(n)
        offset = 0
        for gid, name, t in canonical_items(update.params):
            chunk = stream[offset:offset + t.size].reshape(t.shape)
            masked = tensors[gid][name]
            if me < p:
                masked += chunk
            else:
                masked -= chunk
            offset += t.size
    return MaskedUpdate(round_idx=update.round_idx, client_id=me,
                        weight=update.weight, scale=scale,
                        cohort=tuple(sorted(cohort)), tensors=tensors)


def secure_aggregate(masked: list[MaskedUpdate], total_weight: int,
                     scale: float) -> TensorGroups:
    """Modular sum (masks cancel), then dequantize by 1/(scale*total_weight).

    Per-element quantization error is at most N/(2*scale*total_weight)."""
    if not masked:
        raise ProtocolError("secure_aggregate called with no updates")
    first = masked[0]
    cohort = first.cohort
    present = tuple(sorted(m.client_id for m in masked))
    if present != cohort:
        raise ProtocolError(
            f"cohort incomplete: expected {cohort}, got {present} (dropout unsupported)")
    for m in masked:
        if m.cohort != cohort or m.round_idx != first.round_idx:
            raise ProtocolError(f"client {m.client_id} masked against a different cohort or round")
        if m.scale != scale:
            raise ProtocolError(f"scale mismatch from client {m.client_id}")
    if total_weight <= 0:
        raise ProtocolError("total_weight must be positive")

    out: TensorGroups = {}
    denom = scale * total_weight
    for gid, name, t in canonical_items(first.tensors):
        acc = t.copy()
        for m in masked[1:]:
            acc += m.tensors[gid][name]
        out.setdefault(gid, {})[name] = acc.view(np.int64).astype(np.float64) / denom
    return out
