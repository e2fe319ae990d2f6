"""Client-local training, trainable-only aggregation, and the frozen merge.

local_update always computes per-example gradients and reduces them through
the same accumulation as dp_privatize, so the DP path with sigma=0 and an
inactive clip bound is bit-identical to the non-DP path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedskip.dp import DPConfig, dp_privatize, mean_per_example_grads
from fedskip.errors import InputError, ProtocolError
from fedskip.model import ModelConfig, ParamSet, TensorGroups, loss_and_grads
from fedskip.optim import OptimizerState, TrainConfig, adamw_step
from fedskip.partition import LayerPartition
from fedskip.rng import Rng, derive_seed


@dataclass
class ClientUpdate:
    round_idx: int
    client_id: int
    weight: int  # |D_i|
    params: TensorGroups  # post-training trainables, aggregated keyset only
    local_params: TensorGroups | None = None  # client-held head (head_aggregation=off)


def local_update(cfg: ModelConfig, global_params: ParamSet, partition: LayerPartition,
                 dataset, tc: TrainConfig, dp: DPConfig, rng_seed: int,
                 round_idx: int = 0, client_id: int = 0) -> ClientUpdate:
    """E epochs of mini-batch AdamW on the trainable tensors only.

    Frozen groups are shared by reference and never touched. The returned
    update carries the aggregated keyset; with head_aggregation off the
    trained head rides separately in local_params."""
    from fedskip.data import make_batch  # deferred: data layer sits above fed

    n = len(dataset.examples)
    if n == 0:
        raise InputError(f"client {client_id} has an empty dataset")

    work = {gid: ({name: t.copy() for name, t in group.items()}
                  if gid in partition.trainable else group)
            for gid, group in global_params.groups.items()}
    work_ps = ParamSet(work)
    trainables = {gid: work[gid] for gid in sorted(partition.trainable)}
    opt = OptimizerState.for_params(trainables)
    shuffle_rng = Rng(rng_seed)
    dp_rng = Rng(derive_seed(rng_seed, "dp", 0)) if dp.enabled else None

    order = list(range(n))
    for _ in range(tc.local_epochs):
        shuffle_rng.shuffle(order)
        for start in range(0, n, tc.batch_size):
            batch = make_batch(cfg, [dataset.examples[i] for i in order[start:start + tc.batch_size]])
            _, per_ex = loss_and_grads(cfg, work_ps, partition, batch, per_example=True)
            if dp.enabled:
                grads = dp_privatize(per_ex, dp.clip_norm, dp.noise_multiplier, dp_rng)
            else:
                grads = mean_per_example_grads(per_ex)
            adamw_step(opt, trainables, grads, tc)

    shipped = partition.aggregated(tc.head_aggregation)
    params = {gid: work[gid] for gid in sorted(shipped)}
    local = None
    if not tc.head_aggregation:
        head = partition.n_groups - 1
        local = {head: work[head]}
    return ClientUpdate(round_idx=round_idx, client_id=client_id, weight=n,
                        params=params, local_params=local)


def _check_same_structure(updates: list[ClientUpdate]) -> None:
    first = updates[0]
    keys = {gid: sorted(g) for gid, g in first.params.items()}
    for u in updates[1:]:
        if u.round_idx != first.round_idx:
            raise ProtocolError(
                f"round mismatch: client {u.client_id} sent round {u.round_idx}, expected {first.round_idx}")
        if {gid: sorted(g) for gid, g in u.params.items()} != keys:
            raise ProtocolError(f"update keyset mismatch from client {u.client_id}")
        for gid, g in u.params.items():
            for name, t in g.items():
                if t.shape != first.params[gid][name].shape:
                    raise ProtocolError(f"shape mismatch for {gid}/{name} from client {u.client_id}")


def aggregate(updates: list[ClientUpdate]) -> TensorGroups:
    """Sample-count-weighted mean of the shipped trainables, in f64.

    float32 inputs promote exactly; apply_update casts back to the model
    dtype. A single update passes through bit-for-bit."""
    if not updates:
        raise ProtocolError("aggregate called with no updates")
    _check_same_structure(updates)
    total = sum(u.weight for u in updates)
    if total <= 0:
        raise ProtocolError("total update weight must be positive")
    if len(updates) == 1:  # exact identity, including -0.0 payloads
        return {gid: {n: t.copy() for n, t in g.items()}
                for gid, g in updates[0].params.items()}
    out: TensorGroups = {}
    for gid, group in updates[0].params.items():
        out[gid] = {}
        for name in group:
            acc = np.zeros(group[name].shape, dtype=np.float64)
            for u in updates:
                acc += (u.weight / total) * u.params[gid][name]
            out[gid][name] = acc
    return out


def apply_update(global_params: ParamSet, agg: TensorGroups,
                 partition: LayerPartition) -> ParamSet:
    """New global model: aggregated trainables in, frozen groups shared."""
    keys = frozenset(agg)
    if keys not in (partition.trainable, partition.aggregated(False)):
        raise ProtocolError(
            f"aggregated keyset {sorted(keys)} does not match trainable set {sorted(partition.trainable)}")
    groups: TensorGroups = {}
    for gid, group in global_params.groups.items():
        if gid in keys:
            new = agg[gid]
            if sorted(new) != sorted(group):
                raise ProtocolError(f"tensor names mismatch in group {gid}")
            groups[gid] = {name: new[name].astype(t.dtype, copy=False)
                           for name, t in group.items()}
        else:
            groups[gid] = group
    return ParamSet(groups)
