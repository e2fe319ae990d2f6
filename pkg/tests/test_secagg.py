"""Zero-sum masking, modular cancellation, and quantization error bounds."""

import numpy as np
import pytest

from fedskip.errors import ProtocolError
from fedskip.fed import ClientUpdate, aggregate
from fedskip.rng import Rng, derive_seed, pack_round_pair
from fedskip.secagg import DEFAULT_SCALE, MaskedUpdate, mask_update, secure_aggregate


def random_update(client_id, weight, seed, shapes=None):
    shapes = shapes or {2: {"wq": (4, 3)}, 3: {"w_head": (5,)}}
    rng = Rng(seed)
    params = {gid: {n: rng.normals(int(np.prod(s))).reshape(s).astype(np.float32)
                    for n, s in grp.items()} for gid, grp in shapes.items()}
    return ClientUpdate(round_idx=1, client_id=client_id, weight=weight, params=params)


def pair_seeds_for(cohort, master=99, r=1):
    return {(i, j): derive_seed(master, "mask", pack_round_pair(r, i, j))
            for i in cohort for j in cohort if i < j}


def test_single_client_cohort_is_plain_quantization():
    u = random_update(0, 3, seed=1)
    m = mask_update(u, [0], {}, DEFAULT_SCALE)
    for gid, grp in u.params.items():
        q = np.round(grp["wq" if gid == 2 else "w_head"].astype(np.float64)
                     * (3 * DEFAULT_SCALE)).astype(np.int64)
        assert np.array_equal(m.tensors[gid]["wq" if gid == 2 else "w_head"],
                              q.view(np.uint64))


def test_pair_masks_cancel_exactly():
    cohort = [0, 1]
    seeds = pair_seeds_for(cohort)
    zeros = {2: {"wq": np.zeros((4, 3), dtype=np.float32)}, 3: {"w_head": np.zeros(5, dtype=np.float32)}}
    u0 = ClientUpdate(round_idx=1, client_id=0, weight=1, params=zeros)
    u1 = ClientUpdate(round_idx=1, client_id=1, weight=1, params=zeros)
    m0 = mask_update(u0, cohort, seeds, DEFAULT_SCALE)
    m1 = mask_update(u1, cohort, seeds, DEFAULT_SCALE)
    for gid in m0.tensors:
        for name in m0.tensors[gid]:
            total = m0.tensors[gid][name] + m1.tensors[gid][name]
            assert np.all(total == 0), "masks of a pair must sum to 0 mod 2^64"
            assert np.any(m0.tensors[gid][name] != 0)  # each share alone is masked


def test_masked_payload_looks_uniform():
    # one zero-valued element, many seedings: the masked value's top byte
    # should cover all 256 buckets roughly uniformly
    zeros = {2: {"wq": np.zeros(1, dtype=np.float32)}}
    tops = []
    for s in range(4096):
        u = ClientUpdate(round_idx=1, client_id=0, weight=1, params=zeros)
        m = mask_update(u, [0, 1], {(0, 1): derive_seed(s, "mask", 0)}, DEFAULT_SCALE)
        tops.append(int(m.tensors[2]["wq"][0]) >> 56)
    counts = np.bincount(tops, minlength=256)
    assert counts.min() > 0
    assert counts.max() < 4096 / 256 * 3


def test_secure_aggregate_matches_plain_within_quantization_bound():
    cohort = [0, 1, 2, 3]
    updates = [random_update(i, w, seed=10 + i) for i, w in zip(cohort, (3, 7, 2, 8))]
    seeds = pair_seeds_for(cohort)
    total = sum(u.weight for u in updates)
    masked = [mask_update(u, cohort, seeds, DEFAULT_SCALE) for u in updates]
    sec = secure_aggregate(masked, total, DEFAULT_SCALE)
    plain = aggregate(updates)
    bound = len(cohort) / (2 * DEFAULT_SCALE * total)
    for gid in plain:
        for name in plain[gid]:
            diff = np.abs(sec[gid][name] - plain[gid][name]).max()
            assert diff <= bound, f"{gid}/{name}: {diff} > {bound}"


def test_masks_cancel_over_three_clients():
    cohort = [4, 7, 9]
    zeros = {2: {"wq": np.zeros(64, dtype=np.float32)}}
    seeds = pair_seeds_for(cohort)
    masked = [mask_update(ClientUpdate(round_idx=1, client_id=c, weight=1, params=zeros),
                          cohort, seeds, DEFAULT_SCALE) for c in cohort]
    acc = sum(m.tensors[2]["wq"] for m in masked)
    assert np.all(acc == 0)


def test_missing_pair_seed_is_protocol_error():
    u = random_update(0, 1, seed=3)
    with pytest.raises(ProtocolError):
        mask_update(u, [0, 1, 2], {(0, 1): 5}, DEFAULT_SCALE)


def test_dropout_detected():
    cohort = [0, 1, 2]
    updates = [random_update(i, 2, seed=i) for i in cohort]
    seeds = pair_seeds_for(cohort)
    masked = [mask_update(u, cohort, seeds, DEFAULT_SCALE) for u in updates]
    with pytest.raises(ProtocolError):
        secure_aggregate(masked[:2], 6, DEFAULT_SCALE)  # one member missing
    with pytest.raises(ProtocolError):
        secure_aggregate([], 1, DEFAULT_SCALE)


def test_scale_mismatch_rejected():
    cohort = [0, 1]
    updates = [random_update(i, 1, seed=i) for i in cohort]
    seeds = pair_seeds_for(cohort)
    masked = [mask_update(u, cohort, seeds, DEFAULT_SCALE) for u in updates]
    masked[1] = MaskedUpdate(round_idx=1, client_id=1, weight=1, scale=2.0,
                             cohort=masked[1].cohort, tensors=masked[1].tensors)
    with pytest.raises(ProtocolError):
        secure_aggregate(masked, 2, DEFAULT_SCALE)
