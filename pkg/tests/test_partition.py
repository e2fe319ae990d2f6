import pytest

from fedskip.errors import ConfigError
from fedskip.model import ModelConfig
from fedskip.partition import LayerPartition, make_partition


def cfg_with_blocks(l):
    return ModelConfig(vocab_size=16, d_model=8, n_heads=2, n_blocks=l, d_ff=16,
                       max_seq_len=8, task="tagging", n_types=1)


def test_paper_shape_top8_of_32():
    part = make_partition(cfg_with_blocks(32), "top_k", k=8)
    assert part.trainable == frozenset(range(25, 33)) | {33}
    frozen_blocks = {g for g in part.frozen if 1 <= g <= 32}
    assert len(frozen_blocks) == 24
    assert 0 in part.frozen


def test_k_zero_trains_head_only():
    part = make_partition(cfg_with_blocks(4), "top_k", k=0)
    assert part.trainable == {5}
    assert part.frozen == {0, 1, 2, 3, 4}


def test_k_equal_l_keeps_embeddings_frozen():
    part = make_partition(cfg_with_blocks(4), "top_k", k=4)
    assert part.frozen == {0}


def test_all_strategy_has_no_frozen_groups():
    part = make_partition(cfg_with_blocks(4), "all")
    assert part.frozen == frozenset()
    assert part.trainable == frozenset(range(6))


def test_k_out_of_range():
    with pytest.raises(ConfigError):
        make_partition(cfg_with_blocks(4), "top_k", k=5)
    with pytest.raises(ConfigError):
        make_partition(cfg_with_blocks(4), "top_k", k=-1)
    with pytest.raises(ConfigError):
        make_partition(cfg_with_blocks(4), "sideways")


def test_partition_invariants_enforced():
    with pytest.raises(ConfigError):
        LayerPartition(trainable=frozenset({0, 1}), frozen=frozenset({1, 2}))
    with pytest.raises(ConfigError):  # head (max id) must be trainable
        LayerPartition(trainable=frozenset({0}), frozen=frozenset({1, 2}))
    with pytest.raises(ConfigError):  # ids must be contiguous from 0
        LayerPartition(trainable=frozenset({5}), frozen=frozenset({0, 1}))


def test_aggregated_keyset_drops_head_when_local():
    part = make_partition(cfg_with_blocks(4), "top_k", k=2)
    assert part.aggregated(True) == part.trainable
    assert part.aggregated(False) == part.trainable - {5}
    assert part.lowest_trainable() == 3
