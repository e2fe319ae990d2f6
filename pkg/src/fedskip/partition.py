"""Frozen/trainable split of the model's parameter groups.

Group ids: 0 = embeddings, 1..L = transformer blocks, L+1 = task head.
The head is always trainable; embeddings are frozen under top_k and only
train under the full-model strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

from fedskip.errors import ConfigError


@dataclass(frozen=True)
class LayerPartition:
    trainable: frozenset[int]
    frozen: frozenset[int]

    def __post_init__(self):
        if self.trainable & self.frozen:
            raise ConfigError("trainable and frozen groups overlap")
        ids = self.trainable | self.frozen
        if ids != set(range(len(ids))):
            raise ConfigError("partition must cover group ids 0..L+1 exactly")
        head = max(ids)
        if head not in self.trainable:
            raise ConfigError("task head group must be trainable")

    @property
    def n_groups(self) -> int:
        return len(self.trainable) + len(self.frozen)

    def lowest_trainable(self) -> int:
        return min(self.trainable)

    def aggregated(self, head_aggregation: bool = True) -> frozenset[int]:
        """Group ids shipped to the server (head excluded when client-local)."""
        if head_aggregation:
            return self.trainable
        return self.trainable - {self.n_groups - 1}


def make_partition(cfg, strategy: str = "top_k", k: int | None = None) -> LayerPartition:
    """Partition for a model config.

    top_k(k): blocks L-k+1..L plus the head train; embeddings and the
    remaining blocks freeze. all(): every group trains (full-FedAvg
    baseline).
    """
    L = cfg.n_blocks
    head = L + 1
    if strategy == "all":
        return LayerPartition(trainable=frozenset(range(head + 1)), frozen=frozenset())
    if strategy != "top_k":
        raise ConfigError(f"unknown partition strategy {strategy!r}")
    if k is None:
        raise ConfigError("top_k strategy requires k")
    if not 0 <= k <= L:
        raise ConfigError(f"top_k k={k} out of range [0, {L}]")
    blocks = set(range(L - k + 1, L + 1))
    trainable = frozenset(blocks | {head})
    frozen = frozenset(set(range(head + 1)) - trainable)
    return LayerPartition(trainable=trainable, frozen=frozen)
