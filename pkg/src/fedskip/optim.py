"""AdamW with bias correction and decoupled weight decay.

Decay applies only to projection matrices; norm gains and embeddings are
exempt. State is keyed per trainable tensor and mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedskip.errors import ConfigError
from fedskip.model import DECAYED_TENSORS, TensorGroups


@dataclass
class TrainConfig:
    lr: float = 3e-4
    local_epochs: int = 3
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    head_aggregation: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("local_epochs and batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


@dataclass
class OptimizerState:
    m: TensorGroups = field(default_factory=dict)
    v: TensorGroups = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, trainables: TensorGroups) -> "OptimizerState":
        zeros = lambda g: {n: np.zeros_like(t) for n, t in g.items()}
        return cls(m={gid: zeros(g) for gid, g in trainables.items()},
                   v={gid: zeros(g) for gid, g in trainables.items()})


def adamw_step(state: OptimizerState, trainables: TensorGroups,
               grads: TensorGroups, hyper: TrainConfig) -> None:
    """One AdamW step over the trainable tensors, in place."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for gid, group in trainables.items():
        for name, theta in group.items():
            g = grads[gid][name]
            if g.shape != theta.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != param shape {theta.shape} for {gid}/{name}")
            m = state.m[gid][name]
            v = state.v[gid][name]
            m *= hyper.beta1
            m += (1.0 - hyper.beta1) * g
            v *= hyper.beta2
            v += (1.0 - hyper.beta2) * (g * g)
            if hyper.weight_decay and name in DECAYED_TENSORS:
                theta -= hyper.lr * hyper.weight_decay * theta
            theta -= (hyper.lr / bc1) * m / (np.sqrt(v / bc2) + hyper.eps)
