"""DP-SGD on trainable gradients: per-example clipping plus one Gaussian
noise draw per step, and a conservative closed-form sigma calibration.

Clip each example's flattened gradient to L2 norm C, sum, add
N(0, sigma^2 C^2 I) once, divide by the batch size. With sigma=0 and no
active clipping the output is bit-identical to the plain mean gradient
(the mean path and the privatized path share the same accumulation)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedskip.errors import ConfigError, InputError
from fedskip.model import GradSet
from fedskip.rng import Rng


@dataclass
class DPConfig:
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    delta: float = 1e-5
    target_epsilon: float | None = None
    rounds_for_accounting: int = 1

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ConfigError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.rounds_for_accounting < 1:
            raise ConfigError("rounds_for_accounting must be >= 1")


def canonical_items(groups: GradSet):
    """(gid, name, tensor) in the fixed traversal order shared by DP norms,
    mask streams and aggregation: group id ascending, names sorted."""
    for gid in sorted(groups):
        g = groups[gid]
        for name in sorted(g):
            yield gid, name, g[name]


def flat_size(groups: GradSet) -> int:
    return sum(t.size for _, _, t in canonical_items(groups))


def grad_l2_norm(grads: GradSet) -> float:
    total = 0.0
    for _, _, t in canonical_items(grads):
        total += float(np.dot(t.reshape(-1), t.reshape(-1)))
    return math.sqrt(total)


def mean_per_example_grads(per_example: list[GradSet]) -> GradSet:
    """Plain mean, accumulated exactly like dp_privatize's sum/B."""
    return _combine(per_example, None, 0.0, 0.0, None)


def dp_privatize(per_example_grads: list[GradSet], clip_norm: float,
                 noise_multiplier: float, rng: Rng) -> GradSet:
    """Clip each example to L2 norm clip_norm, sum, noise once, divide by B."""
    if not per_example_grads:
        raise InputError("dp_privatize requires at least one per-example gradient")
    if clip_norm <= 0:
        raise ConfigError(f"clip_norm must be positive, got {clip_norm}")
    if noise_multiplier < 0:
        raise ConfigError(f"noise_multiplier must be >= 0, got {noise_multiplier}")
    factors = []
    for g in per_example_grads:
        norm = grad_l2_norm(g)
        factors.append(1.0 if norm <= clip_norm else clip_norm / norm)
    return _combine(per_example_grads, factors, noise_multiplier, clip_norm, rng)


def _combine(per_example: list[GradSet], factors: list[float] | None,
             sigma: float, clip_norm: float, rng: Rng | None) -> GradSet:
    b = len(per_example)
    out: GradSet = {}
    for gid, name, first in canonical_items(per_example[0]):
        acc = first.copy() if factors is None or factors[0] == 1.0 else first * first.dtype.type(factors[0])
        for i in range(1, b):
            g = per_example[i][gid][name]
            if factors is None or factors[i] == 1.0:
                acc += g
            else:
                acc += g * g.dtype.type(factors[i])
        out.setdefault(gid, {})[name] = acc
    if sigma > 0.0:
        assert rng is not None
        noise = rng.normals(flat_size(out)) * (sigma * clip_norm)
        offset = 0
        for gid, name, t in canonical_items(out):
            t += noise[offset:offset + t.size].reshape(t.shape).astype(t.dtype)
            offset += t.size
    for gid, name, t in canonical_items(out):
        t /= t.dtype.type(b)
    return out


def calibrate_sigma(epsilon: float, delta: float, steps: int) -> float:
    """Noise multiplier for an (epsilon, delta) budget over `steps` uses.

    Conservative by construction: per-step budget epsilon/T, delta/T via
    basic composition, then the classical Gaussian-mechanism bound
    sigma = sqrt(2 ln(1.25/delta_1)) / epsilon_1 for sensitivity C.
    Deliberately loose; no moments/RDP accounting."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    eps_1 = epsilon / steps
    delta_1 = delta / steps
    return math.sqrt(2.0 * math.log(1.25 / delta_1)) / eps_1
