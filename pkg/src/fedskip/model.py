"""Small transformer with exact manual backpropagation.

Architecture: token + learned positional embeddings, pre-RMSNorm blocks
with bidirectional multi-head attention and a SwiGLU feed-forward (no
biases anywhere), a final RMSNorm, and a task head. Tasks: per-token BIO
tagging, mean-pooled multi-label classification, and masked-token
prediction for pretraining.

The backward pass is hand-derived. It can stop below the lowest trainable
block (frozen blocks underneath contribute activations but never receive
gradient computation) and can keep the batch axis to produce per-example
gradients for DP-SGD clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedskip.errors import ConfigError, InputError
from fedskip.partition import LayerPartition
from fedskip.rng import Rng

_RMS_EPS = 1e-6

TASKS = ("tagging", "multilabel", "mlm")

# Tensor names per group. Blocks: attention (norm gain, q/k/v/out
# projections) then SwiGLU (norm gain, gate/up/down projections).
EMBED_TENSORS = ("tok_emb", "pos_emb")
BLOCK_TENSORS = ("attn_norm_g", "wq", "wk", "wv", "wo",
                 "ffn_norm_g", "w_gate", "w_up", "w_down")
HEAD_TENSORS = ("head_norm_g", "w_head")

# Gain vectors and embeddings are exempt from decoupled weight decay.
DECAYED_TENSORS = frozenset({"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "w_head"})

ALL_TENSOR_NAMES = tuple(sorted(set(EMBED_TENSORS) | set(BLOCK_TENSORS) | set(HEAD_TENSORS)))

# layer_id -> {tensor name -> array}; used for parameters and gradients alike
TensorGroups = dict[int, dict[str, np.ndarray]]
GradSet = TensorGroups


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_blocks: int
    d_ff: int
    max_seq_len: int
    task: str = "tagging"
    n_types: int = 1  # K: entity types (tagging) or labels (multilabel)

    def __post_init__(self):
        if self.n_blocks < 1 or self.n_heads < 1 or self.n_types < 1:
            raise ConfigError("n_blocks, n_heads and n_types must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.vocab_size < 2 or self.d_ff < 1 or self.max_seq_len < 1:
            raise ConfigError("vocab_size, d_ff, max_seq_len out of range")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def head_group(self) -> int:
        return self.n_blocks + 1

    @property
    def n_groups(self) -> int:
        return self.n_blocks + 2

    @property
    def n_out(self) -> int:
        if self.task == "tagging":
            return 2 * self.n_types + 1  # O plus B-k/I-k per type
        if self.task == "multilabel":
            return self.n_types
        return self.vocab_size


@dataclass
class ParamSet:
    """All model parameters grouped by layer id (0=embeddings, L+1=head)."""

    groups: TensorGroups

    @property
    def dtype(self) -> np.dtype:
        return self.groups[0]["tok_emb"].dtype

    def clone(self) -> "ParamSet":
        return ParamSet({gid: {n: t.copy() for n, t in g.items()}
                         for gid, g in self.groups.items()})


@dataclass
class Batch:
    """Rectangular token batch with task targets.

    tags: [B, T] BIO tag ids; labels: [B, K] 0/1 floats;
    mlm_targets: [B, T] original token ids at masked positions, -1 elsewhere.
    """

    tokens: np.ndarray
    tags: np.ndarray | None = None
    labels: np.ndarray | None = None
    mlm_targets: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def tensor_shapes(cfg: ModelConfig) -> dict[int, dict[str, tuple[int, ...]]]:
    """Per-group tensor name -> shape, fixed by the config."""
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[int, dict[str, tuple[int, ...]]] = {
        0: {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d)},
    }
    for b in range(1, cfg.n_blocks + 1):
        shapes[b] = {
            "attn_norm_g": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d),
            "wo": (d, d), "ffn_norm_g": (d,), "w_gate": (f, d),
            "w_up": (f, d), "w_down": (d, f),
        }
    shapes[cfg.head_group] = {"head_norm_g": (d,), "w_head": (cfg.n_out, d)}
    return shapes


def group_tensor_names(cfg: ModelConfig, gid: int) -> tuple[str, ...]:
    if gid == 0:
        return EMBED_TENSORS
    if gid == cfg.head_group:
        return HEAD_TENSORS
    if 1 <= gid <= cfg.n_blocks:
        return BLOCK_TENSORS
    raise ConfigError(f"group id {gid} out of range for L={cfg.n_blocks}")


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for g in tensor_shapes(cfg).values() for s in g.values())


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamSet:
    """Deterministic init: linears ~ N(0, 1/d_model), embeddings ~ N(0, 0.02^2),
    norm gains 1. Draw order is group id ascending, schema tensor order."""
    rng = Rng(seed)
    lin_std = cfg.d_model ** -0.5
    groups: TensorGroups = {}
    for gid, tensors in tensor_shapes(cfg).items():
        groups[gid] = {}
        for name, shape in tensors.items():
            n = int(np.prod(shape))
            if name.endswith("norm_g"):
                t = np.ones(n, dtype=dtype)
            elif name in EMBED_TENSORS:
                t = (rng.normals(n) * 0.02).astype(dtype)
            else:
                t = (rng.normals(n) * lin_std).astype(dtype)
            groups[gid][name] = t.reshape(shape)
    return ParamSet(groups)


def reinit_head(params: ParamSet, cfg: ModelConfig, seed: int) -> ParamSet:
    """Fresh task head on a pretrained backbone (MLM head is discarded)."""
    out = params.clone()
    dtype = params.dtype
    rng = Rng(seed)
    out.groups[cfg.head_group] = {
        "head_norm_g": np.ones(cfg.d_model, dtype=dtype),
        "w_head": (rng.normals(cfg.n_out * cfg.d_model) * cfg.d_model ** -0.5)
        .astype(dtype).reshape(cfg.n_out, cfg.d_model),
    }
    return out


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exact and overflow-free: sigma(x) = (1 + tanh(x/2)) / 2
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _rmsnorm(x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (g * x / rms(x), inverse rms [..., 1])."""
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS)
    return (x * inv) * g, inv


def _rmsnorm_bwd(dn: np.ndarray, x: np.ndarray, inv: np.ndarray, g: np.ndarray) -> np.ndarray:
    # y = g * x * inv, inv = (mean(x^2)+eps)^-1/2
    # dx = inv*u - x * inv^3/d * (u . x)   with u = dn * g
    d = x.shape[-1]
    u = dn * g
    dot = np.sum(u * x, axis=-1, keepdims=True)
    return inv * u - x * (inv ** 3 / d) * dot


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _block_forward(cfg: ModelConfig, p: dict[str, np.ndarray], x: np.ndarray,
                   cache: dict | None) -> np.ndarray:
    h = cfg.n_heads
    scale = 1.0 / math.sqrt(cfg.head_dim)

    n1, inv1 = _rmsnorm(x, p["attn_norm_g"])
    qh = _split_heads(n1 @ p["wq"].T, h)
    kh = _split_heads(n1 @ p["wk"].T, h)
    vh = _split_heads(n1 @ p["wv"].T, h)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    am = _merge_heads(attn @ vh)
    x2 = x + am @ p["wo"].T

    n2, inv2 = _rmsnorm(x2, p["ffn_norm_g"])
    ga = n2 @ p["w_gate"].T
    up = n2 @ p["w_up"].T
    sg = _sigmoid(ga)
    f = (ga * sg) * up  # SwiGLU: silu(gate) * up
    x3 = x2 + f @ p["w_down"].T

    if cache is not None:
        cache.update(x=x, inv1=inv1, n1=n1, qh=qh, kh=kh, vh=vh, attn=attn,
                     am=am, x2=x2, inv2=inv2, n2=n2, ga=ga, sg=sg, up=up, f=f)
    return x3


def _validate_tokens(cfg: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.ndim != 2 or tokens.size == 0:
        raise InputError(f"tokens must be a nonempty [batch, seq] array, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")


def _backbone_forward(cfg: ModelConfig, params: ParamSet, tokens: np.ndarray,
                      caches: list[dict] | None, cache_from: int,
                      ) -> tuple[np.ndarray, np.ndarray, dict | None]:
    """Embeddings + blocks + final norm. Returns (nf, invf-aux via cache, head cache)."""
    g = params.groups
    t = tokens.shape[1]
    x = g[0]["tok_emb"][tokens] + g[0]["pos_emb"][:t]
    for b in range(1, cfg.n_blocks + 1):
        cache = None
        if caches is not None and b >= cache_from:
            cache = {}
            caches[b - 1] = cache
        x = _block_forward(cfg, g[b], x, cache)
    nf, invf = _rmsnorm(x, g[cfg.head_group]["head_norm_g"])
    head_cache = {"x": x, "invf": invf, "nf": nf} if caches is not None else None
    return nf, invf, head_cache


def _head_logits(cfg: ModelConfig, params: ParamSet, nf: np.ndarray,
                 head_cache: dict | None) -> np.ndarray:
    w = params.groups[cfg.head_group]["w_head"]
    if cfg.task == "multilabel":
        pooled = nf.mean(axis=1)
        if head_cache is not None:
            head_cache["pooled"] = pooled
        return pooled @ w.T
    return nf @ w.T


def forward(cfg: ModelConfig, params: ParamSet, batch: Batch) -> np.ndarray:
    """Logits: tagging/mlm -> [B, T, n_out], multilabel -> [B, K]. Pure."""
    tokens = np.asarray(batch.tokens)
    _validate_tokens(cfg, tokens)
    nf, _, _ = _backbone_forward(cfg, params, tokens, None, 0)
    return _head_logits(cfg, params, nf, None)


# ---------------------------------------------------------------------------
# loss and backward
# ---------------------------------------------------------------------------


def _loss_and_dlogits(cfg: ModelConfig, logits: np.ndarray, batch: Batch,
                      per_example: bool) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient w.r.t. logits.

    The gradient is normalized per example; batch mode divides by B so
    that the batch gradient is the mean of the per-example ones.
    """
    b = batch.size
    if cfg.task == "multilabel":
        if batch.labels is None:
            raise InputError("multilabel batch requires labels")
        y = np.asarray(batch.labels, dtype=logits.dtype)
        z = logits
        # elementwise stable BCE: max(z,0) - z*y + log(1+exp(-|z|))
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        loss = float(per.mean())
        dlogits = (_sigmoid(z) - y) / cfg.n_out
    else:
        if cfg.task == "tagging":
            if batch.tags is None:
                raise InputError("tagging batch requires tags")
            targets = np.asarray(batch.tags)
            valid = np.ones(targets.shape, dtype=bool)
        else:
            if batch.mlm_targets is None:
                raise InputError("mlm batch requires mlm_targets")
            targets = np.asarray(batch.mlm_targets)
            valid = targets >= 0
        floor = -1 if cfg.task == "mlm" else 0
        if targets.min() < floor or targets.max() >= cfg.n_out:
            raise InputError(f"target id out of range [0, {cfg.n_out})")
        m = logits.max(axis=-1, keepdims=True)
        z = logits - m
        lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
        p = np.exp(z - lse)
        safe = np.where(valid, targets, 0)
        nll = (lse[..., 0] - np.take_along_axis(z, safe[..., None], axis=-1)[..., 0])
        n_valid = valid.sum(axis=1)  # per example
        denom = np.maximum(n_valid, 1).astype(logits.dtype)
        loss = float(((nll * valid).sum(axis=1) / denom).mean())
        dlogits = p.copy()
        np.put_along_axis(dlogits, safe[..., None],
                          np.take_along_axis(dlogits, safe[..., None], axis=-1) - 1.0,
                          axis=-1)
        dlogits *= (valid / denom[:, None])[..., None]
    if not per_example:
        dlogits = dlogits / b
    return loss, dlogits.astype(logits.dtype, copy=False)


def _wgrad(go: np.ndarray, x: np.ndarray, per_example: bool) -> np.ndarray:
    """Weight gradient of out = x @ W.T: [o, i], or [B, o, i] per example."""
    if per_example:
        return np.matmul(go.transpose(0, 2, 1), x)
    return np.tensordot(go, x, axes=([0, 1], [0, 1]))


def _ggrad(dn: np.ndarray, xhat: np.ndarray, per_example: bool) -> np.ndarray:
    """Norm gain gradient: sum of dn * xhat over positions (and batch)."""
    prod = dn * xhat
    return prod.sum(axis=1) if per_example else prod.sum(axis=(0, 1))


def _block_backward(cfg: ModelConfig, p: dict[str, np.ndarray], c: dict,
                    dx3: np.ndarray, per_example: bool, need_dx: bool,
                    ) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    h = cfg.n_heads
    scale = 1.0 / math.sqrt(cfg.head_dim)
    g: dict[str, np.ndarray] = {}

    # FFN: x3 = x2 + (silu(ga) * up) @ Wd.T
    g["w_down"] = _wgrad(dx3, c["f"], per_example)
    df = dx3 @ p["w_down"]
    silu = c["ga"] * c["sg"]
    ds = df * c["up"]
    dup = df * silu
    # d silu(a)/da = sg * (1 + a * (1 - sg))
    dga = ds * (c["sg"] * (1.0 + c["ga"] * (1.0 - c["sg"])))
    g["w_gate"] = _wgrad(dga, c["n2"], per_example)
    g["w_up"] = _wgrad(dup, c["n2"], per_example)
    dn2 = dga @ p["w_gate"] + dup @ p["w_up"]
    xhat2 = c["x2"] * c["inv2"]
    g["ffn_norm_g"] = _ggrad(dn2, xhat2, per_example)
    dx2 = dx3 + _rmsnorm_bwd(dn2, c["x2"], c["inv2"], p["ffn_norm_g"])

    # attention: x2 = x + merge(P @ vh) @ Wo.T
    g["wo"] = _wgrad(dx2, c["am"], per_example)
    dam = dx2 @ p["wo"]
    dctx = _split_heads(dam, h)
    attn = c["attn"]
    dattn = dctx @ c["vh"].transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx
    # softmax backward, then fold in the 1/sqrt(dh) score scale
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dscores *= scale
    dqh = dscores @ c["kh"]
    dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
    g["wq"] = _wgrad(dq, c["n1"], per_example)
    g["wk"] = _wgrad(dk, c["n1"], per_example)
    g["wv"] = _wgrad(dv, c["n1"], per_example)
    dn1 = dq @ p["wq"] + dk @ p["wk"] + dv @ p["wv"]
    xhat1 = c["x"] * c["inv1"]
    g["attn_norm_g"] = _ggrad(dn1, xhat1, per_example)
    dx = None
    if need_dx:
        dx = dx2 + _rmsnorm_bwd(dn1, c["x"], c["inv1"], p["attn_norm_g"])
    return g, dx


def loss_and_grads(cfg: ModelConfig, params: ParamSet, partition: LayerPartition,
                   batch: Batch, per_example: bool = False,
                   ) -> tuple[float, GradSet | list[GradSet]]:
    """Mean task loss and gradients for the trainable groups only.

    The backward pass terminates below the lowest trainable block. With
    per_example=True the result is one GradSet per example whose mean is
    the batch gradient (used for DP clipping).
    """
    if partition.n_groups != cfg.n_groups:
        raise ConfigError("partition does not match model config")
    tokens = np.asarray(batch.tokens)
    _validate_tokens(cfg, tokens)
    if batch.size == 0:
        raise InputError("empty batch")

    lowest = partition.lowest_trainable()
    # cache blocks >= lowest trainable block (head/embedding-only: none)
    cache_from = lowest if lowest >= 1 else 1
    if lowest == cfg.head_group:
        cache_from = cfg.head_group  # no block caches needed
    caches: list[dict | None] = [None] * cfg.n_blocks
    nf, invf, head_cache = _backbone_forward(cfg, params, tokens, caches, cache_from)
    logits = _head_logits(cfg, params, nf, head_cache)
    loss, dlogits = _loss_and_dlogits(cfg, logits, batch, per_example)

    grads: dict[int, dict[str, np.ndarray]] = {gid: {} for gid in sorted(partition.trainable)}
    hg = cfg.head_group
    w_head = params.groups[hg]["w_head"]

    # head backward
    if cfg.task == "multilabel":
        pooled = head_cache["pooled"]
        if per_example:
            grads[hg]["w_head"] = dlogits[:, :, None] * pooled[:, None, :]
        else:
            grads[hg]["w_head"] = dlogits.T @ pooled
        dpooled = dlogits @ w_head
        t = tokens.shape[1]
        dnf = np.repeat(dpooled[:, None, :], t, axis=1) / t
    else:
        grads[hg]["w_head"] = _wgrad(dlogits, nf, per_example)
        dnf = dlogits @ w_head
    x_last = head_cache["x"]
    xhatf = x_last * invf
    grads[hg]["head_norm_g"] = _ggrad(dnf, xhatf, per_example)

    if lowest <= cfg.n_blocks:
        gain = params.groups[hg]["head_norm_g"]
        dx = _rmsnorm_bwd(dnf, x_last, invf, gain)
        for b in range(cfg.n_blocks, max(lowest, 1) - 1, -1):
            need_dx = b > lowest or 0 in partition.trainable
            bg, dx = _block_backward(cfg, params.groups[b], caches[b - 1],
                                     dx, per_example, need_dx)
            grads[b] = bg
        if 0 in partition.trainable:
            grads[0] = _embedding_grads(cfg, params, tokens, dx, per_example)

    if per_example:
        return loss, [_slice_gradset(grads, i) for i in range(batch.size)]
    return loss, grads


def _embedding_grads(cfg: ModelConfig, params: ParamSet, tokens: np.ndarray,
                     dx: np.ndarray, per_example: bool) -> dict[str, np.ndarray]:
    b, t = tokens.shape
    d = cfg.d_model
    dtype = dx.dtype
    if per_example:
        dtok = np.zeros((b, cfg.vocab_size, d), dtype=dtype)
        rows = np.repeat(np.arange(b), t)
        np.add.at(dtok, (rows, tokens.ravel()), dx.reshape(-1, d))
        dpos = np.zeros((b, cfg.max_seq_len, d), dtype=dtype)
        dpos[:, :t] = dx
    else:
        dtok = np.zeros((cfg.vocab_size, d), dtype=dtype)
        np.add.at(dtok, tokens.ravel(), dx.reshape(-1, d))
        dpos = np.zeros((cfg.max_seq_len, d), dtype=dtype)
        dpos[:t] = dx.sum(axis=0)
    return {"tok_emb": dtok, "pos_emb": dpos}


def _slice_gradset(grads: TensorGroups, i: int) -> GradSet:
    return {gid: {n: t[i] for n, t in g.items()} for gid, g in grads.items()}


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _loss_value(cfg: ModelConfig, params: ParamSet, batch: Batch) -> float:
    logits = forward(cfg, params, batch)
    loss, _ = _loss_and_dlogits(cfg, logits, batch, per_example=False)
    return loss


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_tensor: str
    per_tensor: dict[str, float] = field(default_factory=dict)
    passed: bool = False


def grad_check(cfg: ModelConfig, partition: LayerPartition, batch: Batch,
               tol: float = 1e-4, seed: int = 0, coords_per_tensor: int = 20,
               step: float = 1e-5) -> GradCheckReport:
    """Analytic vs central finite-difference gradients on random f64 params.

    Checks >= coords_per_tensor random coordinates per trainable tensor
    (all of them for small tensors). Relative error uses an absolute floor
    of 1e-6 so finite-difference noise on near-zero coordinates does not
    dominate.
    """
    params = init_params(cfg, seed, dtype=np.float64)
    _, grads = loss_and_grads(cfg, params, partition, batch)
    rng = Rng(Rng(seed).next_u64() ^ 0x67726164)  # decouple from init draws
    per_tensor: dict[str, float] = {}
    worst, worst_name = 0.0, ""
    for gid in sorted(partition.trainable):
        for name, tensor in params.groups[gid].items():
            flat = tensor.reshape(-1)
            n = flat.shape[0]
            coords = (range(n) if n <= coords_per_tensor
                      else sorted(rng.sample_indices(n, coords_per_tensor)))
            g_flat = grads[gid][name].reshape(-1)
            t_err = 0.0
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                lo_hi = _loss_value(cfg, params, batch)
                flat[c] = orig - step
                lo_lo = _loss_value(cfg, params, batch)
                flat[c] = orig
                fd = (lo_hi - lo_lo) / (2 * step)
                a = g_flat[c]
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                t_err = max(t_err, err)
            label = f"{gid}/{name}"
            per_tensor[label] = t_err
            if t_err > worst:
                worst, worst_name = t_err, label
    return GradCheckReport(max_rel_err=worst, worst_tensor=worst_name,
                           per_tensor=per_tensor, passed=worst < tol)
