"""Experiment engine: MLM pretraining, the federated round loop, the
centralized and local-only baselines, and metric histories.

Seeding scheme (all streams derive from one master seed):
  role "init":   index 0 backbone init, index 1 task head init
  role "data":   dataset generation (0 corpus, 1 train, 2 test, 3 partition)
  role "client": index pack(round, client) for local training; the round's
                 cohort sampling uses the reserved client id 0xFFFFFFFF
  role "mask":   index pack(round, i, j) for pairwise secure-agg seeds
  role "dp":     split off inside local_update from its client seed
Client updates within a round are pure functions of (global model, data,
derived seed), so parallel and sequential schedules give identical runs."""

from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedskip.data import ClientDataset, make_batch
from fedskip.dp import DPConfig
from fedskip.errors import ConfigError, InputError, ProtocolError
from fedskip.fed import ClientUpdate, aggregate, apply_update, local_update
from fedskip.metrics import Metrics, evaluate
from fedskip.model import (Batch, ModelConfig, ParamSet, TensorGroups, _loss_and_dlogits,
                           forward, init_params, loss_and_grads)
from fedskip.optim import OptimizerState, TrainConfig, adamw_step
from fedskip.partition import LayerPartition, make_partition
from fedskip.rng import Rng, derive_seed, pack_round_client, pack_round_pair, splitmix64
from fedskip.secagg import DEFAULT_SCALE, mask_update, secure_aggregate
from fedskip.wire import comm_fraction, encode_update, frame_bytes

_SAMPLER_ID = 0xFFFFFFFF  # reserved client index for cohort sampling streams


@dataclass
class FederationConfig:
    cfg: ModelConfig
    strategy: str = "top_k"
    top_k: int = 1
    n_clients: int = 10
    rounds: int = 100
    client_fraction: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    dp: DPConfig = field(default_factory=DPConfig)
    secure_agg: bool = False
    secagg_scale: float = DEFAULT_SCALE
    eval_every: int = 1
    eval_batch_size: int = 64
    master_seed: int = 0
    max_workers: int = 0  # 0 = sequential client execution

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError(f"client_fraction must lie in (0, 1], got {self.client_fraction}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class RoundMetrics:
    round_idx: int
    micro_f1: float | None
    macro_f1: float | None
    auc: float | None
    loss: float
    uplink_bytes: int
    downlink_bytes: int
    comm_fraction: float


@dataclass
class History:
    rows: list[RoundMetrics]
    final_params: ParamSet
    partition: LayerPartition
    initial_downlink_bytes: int = 0
    frozen_checksums: list[str] = field(default_factory=list)
    client_heads: dict[int, TensorGroups] | None = None

    def metric_values(self, name: str = "micro_f1") -> list[float]:
        vals = [getattr(r, name) for r in self.rows]
        if any(v is None for v in vals):
            raise InputError(f"metric {name} undefined in some rounds")
        return vals

    def final(self, name: str = "micro_f1") -> float:
        return self.metric_values(name)[-1]


def checksum_groups(groups: TensorGroups, gids) -> str:
    h = hashlib.blake2b(digest_size=16)
    for gid in sorted(gids):
        for name in sorted(groups[gid]):
            h.update(groups[gid][name].tobytes())
    return h.hexdigest()


def evaluate_model(cfg: ModelConfig, params: ParamSet, test_examples: list,
                   batch_size: int = 64) -> tuple[Metrics, float]:
    """Pooled test metrics plus mean loss."""
    if not test_examples:
        raise InputError("empty test set")
    preds, golds = [], []
    loss_sum = 0.0
    for start in range(0, len(test_examples), batch_size):
        batch = make_batch(cfg, test_examples[start:start + batch_size])
        logits = forward(cfg, params, batch)
        loss, _ = _loss_and_dlogits(cfg, logits, batch, per_example=False)
        loss_sum += loss * batch.size
        if cfg.task == "tagging":
            preds.append(np.argmax(logits, axis=-1))
            golds.append(batch.tags)
        else:
            preds.append(0.5 * (1.0 + np.tanh(0.5 * logits)))  # sigmoid scores
            golds.append(batch.labels)
    m = evaluate(np.concatenate(preds), np.concatenate(golds), cfg.task, cfg.n_types)
    return m, loss_sum / len(test_examples)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def run_pretraining(cfg: ModelConfig, corpus: np.ndarray, steps: int, seed: int,
                    tc: TrainConfig | None = None, mask_rate: float = 0.15,
                    cosine_decay: bool = True) -> ParamSet:
    """Centralized masked-token training of the full model.

    Selected positions follow the usual 80/10/10 recipe (mask token /
    random token / unchanged), which forces the network to carry token
    identity through every layer; that is what later makes frozen lower
    layers useful to a partially-trained model. Returns init_params(cfg,
    seed) trained for `steps` optimizer steps with an optional cosine
    learning-rate decay; batch order and mask choices draw from
    Rng(splitmix64(seed)). The MLM head stays attached; callers
    re-initialize the head group for the downstream task (reinit_head)."""
    if cfg.task != "mlm":
        raise ConfigError("pretraining requires an mlm-task config")
    if corpus.size == 0:
        raise InputError("empty pretraining corpus")
    params = init_params(cfg, seed)
    if steps == 0:
        return params
    tc = tc or TrainConfig(lr=1e-3, batch_size=16)
    partition = make_partition(cfg, "all")
    work = params.clone()
    trainables = {gid: work.groups[gid] for gid in sorted(partition.trainable)}
    opt = OptimizerState.for_params(trainables)
    rng = Rng(splitmix64(seed))
    n, t = corpus.shape
    order: list[int] = []
    base = dict(lr=tc.lr, local_epochs=tc.local_epochs, batch_size=tc.batch_size,
                beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps,
                weight_decay=tc.weight_decay, head_aggregation=tc.head_aggregation)
    for done in range(steps):
        if not order:
            order = list(range(n))
            rng.shuffle(order)
        take, order = order[:tc.batch_size], order[tc.batch_size:]
        tokens = corpus[take].copy()
        targets = np.full_like(tokens, -1)
        for row in range(tokens.shape[0]):
            picked = [i for i in range(t) if float(rng.uniform(1)[0]) < mask_rate]
            if not picked:
                picked = [rng.randint(t)]
            for i in picked:
                targets[row, i] = tokens[row, i]
                u = float(rng.uniform(1)[0])
                if u < 0.8:
                    tokens[row, i] = 0  # mask token
                elif u < 0.9:
                    tokens[row, i] = rng.randint(cfg.vocab_size)
        batch = Batch(tokens=tokens, mlm_targets=targets)
        _, grads = loss_and_grads(cfg, work, partition, batch)
        step_tc = tc
        if cosine_decay:
            lr_t = tc.lr * 0.5 * (1.0 + math.cos(math.pi * done / steps))
            step_tc = TrainConfig(**{**base, "lr": max(lr_t, 1e-12)})
        adamw_step(opt, trainables, grads, step_tc)
    return work


# ---------------------------------------------------------------------------
# federated round loop
# ---------------------------------------------------------------------------


def _sample_cohort(fc: FederationConfig, round_idx: int) -> list[int]:
    m = math.ceil(fc.client_fraction * fc.n_clients)
    if m >= fc.n_clients:
        return list(range(fc.n_clients))
    rng = Rng(derive_seed(fc.master_seed, "client",
                          pack_round_client(round_idx, _SAMPLER_ID)))
    return rng.sample_indices(fc.n_clients, m)


def run_federation(fc: FederationConfig, backbone: ParamSet,
                   clients: list[ClientDataset], test_examples: list) -> History:
    """The round loop: sample cohort, local updates, (secure) aggregation,
    frozen merge, pooled evaluation, byte accounting."""
    if not clients:
        raise InputError("run_federation requires at least one client")
    if len(clients) != fc.n_clients:
        raise ConfigError(f"expected {fc.n_clients} client datasets, got {len(clients)}")
    cfg = fc.cfg
    partition = make_partition(cfg, fc.strategy, fc.top_k)
    global_ps = backbone
    frozen_ref = checksum_groups(global_ps.groups, partition.frozen) if partition.frozen else ""
    frac = comm_fraction(partition, cfg, include_head=True)
    full_frame = frame_bytes(cfg, range(cfg.n_groups), dtype=global_ps.dtype)
    head_gid = cfg.head_group
    head_agg = fc.train.head_aggregation
    client_heads: dict[int, TensorGroups] = {}

    rows: list[RoundMetrics] = []
    checksums: list[str] = []
    for r in range(1, fc.rounds + 1):
        cohort = _sample_cohort(fc, r)

        def _one(i: int) -> ClientUpdate:
            gp = global_ps
            if not head_agg and i in client_heads:
                groups = dict(global_ps.groups)
                groups[head_gid] = client_heads[i]
                gp = ParamSet(groups)
            seed = derive_seed(fc.master_seed, "client", pack_round_client(r, i))
            return local_update(cfg, gp, partition, clients[i], fc.train, fc.dp,
                                seed, round_idx=r, client_id=i)

        if fc.max_workers > 1:
            with ThreadPoolExecutor(max_workers=fc.max_workers) as pool:
                updates = list(pool.map(_one, cohort))
        else:
            updates = [_one(i) for i in cohort]

        if not head_agg:
            for u in updates:
                client_heads[u.client_id] = u.local_params[head_gid]

        total_weight = sum(u.weight for u in updates)
        if fc.secure_agg:
            pair_seeds = {(i, j): derive_seed(fc.master_seed, "mask", pack_round_pair(r, i, j))
                          for i in cohort for j in cohort if i < j}
            masked = [mask_update(u, cohort, pair_seeds, fc.secagg_scale) for u in updates]
            uplink = sum(len(encode_update(m)) for m in masked)
            agg = secure_aggregate(masked, total_weight, fc.secagg_scale)
        else:
            uplink = sum(len(encode_update(u)) for u in updates)
            agg = aggregate(updates)

        try:
            global_ps = apply_update(global_ps, agg, partition)
        except ProtocolError as e:
            raise ProtocolError(f"round {r}: {e}") from None
        if partition.frozen:
            chk = checksum_groups(global_ps.groups, partition.frozen)
            if chk != frozen_ref:
                raise ProtocolError(f"round {r}: frozen layers changed")
            checksums.append(chk)
        downlink = len(cohort) * frame_bytes(cfg, sorted(agg), dtype=global_ps.dtype)

        if r % fc.eval_every == 0 or r == fc.rounds:
            if head_agg:
                metrics, loss = evaluate_model(cfg, global_ps, test_examples,
                                               fc.eval_batch_size)
            else:
                metrics, loss = _evaluate_per_client_heads(
                    cfg, global_ps, client_heads, test_examples, fc.eval_batch_size)
            rows.append(RoundMetrics(round_idx=r, micro_f1=metrics.micro_f1,
                                     macro_f1=metrics.macro_f1, auc=metrics.auc,
                                     loss=loss, uplink_bytes=uplink,
                                     downlink_bytes=downlink, comm_fraction=frac))
    return History(rows=rows, final_params=global_ps, partition=partition,
                   initial_downlink_bytes=fc.n_clients * full_frame,
                   frozen_checksums=checksums,
                   client_heads=client_heads if not head_agg else None)


def _evaluate_per_client_heads(cfg, global_ps, client_heads, test_examples, batch_size):
    """FedPer-style eval: score the pooled test set under each client's head
    and average plainly."""
    if not client_heads:
        return evaluate_model(cfg, global_ps, test_examples, batch_size)
    metric_lists: dict[str, list[float]] = {"micro_f1": [], "macro_f1": [], "auc": []}
    losses = []
    for cid in sorted(client_heads):
        groups = dict(global_ps.groups)
        groups[cfg.head_group] = client_heads[cid]
        m, loss = evaluate_model(cfg, ParamSet(groups), test_examples, batch_size)
        losses.append(loss)
        for name in metric_lists:
            v = getattr(m, name)
            if v is not None:
                metric_lists[name].append(v)
    mean = {name: (float(np.mean(vals)) if vals else None)
            for name, vals in metric_lists.items()}
    return Metrics(micro_f1=mean["micro_f1"], macro_f1=mean["macro_f1"],
                   auc=mean["auc"]), float(np.mean(losses))


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def run_centralized(cfg: ModelConfig, backbone: ParamSet, pooled: list,
                    test_examples: list, tc: TrainConfig, rounds: int,
                    eval_every: int = 1, master_seed: int = 0,
                    partition: LayerPartition | None = None,
                    eval_batch_size: int = 64) -> History:
    """Plain mini-batch training on pooled data; no federation machinery.

    A "round" is local_epochs epochs with a fresh optimizer, seeded exactly
    like federated client 0, so a single-client federation must reproduce
    this trajectory."""
    from fedskip.dp import mean_per_example_grads

    if not pooled:
        raise InputError("empty training data")
    partition = partition or make_partition(cfg, "all")
    work = ParamSet({gid: ({n: t.copy() for n, t in g.items()}
                           if gid in partition.trainable else g)
                     for gid, g in backbone.groups.items()})
    rows: list[RoundMetrics] = []
    n = len(pooled)
    frac = comm_fraction(partition, cfg, include_head=True)
    for r in range(1, rounds + 1):
        trainables = {gid: work.groups[gid] for gid in sorted(partition.trainable)}
        opt = OptimizerState.for_params(trainables)
        rng = Rng(derive_seed(master_seed, "client", pack_round_client(r, 0)))
        order = list(range(n))
        for _ in range(tc.local_epochs):
            rng.shuffle(order)
            for start in range(0, n, tc.batch_size):
                batch = make_batch(cfg, [pooled[i] for i in order[start:start + tc.batch_size]])
                _, per_ex = loss_and_grads(cfg, work, partition, batch, per_example=True)
                adamw_step(opt, trainables, mean_per_example_grads(per_ex), tc)
        if r % eval_every == 0 or r == rounds:
            metrics, loss = evaluate_model(cfg, work, test_examples, eval_batch_size)
            rows.append(RoundMetrics(round_idx=r, micro_f1=metrics.micro_f1,
                                     macro_f1=metrics.macro_f1, auc=metrics.auc,
                                     loss=loss, uplink_bytes=0, downlink_bytes=0,
                                     comm_fraction=frac))
    return History(rows=rows, final_params=work, partition=partition)


def run_local_only(cfg: ModelConfig, backbone: ParamSet, clients: list[ClientDataset],
                   test_examples: list, tc: TrainConfig, rounds: int,
                   eval_every: int = 1, master_seed: int = 0,
                   partition: LayerPartition | None = None) -> list[History]:
    """Each client trains alone (no aggregation), evaluated on the pooled
    test set. Client i reuses the federated per-(round, client) seeds."""
    out = []
    for c in clients:
        hist = _train_single(cfg, backbone, c, test_examples, tc, rounds,
                             eval_every, master_seed, partition)
        out.append(hist)
    return out


def _train_single(cfg, backbone, client: ClientDataset, test_examples, tc, rounds,
                  eval_every, master_seed, partition):
    from fedskip.dp import mean_per_example_grads

    partition = partition or make_partition(cfg, "all")
    work = ParamSet({gid: ({n: t.copy() for n, t in g.items()}
                           if gid in partition.trainable else g)
                     for gid, g in backbone.groups.items()})
    rows: list[RoundMetrics] = []
    n = len(client.examples)
    frac = comm_fraction(partition, cfg, include_head=True)
    for r in range(1, rounds + 1):
        trainables = {gid: work.groups[gid] for gid in sorted(partition.trainable)}
        opt = OptimizerState.for_params(trainables)
        rng = Rng(derive_seed(master_seed, "client", pack_round_client(r, client.client_id)))
        order = list(range(n))
        for _ in range(tc.local_epochs):
            rng.shuffle(order)
            for start in range(0, n, tc.batch_size):
                batch = make_batch(cfg, [client.examples[i] for i in order[start:start + tc.batch_size]])
                _, per_ex = loss_and_grads(cfg, work, partition, batch, per_example=True)
                adamw_step(opt, trainables, mean_per_example_grads(per_ex), tc)
        if r % eval_every == 0 or r == rounds:
            metrics, loss = evaluate_model(cfg, work, test_examples)
            rows.append(RoundMetrics(round_idx=r, micro_f1=metrics.micro_f1,
                                     macro_f1=metrics.macro_f1, auc=metrics.auc,
                                     loss=loss, uplink_bytes=0, downlink_bytes=0,
                                     comm_fraction=frac))
    return History(rows=rows, final_params=work, partition=partition)


def mean_final_metric(histories: list[History], name: str = "micro_f1") -> float:
    return float(np.mean([h.final(name) for h in histories]))


# ---------------------------------------------------------------------------
# convergence accounting and CSV export
# ---------------------------------------------------------------------------


def rounds_to_fraction(history: History, frac: float, metric: str = "micro_f1") -> int:
    """Smallest recorded round whose metric reaches frac * (run maximum)."""
    if not history.rows:
        raise InputError("empty history")
    if not 0.0 < frac <= 1.0:
        raise ConfigError(f"frac must lie in (0, 1], got {frac}")
    values = history.metric_values(metric)
    threshold = frac * max(values)
    for row, v in zip(history.rows, values):
        if v >= threshold:
            return row.round_idx
    return history.rows[int(np.argmax(values))].round_idx  # unreachable for frac <= 1


CSV_COLUMNS = ("round", "micro_f1", "macro_f1", "auc", "loss",
               "uplink_bytes", "downlink_bytes", "comm_fraction")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history_csv(history: History, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in history.rows:
            w.writerow([_fmt(v) for v in (r.round_idx, r.micro_f1, r.macro_f1, r.auc,
                                          r.loss, r.uplink_bytes, r.downlink_bytes,
                                          r.comm_fraction)])


def read_history_csv(path) -> list[RoundMetrics]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise InputError(f"unexpected history CSV columns {header}")
        rows = []
        for rec in reader:
            vals = dict(zip(CSV_COLUMNS, rec))
            opt = lambda s: None if s == "" else float(s)
            rows.append(RoundMetrics(
                round_idx=int(vals["round"]), micro_f1=opt(vals["micro_f1"]),
                macro_f1=opt(vals["macro_f1"]), auc=opt(vals["auc"]),
                loss=float(vals["loss"]), uplink_bytes=int(vals["uplink_bytes"]),
                downlink_bytes=int(vals["downlink_bytes"]),
                comm_fraction=float(vals["comm_fraction"])))
    return rows
