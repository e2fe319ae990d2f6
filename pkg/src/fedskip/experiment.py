"""Config-driven experiment assembly shared by the CLI and the test suite.

Dataset generation, backbone preparation (MLM pretraining + task head) and
the four run modes, all keyed off one master seed via the documented
derive_seed roles."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedskip.data import (ClientDataset, GrammarConfig, gen_corpus, gen_multilabel,
                          gen_tagging, make_client_dataset, partition_clients,
                          read_dataset, write_dataset)
from fedskip.errors import ConfigError, DataError
from fedskip.expconfig import ExperimentConfig
from fedskip.fed import ClientUpdate
from fedskip.model import ModelConfig, ParamSet, reinit_head
from fedskip.optim import TrainConfig
from fedskip.orchestrator import (FederationConfig, History, run_centralized,
                                  run_federation, run_local_only, run_pretraining)
from fedskip.rng import derive_seed
from fedskip.wire import decode_update, encode_update

MODES = ("layer_skip", "fedavg_full", "centralized", "local_only")

# data-role seed indices
_CORPUS, _TRAIN, _TEST, _PARTITION = 0, 1, 2, 3


@dataclass
class Datasets:
    corpus: np.ndarray
    train: list
    test: list
    clients: list[ClientDataset]


def generate_datasets(xc: ExperimentConfig) -> Datasets:
    g = xc.grammar()
    master = xc["seed"]
    task = xc["task.kind"]
    gen = gen_tagging if task == "tagging" else gen_multilabel
    if task not in ("tagging", "multilabel"):
        raise ConfigError(f"task.kind must be tagging or multilabel, got {task!r}")
    corpus = gen_corpus(derive_seed(master, "data", _CORPUS), xc["data.pretrain_seqs"], g)
    train = gen(derive_seed(master, "data", _TRAIN), xc["data.train_examples"], g)
    test = gen(derive_seed(master, "data", _TEST), xc["data.test_examples"], g)
    clients = partition_clients(train, xc["data.clients"], xc["data.alpha"],
                                derive_seed(master, "data", _PARTITION), g)
    return Datasets(corpus=corpus, train=train, test=test, clients=clients)


def save_datasets(xc: ExperimentConfig, ds: Datasets, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    task = xc["task.kind"]
    k = xc["grammar.types"]
    write_dataset(out_dir / "corpus.bin", list(ds.corpus), "corpus")
    write_dataset(out_dir / "train.bin", ds.train, task, k)
    write_dataset(out_dir / "test.bin", ds.test, task, k)
    for c in ds.clients:
        write_dataset(out_dir / f"client_{c.client_id:03d}.bin", c.examples, task, k)
    manifest = {
        "seed": xc["seed"],
        "task": task,
        "grammar_hash": xc.grammar().grammar_hash(),
        "counts": {
            "corpus": int(ds.corpus.shape[0]),
            "train": len(ds.train),
            "test": len(ds.test),
            "clients": [len(c) for c in ds.clients],
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir / "manifest.json"


def load_datasets(xc: ExperimentConfig, out_dir: Path) -> Datasets:
    g = xc.grammar()
    needed = [out_dir / "corpus.bin", out_dir / "train.bin", out_dir / "test.bin"]
    for p in needed:
        if not p.exists():
            raise DataError(f"missing dataset file {p}; run `fedskip gen` first")
    _, corpus, _ = read_dataset(out_dir / "corpus.bin")
    _, train, _ = read_dataset(out_dir / "train.bin")
    _, test, _ = read_dataset(out_dir / "test.bin")
    clients = []
    for i in range(xc["data.clients"]):
        p = out_dir / f"client_{i:03d}.bin"
        if not p.exists():
            raise DataError(f"missing dataset file {p}; run `fedskip gen` first")
        _, examples, _ = read_dataset(p)
        clients.append(make_client_dataset(i, examples, g))
    return Datasets(corpus=corpus, train=train, test=test, clients=clients)


def prepare_backbone(xc: ExperimentConfig, corpus: np.ndarray,
                     cache_path: Path | None = None) -> ParamSet:
    """Pretrained backbone with a fresh task head; cached as a wire frame."""
    task_cfg = xc.model_config()
    master = xc["seed"]
    if cache_path is not None and cache_path.exists():
        return load_params(cache_path, task_cfg)
    mlm_cfg = xc.model_config(task="mlm")
    pre_tc = TrainConfig(lr=xc["pretrain.lr"], batch_size=xc["pretrain.batch_size"],
                         local_epochs=1)
    backbone = run_pretraining(mlm_cfg, corpus, xc["pretrain.steps"],
                               derive_seed(master, "init", 0), pre_tc,
                               mask_rate=xc["pretrain.mask_rate"])
    withhead = reinit_head(backbone, task_cfg, derive_seed(master, "init", 1))
    if cache_path is not None:
        save_params(withhead, cache_path)
    return withhead


def save_params(params: ParamSet, path: Path) -> None:
    """Parameters travel as a full-model wire frame (round 0, weight 1)."""
    frame = encode_update(ClientUpdate(round_idx=0, client_id=0, weight=1,
                                       params=params.groups))
    path.write_bytes(frame)


def load_params(path: Path, cfg: ModelConfig) -> ParamSet:
    update = decode_update(path.read_bytes())
    if sorted(update.params) != list(range(cfg.n_groups)):
        raise DataError(f"{path}: cached parameters do not match the model config")
    return ParamSet(update.params)


def federation_config(xc: ExperimentConfig, mode: str) -> FederationConfig:
    if mode == "fedavg_full":
        strategy, k = "all", 0
    else:
        strategy, k = "top_k", xc["fed.top_k"]
    return FederationConfig(
        cfg=xc.model_config(), strategy=strategy, top_k=k,
        n_clients=xc["data.clients"], rounds=xc["fed.rounds"],
        client_fraction=xc["fed.client_fraction"], train=xc.train_config(),
        dp=xc.dp_config(), secure_agg=xc["fed.secure_agg"],
        secagg_scale=float(2 ** xc["fed.scale_bits"]),
        eval_every=xc["fed.eval_every"], master_seed=xc["seed"],
        max_workers=xc["fed.workers"])


def run_mode(xc: ExperimentConfig, ds: Datasets, backbone: ParamSet,
             mode: str | None = None) -> History | list[History]:
    mode = mode or xc["fed.mode"]
    if mode not in MODES:
        raise ConfigError(f"fed.mode must be one of {MODES}, got {mode!r}")
    cfg = xc.model_config()
    if mode in ("layer_skip", "fedavg_full"):
        return run_federation(federation_config(xc, mode), backbone, ds.clients, ds.test)
    tc = xc.train_config()
    if mode == "centralized":
        return run_centralized(cfg, backbone, ds.train, ds.test, tc,
                               rounds=xc["fed.rounds"], eval_every=xc["fed.eval_every"],
                               master_seed=xc["seed"])
    return run_local_only(cfg, backbone, ds.clients, ds.test, tc,
                          rounds=xc["fed.rounds"], eval_every=xc["fed.eval_every"],
                          master_seed=xc["seed"])
