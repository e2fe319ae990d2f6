"""Flat key=value experiment configuration.

Files are UTF-8 text, one `key = value` per line, `#` comments. Keys are
namespaced (fed.rounds, dp.epsilon, model.n_blocks). Unknown keys are
fatal; missing keys take the documented defaults below. The resolved
configuration (defaults included) can be echoed back in canonical form."""

from __future__ import annotations

from dataclasses import dataclass, field

from fedskip.dp import DPConfig, calibrate_sigma
from fedskip.errors import ConfigError
from fedskip.model import ModelConfig
from fedskip.data import GrammarConfig
from fedskip.optim import TrainConfig

_UNSET = object()

# key -> (type tag, default, help)
DEFAULTS: dict[str, tuple[str, object, str]] = {
    "seed": ("int", 1234, "master seed for every derived stream"),
    "out.dir": ("str", "runs/exp", "output directory"),
    "task.kind": ("str", "tagging", "tagging | multilabel"),

    "model.vocab_size": ("int", 64, "token vocabulary size"),
    "model.d_model": ("int", 32, "residual width"),
    "model.n_heads": ("int", 4, "attention heads"),
    "model.n_blocks": ("int", 4, "transformer blocks (L)"),
    "model.d_ff": ("int", 64, "SwiGLU hidden width"),
    "model.max_seq_len": ("int", 32, "positional table size"),

    "grammar.types": ("int", 3, "entity types / labels (K)"),
    "grammar.lexicon_size": ("int", 8, "tokens per entity lexicon"),
    "grammar.entity_rate": ("float", 0.3, "span start probability"),
    "grammar.span_mean": ("float", 2.0, "mean geometric span length"),
    "grammar.seq_len": ("int", 16, "sequence length"),

    "data.train_examples": ("int", 400, "pooled training examples"),
    "data.test_examples": ("int", 200, "held-out test examples"),
    "data.pretrain_seqs": ("int", 600, "pretraining corpus sequences"),
    "data.clients": ("int", 10, "number of clients (N)"),
    "data.alpha": ("float", 0.5, "Dirichlet concentration for non-IID split"),

    "pretrain.steps": ("int", 2000, "MLM optimizer steps (0 = random init)"),
    "pretrain.lr": ("float", 1e-2, "pretraining learning rate"),
    "pretrain.batch_size": ("int", 32, "pretraining batch size"),
    "pretrain.mask_rate": ("float", 0.3, "MLM masking rate"),

    "fed.mode": ("str", "layer_skip", "layer_skip | fedavg_full | centralized | local_only"),
    "fed.top_k": ("int", 1, "trainable top blocks for layer_skip"),
    "fed.rounds": ("int", 100, "communication rounds (R)"),
    "fed.client_fraction": ("float", 1.0, "cohort fraction per round"),
    "fed.secure_agg": ("bool", True, "mask updates with pairwise streams"),
    "fed.scale_bits": ("int", 20, "fixed-point quantization bits (S = 2^bits)"),
    "fed.eval_every": ("int", 1, "evaluation cadence in rounds"),
    "fed.workers": ("int", 0, "client threads (0 = sequential)"),

    "train.lr": ("float", 3e-4, "client learning rate"),
    "train.epochs": ("int", 3, "local epochs per round (E)"),
    "train.batch_size": ("int", 8, "client mini-batch size"),
    "train.beta1": ("float", 0.9, "AdamW beta1"),
    "train.beta2": ("float", 0.999, "AdamW beta2"),
    "train.eps": ("float", 1e-8, "AdamW epsilon"),
    "train.weight_decay": ("float", 0.01, "decoupled weight decay"),
    "train.head_aggregation": ("bool", True, "aggregate heads (off = client-local heads)"),

    "dp.enabled": ("bool", False, "DP-SGD on client updates"),
    "dp.clip_norm": ("float", 1.0, "per-example clip norm C"),
    "dp.sigma": ("float", _UNSET, "noise multiplier (exclusive with dp.epsilon)"),
    "dp.epsilon": ("float", _UNSET, "target epsilon; calibrates sigma"),
    "dp.delta": ("float", 1e-5, "DP delta"),

    "ablate.k_list": ("str", "1,2,4", "comma-separated top_k values"),
    "ablate.include_all": ("bool", True, "add a strategy=all row"),
}


def _parse_value(key: str, raw: str):
    kind = DEFAULTS[key][0]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None


@dataclass
class ExperimentConfig:
    values: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        v = self.values[key]
        if v is _UNSET:
            return None
        return v

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    # -- builders for the module-level configs ------------------------------

    def model_config(self, task: str | None = None) -> ModelConfig:
        return ModelConfig(
            vocab_size=self["model.vocab_size"], d_model=self["model.d_model"],
            n_heads=self["model.n_heads"], n_blocks=self["model.n_blocks"],
            d_ff=self["model.d_ff"], max_seq_len=self["model.max_seq_len"],
            task=task or self["task.kind"], n_types=self["grammar.types"])

    def grammar(self) -> GrammarConfig:
        return GrammarConfig(
            vocab_size=self["model.vocab_size"], n_types=self["grammar.types"],
            lexicon_size=self["grammar.lexicon_size"],
            entity_rate=self["grammar.entity_rate"],
            span_mean=self["grammar.span_mean"], seq_len=self["grammar.seq_len"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self["train.lr"], local_epochs=self["train.epochs"],
            batch_size=self["train.batch_size"], beta1=self["train.beta1"],
            beta2=self["train.beta2"], eps=self["train.eps"],
            weight_decay=self["train.weight_decay"],
            head_aggregation=self["train.head_aggregation"])

    def dp_config(self) -> DPConfig:
        sigma, epsilon = self["dp.sigma"], self["dp.epsilon"]
        if sigma is not None and epsilon is not None:
            raise ConfigError("dp.sigma and dp.epsilon are mutually exclusive")
        if self["dp.enabled"]:
            if sigma is None and epsilon is None:
                raise ConfigError("dp.enabled requires dp.sigma or dp.epsilon")
            if epsilon is not None:
                sigma = calibrate_sigma(epsilon, self["dp.delta"], self["fed.rounds"])
        return DPConfig(enabled=self["dp.enabled"], clip_norm=self["dp.clip_norm"],
                        noise_multiplier=sigma or 0.0, delta=self["dp.delta"],
                        target_epsilon=epsilon,
                        rounds_for_accounting=self["fed.rounds"])

    def ablate_k_list(self) -> list[int]:
        try:
            ks = [int(x) for x in str(self["ablate.k_list"]).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"bad ablate.k_list {self['ablate.k_list']!r}") from None
        if not ks:
            raise ConfigError("ablate.k_list is empty")
        return ks

    def echo(self) -> str:
        """Canonical resolved configuration, defaults included."""
        lines = [f"# resolved configuration ({len(self.values)} keys)"]
        for key in sorted(self.values):
            v = self.values[key]
            lines.append(f"{key} = {'' if v is _UNSET else v}")
        return "\n".join(lines) + "\n"


# Keys a config file must state explicitly; everything else defaults.
REQUIRED_KEYS = ("seed", "model.n_blocks", "fed.rounds")


def parse_config_text(text: str, require: tuple[str, ...] = ()) -> ExperimentConfig:
    values = {k: d for k, (_, d, _) in DEFAULTS.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
        seen.add(key)
    for key in require:
        if key not in seen:
            raise ConfigError(f"missing required key {key!r}")
    return ExperimentConfig(values=values)


def load_config(path, require: tuple[str, ...] = REQUIRED_KEYS) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, require)
