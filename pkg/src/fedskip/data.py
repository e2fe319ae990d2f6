"""Synthetic analogues of the clinical tasks, non-IID partitioning, and
dataset file IO.

A grammar splits the vocabulary into K entity lexicons plus filler. Token
sequences are filler with inserted entity spans (geometric length);
BIO tags follow from generation, and multi-label ground truth is exact
lexicon membership, so labels are decodable from tokens."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from fedskip.errors import ConfigError, DataError, InputError
from fedskip.model import Batch, ModelConfig
from fedskip.rng import Rng

MASK_TOKEN = 0  # doubles as the first filler token
_FILE_MAGIC = b"FSKD"
_TASK_CODES = {"corpus": 0, "tagging": 1, "multilabel": 2}
_TASK_NAMES = {v: k for k, v in _TASK_CODES.items()}


@dataclass(frozen=True)
class GrammarConfig:
    vocab_size: int
    n_types: int
    lexicon_size: int
    entity_rate: float = 0.3
    span_mean: float = 2.0
    seq_len: int = 16

    def __post_init__(self):
        if self.n_types < 1 or self.lexicon_size < 1:
            raise ConfigError("n_types and lexicon_size must be >= 1")
        if self.n_types > 64:
            raise ConfigError("at most 64 entity types supported")
        if self.vocab_size < self.n_types * self.lexicon_size + 1:
            raise ConfigError(
                f"vocab_size {self.vocab_size} < K*m+1 = {self.n_types * self.lexicon_size + 1}")
        if not 0.0 < self.entity_rate < 1.0:
            raise ConfigError(f"entity_rate must lie in (0, 1), got {self.entity_rate}")
        if self.span_mean < 1.0:
            raise ConfigError(f"span_mean must be >= 1, got {self.span_mean}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")

    def lexicon_low(self, k: int) -> int:
        """First token id of entity lexicon k (1-based)."""
        return (k - 1) * self.lexicon_size + 1

    @property
    def n_filler(self) -> int:
        return self.vocab_size - self.n_types * self.lexicon_size

    def filler_token(self, idx: int) -> int:
        # filler ids are {0} plus everything above the lexicons
        return 0 if idx == 0 else self.n_types * self.lexicon_size + idx

    def token_type(self, token: int) -> int:
        """Entity type of a token id, 0 for filler."""
        if 1 <= token <= self.n_types * self.lexicon_size:
            return (token - 1) // self.lexicon_size + 1
        return 0

    def grammar_hash(self) -> str:
        from fedskip.wire import fnv1a64
        text = (f"V={self.vocab_size};K={self.n_types};m={self.lexicon_size};"
                f"p={self.entity_rate!r};s={self.span_mean!r};T={self.seq_len}")
        return f"{fnv1a64(text.encode()):016x}"


@dataclass
class TaggingExample:
    tokens: np.ndarray  # [T] int64
    tags: np.ndarray  # [T] int64: O=0, B-k=2k-1, I-k=2k


@dataclass
class MultilabelExample:
    tokens: np.ndarray  # [T] int64
    labels: np.ndarray  # [K] uint8


@dataclass
class ClientDataset:
    client_id: int
    examples: list
    histogram: np.ndarray = field(default=None)  # dominant-type counts, 0..K

    def __len__(self) -> int:
        return len(self.examples)


def _gen_sequence(rng: Rng, g: GrammarConfig) -> tuple[list[int], list[int]]:
    tokens: list[int] = []
    tags: list[int] = []
    p_geo = 1.0 / g.span_mean
    while len(tokens) < g.seq_len:
        if float(rng.uniform(1)[0]) < g.entity_rate:
            k = rng.randint(g.n_types) + 1
            length = min(rng.geometric(p_geo), g.seq_len - len(tokens))
            lo = g.lexicon_low(k)
            for i in range(length):
                tokens.append(lo + rng.randint(g.lexicon_size))
                tags.append(2 * k - 1 if i == 0 else 2 * k)
        else:
            tokens.append(g.filler_token(rng.randint(g.n_filler)))
            tags.append(0)
    return tokens, tags


def gen_corpus(seed: int, n_seqs: int, grammar: GrammarConfig) -> np.ndarray:
    """Unlabeled sequences for pretraining: [n_seqs, seq_len] int64."""
    rng = Rng(seed)
    out = np.empty((n_seqs, grammar.seq_len), dtype=np.int64)
    for i in range(n_seqs):
        out[i] = _gen_sequence(rng, grammar)[0]
    return out


def gen_tagging(seed: int, n_seqs: int, grammar: GrammarConfig) -> list[TaggingExample]:
    rng = Rng(seed)
    out = []
    for _ in range(n_seqs):
        tokens, tags = _gen_sequence(rng, grammar)
        out.append(TaggingExample(tokens=np.array(tokens, dtype=np.int64),
                                  tags=np.array(tags, dtype=np.int64)))
    return out


def gen_multilabel(seed: int, n_docs: int, grammar: GrammarConfig) -> list[MultilabelExample]:
    """Label k is set iff the document contains a token from lexicon k."""
    rng = Rng(seed)
    out = []
    for _ in range(n_docs):
        tokens = np.array(_gen_sequence(rng, grammar)[0], dtype=np.int64)
        labels = np.zeros(grammar.n_types, dtype=np.uint8)
        for k in range(1, grammar.n_types + 1):
            lo = grammar.lexicon_low(k)
            if np.any((tokens >= lo) & (tokens < lo + grammar.lexicon_size)):
                labels[k - 1] = 1
        out.append(MultilabelExample(tokens=tokens, labels=labels))
    return out


def check_bio(tags, n_types: int) -> bool:
    """I-k may only follow B-k or I-k."""
    prev = 0
    for t in tags:
        if not 0 <= t <= 2 * n_types:
            return False
        if t > 0 and t % 2 == 0 and prev not in (t - 1, t):
            return False
        prev = t
    return True


def dominant_type(example, grammar: GrammarConfig) -> int:
    """Most frequent entity type among the tokens; 0 when none. Ties go to
    the lowest type id."""
    counts = np.zeros(grammar.n_types + 1, dtype=np.int64)
    for tok in example.tokens:
        counts[grammar.token_type(int(tok))] += 1
    if counts[1:].sum() == 0:
        return 0
    return int(np.argmax(counts[1:])) + 1


def make_client_dataset(client_id: int, examples: list, grammar: GrammarConfig) -> ClientDataset:
    if not examples:
        raise InputError(f"client {client_id} dataset must be nonempty")
    hist = np.zeros(grammar.n_types + 1, dtype=np.int64)
    for ex in examples:
        hist[dominant_type(ex, grammar)] += 1
    return ClientDataset(client_id=client_id, examples=examples, histogram=hist)


def partition_clients(data: list, n_clients: int, alpha: float, seed: int,
                      grammar: GrammarConfig) -> list[ClientDataset]:
    """Dirichlet(alpha) non-IID split by dominant type.

    Each client draws a preference vector over types; every example is
    assigned to one client with probability proportional to the clients'
    preference for its dominant type. Clients left empty steal one example
    from the currently largest client, so the result is a disjoint cover
    with no empty parts."""
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if n_clients > len(data):
        raise ConfigError(f"cannot split {len(data)} examples across {n_clients} clients")
    rng = Rng(seed)
    n_types = grammar.n_types + 1  # type 0 = no entities
    prefs = np.stack([rng.dirichlet(alpha, n_types) for _ in range(n_clients)])

    by_type: dict[int, list[int]] = {t: [] for t in range(n_types)}
    for idx, ex in enumerate(data):
        by_type[dominant_type(ex, grammar)].append(idx)

    assigned: list[list[int]] = [[] for _ in range(n_clients)]
    for t in range(n_types):
        members = by_type[t]
        rng.shuffle(members)
        w = prefs[:, t]
        cdf = np.cumsum(w / w.sum())
        for idx in members:
            u = float(rng.uniform(1)[0])
            c = int(np.searchsorted(cdf, u, side="right"))
            assigned[min(c, n_clients - 1)].append(idx)

    # repair empty clients deterministically
    for c in range(n_clients):
        while not assigned[c]:
            donor = max(range(n_clients), key=lambda i: (len(assigned[i]), -i))
            assigned[c].append(assigned[donor].pop())

    return [make_client_dataset(c, [data[i] for i in assigned[c]], grammar)
            for c in range(n_clients)]


def make_batch(cfg: ModelConfig, examples: list) -> Batch:
    """Rectangular batch from task examples."""
    if not examples:
        raise InputError("empty batch")
    tokens = np.stack([ex.tokens for ex in examples])
    if cfg.task == "tagging":
        return Batch(tokens=tokens, tags=np.stack([ex.tags for ex in examples]))
    if cfg.task == "multilabel":
        labels = np.stack([ex.labels for ex in examples]).astype(np.float32)
        return Batch(tokens=tokens, labels=labels)
    raise InputError(f"make_batch does not handle task {cfg.task!r}")


# ---------------------------------------------------------------------------
# dataset files: length-prefixed little-endian records
# ---------------------------------------------------------------------------


def write_dataset(path, items, task: str, n_types: int = 0) -> None:
    """File layout: FSKD | version u16 | task u8 | n_types u16 | count u32,
    then per record: length u32 | payload."""
    if task not in _TASK_CODES:
        raise ConfigError(f"unknown dataset task {task!r}")
    with open(path, "wb") as fh:
        count = len(items)
        fh.write(_FILE_MAGIC)
        fh.write(struct.pack("<HBHI", 1, _TASK_CODES[task], n_types, count))
        for item in items:
            payload = _encode_record(item, task)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def _encode_record(item, task: str) -> bytes:
    if task == "corpus":
        tokens = np.asarray(item, dtype=np.uint32)
        return struct.pack("<H", len(tokens)) + tokens.astype("<u4").tobytes()
    if task == "tagging":
        head = struct.pack("<H", len(item.tokens))
        return (head + item.tokens.astype("<u4").tobytes()
                + item.tags.astype(np.uint8).tobytes())
    mask = 0
    for k, bit in enumerate(item.labels):
        if bit:
            mask |= 1 << k
    return (struct.pack("<H", len(item.tokens))
            + item.tokens.astype("<u4").tobytes() + struct.pack("<Q", mask))


def read_dataset(path):
    """Returns (task, items, n_types); corpus items come back as one array."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from None
    if blob[:4] != _FILE_MAGIC:
        raise DataError(f"{path}: bad dataset magic")
    version, task_code, n_types, count = struct.unpack_from("<HBHI", blob, 4)
    if version != 1 or task_code not in _TASK_NAMES:
        raise DataError(f"{path}: unsupported dataset version/task")
    task = _TASK_NAMES[task_code]
    items = []
    off = 13
    for _ in range(count):
        if off + 4 > len(blob):
            raise DataError(f"{path}: truncated record table")
        (rec_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + rec_len > len(blob):
            raise DataError(f"{path}: truncated record")
        items.append(_decode_record(blob[off:off + rec_len], task, n_types, path))
        off += rec_len
    if task == "corpus":
        return task, np.stack(items) if items else np.empty((0, 0), np.int64), n_types
    return task, items, n_types


def _decode_record(payload: bytes, task: str, n_types: int, path):
    (t,) = struct.unpack_from("<H", payload, 0)
    tokens = np.frombuffer(payload, dtype="<u4", count=t, offset=2).astype(np.int64)
    if task == "corpus":
        return tokens
    if task == "tagging":
        tags = np.frombuffer(payload, dtype=np.uint8, count=t, offset=2 + 4 * t).astype(np.int64)
        return TaggingExample(tokens=tokens, tags=tags)
    (mask,) = struct.unpack_from("<Q", payload, 2 + 4 * t)
    labels = np.array([(mask >> k) & 1 for k in range(n_types)], dtype=np.uint8)
    return MultilabelExample(tokens=tokens, labels=labels)
