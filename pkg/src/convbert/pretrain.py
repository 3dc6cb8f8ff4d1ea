"""Desk-scale pretraining: masked language modelling and replaced-token detection.

All randomness flows from one ``numpy.random.Generator`` created from the run
seed, so a run is reproducible bit-for-bit in float64.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .attention import linear
from .encoder import ConvBertModel, ModelConfig, init_params
from .errors import ConfigError, InputError, NonFiniteGradientError
from .serialization import save_checkpoint
from .tensor import (
    Tensor,
    add,
    backward,
    bce_with_logits,
    cross_entropy,
    gelu,
    layer_norm,
    matmul,
    mul,
    parameter,
    reshape,
    swapaxes,
)

log = logging.getLogger(__name__)

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, UNK)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-6
WARMUP_FRACTION = 0.01  # 10k warmup steps out of 1M updates
RTD_WEIGHT = 50.0
GENERATOR_SIZE = {"small": 1 / 4, "medium-small": 1 / 4, "base": 1 / 3}


# --------------------------------------------------------------------------
# vocabulary and corpus


class Vocab:
    """Whitespace/lowercase vocabulary ranked by frequency (ties alphabetical)."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise InputError("vocabulary must start with the reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise InputError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, lines: Sequence[str], max_size: int | None = None) -> "Vocab":
        counts = Counter(tok for line in lines for tok in tokenize(line))
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        ranked = [t for t in ranked if t not in SPECIAL_TOKENS]
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(SPECIAL_TOKENS))]
        return cls(list(SPECIAL_TOKENS) + ranked)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def cls_id(self) -> int:
        return 1

    @property
    def sep_id(self) -> int:
        return 2

    @property
    def mask_id(self) -> int:
        return 3

    @property
    def unk_id(self) -> int:
        return 4

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIAL_TOKENS)))

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in tokenize(text)]

    def to_string(self) -> str:
        return " ".join(self.itos)

    @classmethod
    def from_string(cls, text: str) -> "Vocab":
        return cls(text.split(" "))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def encode_corpus(lines: Sequence[str], vocab: Vocab, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """``[CLS] tokens [SEP]`` per line, truncated and right-padded to ``seq_len``."""
    if seq_len < 3:
        raise InputError(f"seq_len must be at least 3, got {seq_len}")
    ids = np.full((len(lines), seq_len), vocab.pad_id, dtype=np.int64)
    for r, line in enumerate(lines):
        toks = [vocab.cls_id] + vocab.encode(line)[: seq_len - 2] + [vocab.sep_id]
        ids[r, : len(toks)] = toks
    return ids, ids != vocab.pad_id


def read_corpus(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln for ln in lines if ln.strip()]


def synthetic_corpus(n_lines: int, length: int, n_words: int, rng: np.random.Generator) -> list[str]:
    """Lines that walk a word list with a per-line start and stride.

    Every token is determined by its neighbours, so a model can drive the
    masked-token loss towards zero.
    """
    words = [f"w{i}" for i in range(n_words)]
    lines = []
    for _ in range(n_lines):
        start = int(rng.integers(n_words))
        stride = int(rng.integers(1, 4))
        lines.append(" ".join(words[(start + stride * i) % n_words] for i in range(length)))
    return lines


# --------------------------------------------------------------------------
# masking and replaced-token examples


@dataclass
class MaskedExample:
    input_ids: np.ndarray
    positions: np.ndarray
    originals: np.ndarray


def mask_tokens(
    seq,
    rng: np.random.Generator,
    rate: float = 0.15,
    vocab_size: int | None = None,
    special_ids=frozenset(range(len(SPECIAL_TOKENS))),
    mask_id: int = 3,
) -> MaskedExample:
    """Select each maskable position with probability ``rate``.

    Selected positions become ``[MASK]`` 80% of the time, a random non-special
    token 10% and stay unchanged 10%; the original ids are recorded.
    """
    seq = np.asarray(seq, dtype=np.int64)
    maskable = np.flatnonzero(~np.isin(seq, list(special_ids)))
    if maskable.size == 0:
        raise InputError("sequence has no maskable (non-special) tokens")
    if not 0.0 <= rate <= 1.0:
        raise InputError(f"mask rate must lie in [0, 1], got {rate}")
    chosen = maskable[rng.random(maskable.size) < rate]
    out = seq.copy()
    if chosen.size:
        action = rng.random(chosen.size)
        out[chosen[action < 0.8]] = mask_id
        swap = chosen[(action >= 0.8) & (action < 0.9)]
        if swap.size:
            if vocab_size is None:
                raise InputError("vocab_size is needed to draw random replacement tokens")
            lo = len(special_ids)
            out[swap] = rng.integers(lo, vocab_size, size=swap.size)
    return MaskedExample(out, chosen, seq[chosen].copy())


def sample_tokens(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw (temperature 1) per row of ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    cdf = np.cumsum(z, axis=-1)
    u = rng.random(logits.shape[0]) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1).astype(np.int64)


@dataclass
class RTDExample:
    input_ids: np.ndarray
    labels: np.ndarray
    masked: MaskedExample


def rtd_make_example(generator: Callable, seq, rng: np.random.Generator, rate: float = 0.15, vocab_size: int | None = None) -> RTDExample:
    """Mask ``seq``, let ``generator`` fill the masked slots, label replacements.

    ``generator`` maps an id array ``[n]`` to logits ``[n, vocab]``.
    """
    seq = np.asarray(seq, dtype=np.int64)
    masked = mask_tokens(seq, rng, rate, vocab_size)
    logits = generator(masked.input_ids)
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    filled = sample_tokens(logits[masked.positions], rng)
    corrupted = seq.copy()
    corrupted[masked.positions] = filled
    return RTDExample(corrupted, (corrupted != seq).astype(np.int64), masked)


# --------------------------------------------------------------------------
# heads and losses


def init_mlm_head(d: int, d_emb: int, vocab_size: int, rng: np.random.Generator, prefix: str = "mlm.", std: float = 0.02) -> dict[str, Tensor]:
    return {
        prefix + "dense_w": parameter(rng.normal(0.0, std, size=(d, d_emb))),
        prefix + "dense_b": parameter(np.zeros(d_emb)),
        prefix + "ln_g": parameter(np.ones(d_emb)),
        prefix + "ln_b": parameter(np.zeros(d_emb)),
        prefix + "out_b": parameter(np.zeros(vocab_size)),
    }


def mlm_logits(h: Tensor, head: dict[str, Tensor], word_table: Tensor, prefix: str = "mlm.") -> Tensor:
    """Dense -> GELU -> LayerNorm, decoded with the (tied) word-embedding table."""
    t = gelu(linear(h, head[prefix + "dense_w"], head[prefix + "dense_b"]))
    t = layer_norm(t, head[prefix + "ln_g"], head[prefix + "ln_b"])
    return add(matmul(t, swapaxes(word_table, 0, 1)), head[prefix + "out_b"])


def init_rtd_head(d: int, rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    return {
        "rtd.dense_w": parameter(rng.normal(0.0, std, size=(d, d))),
        "rtd.dense_b": parameter(np.zeros(d)),
        "rtd.out_w": parameter(rng.normal(0.0, std, size=(d, 1))),
        "rtd.out_b": parameter(np.zeros(1)),
    }


def rtd_logits(h: Tensor, head: dict[str, Tensor]) -> Tensor:
    t = gelu(linear(h, head["rtd.dense_w"], head["rtd.dense_b"]))
    out = linear(t, head["rtd.out_w"], head["rtd.out_b"])
    return reshape(out, out.shape[:-1])


class PretrainLosses(NamedTuple):
    mlm: Tensor
    rtd: Tensor
    joint: Tensor
    mlm_empty: bool


def pretrain_losses(
    mlm_logits: Tensor | None,
    mlm_targets,
    rtd_logits: Tensor | None = None,
    rtd_labels=None,
    rtd_weights=None,
    rtd_weight: float = RTD_WEIGHT,
) -> PretrainLosses:
    """Mean CE over masked positions, mean BCE over non-pad positions, and their weighted sum.

    With no masked positions the MLM term is 0 and ``mlm_empty`` is set.
    """
    targets = np.asarray(mlm_targets if mlm_targets is not None else [], dtype=np.int64)
    empty = targets.size == 0 or mlm_logits is None
    mlm = Tensor(0.0) if empty else cross_entropy(mlm_logits, targets)
    if empty:
        warnings.warn("no masked positions in batch; MLM loss set to 0", RuntimeWarning, stacklevel=2)
    if rtd_logits is None:
        rtd = Tensor(0.0)
        joint = mlm
    else:
        rtd = bce_with_logits(rtd_logits, rtd_labels, rtd_weights)
        joint = add(mlm, mul(rtd, rtd_weight))
    return PretrainLosses(mlm, rtd, joint, empty)


# --------------------------------------------------------------------------
# optimisation


def lr_schedule(step: int, warmup: int, total: int) -> float:
    """Linear warmup 0 -> 1 over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step > total:
        warnings.warn(f"step {step} beyond schedule end {total}; learning rate clamped to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    if warmup > 0 and step < warmup:
        return step / warmup
    if total == warmup:
        return 1.0
    return max(0.0, (total - step) / (total - warmup))


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    base_lr: float = 3e-4
    warmup: int = 0
    total: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    weight_decay: float = 0.0


def _decays(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return not ("ln_" in leaf or leaf.startswith("b") or leaf.endswith("_b"))


def adam_step(state: TrainState, params: dict[str, Tensor], lr: float) -> None:
    """One bias-corrected Adam update in place using each parameter's ``.grad``.

    Decoupled weight decay skips layer-norm and bias parameters. Any
    non-finite gradient rejects the whole step and leaves everything unchanged.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}; step {state.step + 1} rejected")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and _decays(name):
            update = update + state.weight_decay * p.data
        p.data -= lr * update


# --------------------------------------------------------------------------
# generator sizing


def generator_config(cfg: ModelConfig, multiplier: float) -> ModelConfig:
    """Scale hidden size, inner size and heads by ``multiplier``.

    The head count is rounded up to a multiple of the bottleneck ratio so the
    generator stays a valid mixed-attention model; word-embedding width is
    kept because the table is shared with the discriminator.
    """
    gamma = cfg.block_gamma
    heads = max(gamma, int(round(cfg.heads * multiplier)))
    heads = int(math.ceil(heads / gamma) * gamma)
    d = max(heads, int(round(cfg.d * multiplier)))
    d -= d % heads
    g = cfg.ffn_groups
    ffn_inner = max(g, int(round(cfg.ffn_inner * multiplier)))
    ffn_inner -= ffn_inner % g
    if d % g:
        raise ConfigError(f"generator width {d} not divisible by {g} groups")
    return cfg.replace(d=d, heads=heads, ffn_inner=ffn_inner)


# --------------------------------------------------------------------------
# training loop


METRIC_FIELDS = ("step", "lr", "mlm_loss", "rtd_loss", "joint_loss")


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    model: ConvBertModel
    heads: dict[str, Tensor]
    vocab: Vocab
    generator: ConvBertModel | None = None
    generator_head: dict[str, Tensor] | None = None


class Trainer:
    """Owns the models, heads and optimizer state for one pretraining run."""

    def __init__(
        self,
        cfg: ModelConfig,
        corpus: Sequence[str],
        objective: str = "mlm",
        seed: int = 0,
        batch_size: int = 8,
        seq_len: int = 16,
        lr: float = 3e-4,
        total_steps: int = 1000,
        warmup: int | None = None,
        mask_rate: float = 0.15,
        rtd_weight: float = RTD_WEIGHT,
        generator_size: float = 0.25,
        share_embeddings: bool = True,
        weight_decay: float = 0.0,
        max_vocab: int | None = None,
    ):
        if objective not in ("mlm", "rtd"):
            raise InputError(f"objective must be 'mlm' or 'rtd', got {objective!r}")
        lines = [ln for ln in corpus if ln.strip()]
        if len(lines) < batch_size:
            raise InputError(f"corpus has {len(lines)} sequences, fewer than one batch of {batch_size}")
        self.rng = np.random.default_rng(seed)
        self.objective = objective
        self.vocab = Vocab.build(lines, max_vocab)
        self.cfg = cfg.replace(vocab_size=len(self.vocab), max_positions=max(cfg.max_positions, seq_len))
        self.ids, self.attn_mask = encode_corpus(lines, self.vocab, seq_len)
        self.batch_size = batch_size
        self.mask_rate = mask_rate
        self.rtd_weight = rtd_weight
        self.model = ConvBertModel(self.cfg, init_params(self.cfg, self.rng))
        word = self.model.params["embeddings.word"]
        self.generator = None
        self.generator_head = None
        if objective == "mlm":
            self.heads = init_mlm_head(self.cfg.d, self.cfg.d_emb, len(self.vocab), self.rng)
        else:
            self.heads = init_rtd_head(self.cfg.d, self.rng)
            gcfg = generator_config(self.cfg, generator_size)
            gparams = init_params(gcfg, self.rng)
            if share_embeddings:
                gparams["embeddings.word"] = word
            self.generator = ConvBertModel(gcfg, gparams)
            self.generator_head = init_mlm_head(gcfg.d, gcfg.d_emb, len(self.vocab), self.rng, prefix="gen_mlm.")
        warmup = max(1, int(round(WARMUP_FRACTION * total_steps))) if warmup is None else warmup
        self.state = TrainState(base_lr=lr, warmup=warmup, total=total_steps, weight_decay=weight_decay)
        self.params = self._collect()
        self.log: list[dict] = []

    def _collect(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        seen: set[int] = set()
        groups = [("disc.", self.model.params), ("", self.heads)]
        if self.generator is not None:
            groups += [("gen.", self.generator.params), ("", self.generator_head)]
        for prefix, params in groups:
            for name, p in params.items():
                if id(p) not in seen:
                    seen.add(id(p))
                    out[prefix + name] = p
        return out

    def _masked_batch(self, rows: np.ndarray):
        inp = self.ids[rows].copy()
        pos_r, pos_c, targets = [], [], []
        for b, r in enumerate(rows):
            ex = mask_tokens(self.ids[r], self.rng, self.mask_rate, len(self.vocab), self.vocab.special_ids, self.vocab.mask_id)
            inp[b] = ex.input_ids
            pos_r.extend([b] * ex.positions.size)
            pos_c.extend(ex.positions.tolist())
            targets.extend(ex.originals.tolist())
        return inp, np.array(pos_r, dtype=np.int64), np.array(pos_c, dtype=np.int64), np.array(targets, dtype=np.int64)

    def losses(self, rows: np.ndarray) -> PretrainLosses:
        mask = self.attn_mask[rows]
        inp, pr, pc, targets = self._masked_batch(rows)
        word = self.model.params["embeddings.word"]
        if self.objective == "mlm":
            h = self.model(inp, mask=mask)
            logits = mlm_logits(h[pr, pc], self.heads, word) if targets.size else None
            return pretrain_losses(logits, targets)
        gen_word = self.generator.params["embeddings.word"]
        hg = self.generator(inp, mask=mask)
        g_logits = mlm_logits(hg[pr, pc], self.generator_head, gen_word, prefix="gen_mlm.") if targets.size else None
        corrupted = self.ids[rows].copy()
        if targets.size:
            corrupted[pr, pc] = sample_tokens(g_logits.data, self.rng)
        labels = (corrupted != self.ids[rows]).astype(np.float64)
        d_logits = rtd_logits(self.model(corrupted, mask=mask), self.heads)
        return pretrain_losses(g_logits, targets, d_logits, labels, mask.astype(np.float64), self.rtd_weight)

    def step(self) -> dict:
        rows = self.rng.choice(len(self.ids), size=self.batch_size, replace=False)
        for p in self.params.values():
            p.grad = None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            losses = self.losses(rows)
        if losses.joint.requires_grad:
            backward(losses.joint)
        mult = lr_schedule(self.state.step + 1, self.state.warmup, self.state.total)
        lr = self.state.base_lr * mult
        row = {
            "step": self.state.step + 1,
            "lr": lr,
            "mlm_loss": float(losses.mlm.data),
            "rtd_loss": float(losses.rtd.data),
            "joint_loss": float(losses.joint.data),
        }
        adam_step(self.state, self.params, lr)
        self.log.append(row)
        return row

    def run(self, steps: int) -> TrainResult:
        for _ in range(steps):
            row = self.step()
            if row["step"] % 50 == 0:
                log.info("step %d joint %.4f", row["step"], row["joint_loss"])
        return self.result()

    def result(self) -> TrainResult:
        return TrainResult(self.state, self.log, self.model, self.heads, self.vocab, self.generator, self.generator_head)

    def rtd_accuracy(self, seed: int = 1234, passes: int = 4) -> float:
        """Discriminator accuracy on replaced positions, over ``passes`` sweeps of the corpus."""
        if self.objective != "rtd":
            raise InputError("rtd_accuracy needs an RTD run")
        from .tensor import no_grad

        rng = np.random.default_rng(seed)
        gen_word = self.generator.params["embeddings.word"]
        hits = total = 0
        with no_grad():
            for r in list(range(len(self.ids))) * passes:
                seq, mask = self.ids[r], self.attn_mask[r]

                def gen(ids):
                    return mlm_logits(self.generator(ids, mask=mask), self.generator_head, gen_word, prefix="gen_mlm.")

                ex = rtd_make_example(gen, seq, rng, self.mask_rate, len(self.vocab))
                pred = rtd_logits(self.model(ex.input_ids, mask=mask), self.heads).data > 0
                replaced = ex.labels.astype(bool)
                hits += int(np.sum(pred[replaced]))
                total += int(replaced.sum())
        return hits / total if total else float("nan")


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in METRIC_FIELDS})


def train_loop(
    cfg: ModelConfig,
    corpus: Sequence[str],
    objective: str = "mlm",
    steps: int = 100,
    seed: int = 0,
    out_dir=None,
    **kwargs,
) -> TrainResult:
    """Train for ``steps`` updates; optionally write ``metrics.csv`` and ``model.ckpt`` to ``out_dir``."""
    kwargs.setdefault("total_steps", max(steps, 1))
    trainer = Trainer(cfg, corpus, objective, seed, **kwargs)
    result = trainer.run(steps)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", result.log)
        params = dict(result.model.params)
        params.update(result.heads)
        save_checkpoint(out / "model.ckpt", result.model.cfg, params, {"vocab": result.vocab.to_string(), "objective": objective})
    return result
