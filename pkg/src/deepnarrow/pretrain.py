"""Synthetic corpus, span corruption and a deterministic Adam training loop.

Token layout: 0 is padding (and the decoder start token), 1 is end of
sequence, the top ``N_SENTINELS`` ids are span sentinels (sentinel 0 is
``vocab_size - 1``, counting down), and everything between is ordinary text.
"""

from __future__ import annotations

import csv
import io
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import ModelConfig, resolve
from .transformer import EOS_ID, PAD_ID, Batch, Model, forward, loss_and_grads, save_checkpoint, token_nll

N_SENTINELS = 100
FIRST_TEXT_ID = 2
CORRUPTION_RATE = 0.15
MEAN_SPAN_LEN = 3.0
DIVERGENCE_FACTOR = 10.0


def sentinel_id(k: int, vocab_size: int) -> int:
    return vocab_size - 1 - k


def desk_config(code: str = "NL2-TY", vocab_size: int = 512) -> ModelConfig:
    """A registry shape with the vocabulary shrunk to synthetic-corpus size."""
    return resolve(code).replace(vocab_size=vocab_size)


# corpus

@dataclass(frozen=True)
class MarkovSource:
    """Order-2 Markov text over token classes.

    The class of token ``t`` is ``(t - FIRST_TEXT_ID) % n_classes``.  The next
    class is drawn from ``transition[class(t-2), class(t-1)]``; the token within
    that class from a Zipf-shaped ``emission`` distribution.
    """

    vocab_size: int
    transition: np.ndarray
    members: np.ndarray
    emission_cdf: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.transition.shape[0]

    def class_of(self, tokens):
        return (np.asarray(tokens) - FIRST_TEXT_ID) % self.n_classes


def markov_source(seed: int, vocab_size: int, n_classes: int = 8,
                  concentration: float = 0.5) -> MarkovSource:
    n_text = vocab_size - N_SENTINELS - FIRST_TEXT_ID
    if n_text < n_classes:
        raise ValueError(f"vocab_size {vocab_size} leaves no room for {N_SENTINELS} sentinels, "
                         f"special tokens and {n_classes} text classes")
    rng = np.random.default_rng([seed, 0x5EED])
    transition = rng.dirichlet(np.full(n_classes, concentration), size=(n_classes, n_classes))
    text_ids = np.arange(FIRST_TEXT_ID, FIRST_TEXT_ID + n_text)
    width = math.ceil(n_text / n_classes)
    members = np.full((n_classes, width), -1, dtype=np.int64)
    cdf = np.ones((n_classes, width))
    for c in range(n_classes):
        ids = text_ids[c::n_classes]
        members[c, :len(ids)] = ids
        w = 1.0 / np.arange(1, len(ids) + 1)
        cdf[c, :len(ids)] = np.cumsum(w / w.sum())
    cdf[:, -1] = 1.0
    return MarkovSource(vocab_size, transition, members, cdf)


def synth_corpus(seed: int, n_sequences: int, seq_len: int, vocab_size: int,
                 n_classes: int = 8) -> np.ndarray:
    """``n_sequences`` x ``seq_len`` token matrix; identical for identical arguments."""
    src = markov_source(seed, vocab_size, n_classes)
    out = np.zeros((n_sequences, seq_len), dtype=np.int64)
    if n_sequences == 0 or seq_len == 0:
        return out
    rng = np.random.default_rng([seed, 0xC0C0])
    k = src.n_classes
    trans_cdf = np.cumsum(src.transition, axis=-1)
    trans_cdf[..., -1] = 1.0
    classes = np.zeros((n_sequences, seq_len), dtype=np.int64)
    for t in range(seq_len):
        u = rng.random(n_sequences)
        if t < 2:
            cls = np.minimum((u * k).astype(np.int64), k - 1)
        else:
            rows = trans_cdf[classes[:, t - 2], classes[:, t - 1]]
            cls = (u[:, None] > rows).sum(axis=1)
        classes[:, t] = cls
        pick = (rng.random(n_sequences)[:, None] > src.emission_cdf[cls]).sum(axis=1)
        out[:, t] = src.members[cls, pick]
    return out


def split_corpus(corpus: np.ndarray, held_out_fraction: float = 0.1):
    """Disjoint (train, held_out) row ranges."""
    n_held = max(1, int(round(len(corpus) * held_out_fraction)))
    if n_held >= len(corpus):
        raise ValueError("corpus too small to split")
    return corpus[:-n_held], corpus[-n_held:]


_CORPUS_MAGIC = b"SYNC"
_CORPUS_VERSION = 1


def save_corpus(corpus: np.ndarray, path, vocab_size: int) -> None:
    n, s = corpus.shape
    with open(path, "wb") as fh:
        fh.write(_CORPUS_MAGIC + struct.pack("<IIII", _CORPUS_VERSION, vocab_size, n, s))
        fh.write(corpus.astype("<u4").tobytes())


def load_corpus(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    if data[:4] != _CORPUS_MAGIC:
        raise ValueError(f"{path}: not a corpus file")
    version, vocab, n, s = struct.unpack_from("<IIII", data, 4)
    if version != _CORPUS_VERSION:
        raise ValueError(f"{path}: unsupported corpus version {version}")
    tokens = np.frombuffer(data, dtype="<u4", offset=20, count=n * s)
    return tokens.reshape(n, s).astype(np.int64), vocab


# span corruption

@dataclass(frozen=True)
class CorruptedExample:
    encoder_tokens: np.ndarray
    target_tokens: np.ndarray
    original: np.ndarray


def _random_composition(rng, total: int, parts: int, min_part: int) -> np.ndarray:
    """Random split of ``total`` into ``parts`` integers each >= ``min_part``."""
    free = total - parts * min_part
    bars = np.sort(rng.choice(free + parts - 1, size=parts - 1, replace=False))
    edges = np.concatenate(([-1], bars, [free + parts - 1]))
    return np.diff(edges) - 1 + min_part


def noise_mask(length: int, corruption_rate: float, mean_span_len: float, rng) -> np.ndarray:
    """Boolean mask of corrupted positions made of contiguous, separated spans."""
    if not 0 <= corruption_rate < 1:
        raise ValueError(f"corruption_rate must be in [0, 1), got {corruption_rate}")
    if mean_span_len < 1:
        raise ValueError(f"mean_span_len must be >= 1, got {mean_span_len}")
    mask = np.zeros(length, dtype=bool)
    if corruption_rate == 0:
        return mask
    if length < max(2, mean_span_len):
        raise ValueError(f"sequence of length {length} is shorter than one span")
    n_noise = min(max(int(round(length * corruption_rate)), 1), length - 1)
    n_keep = length - n_noise
    n_spans = max(int(round(n_noise / mean_span_len)), 1)
    n_spans = min(n_spans, n_noise, n_keep + 1)
    noise_lens = _random_composition(rng, n_noise, n_spans, 1)
    # leading/trailing gaps may be empty, interior gaps need >= 1 kept token
    gaps = _random_composition(rng, n_keep + 2, n_spans + 1, 1)
    gaps[0] -= 1
    gaps[-1] -= 1
    pos = 0
    for g, s in zip(gaps[:-1], noise_lens):
        pos += g
        mask[pos:pos + s] = True
        pos += s
    return mask


def span_corrupt(sequence, corruption_rate: float = CORRUPTION_RATE,
                 mean_span_len: float = MEAN_SPAN_LEN, seed=0,
                 vocab_size: int = 32128) -> CorruptedExample:
    """Replace random spans with sentinels; the target lists each span after its sentinel."""
    seq = np.asarray(sequence, dtype=np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = noise_mask(len(seq), corruption_rate, mean_span_len, rng)
    enc: list[int] = []
    tgt: list[int] = []
    k = -1
    for i, tok in enumerate(seq):
        if mask[i]:
            if i == 0 or not mask[i - 1]:
                k += 1
                s = sentinel_id(k, vocab_size)
                if s <= EOS_ID:
                    raise ValueError("vocabulary too small for the number of spans")
                enc.append(s)
                tgt.append(s)
            tgt.append(int(tok))
        else:
            enc.append(int(tok))
    tgt.append(EOS_ID)
    return CorruptedExample(np.array(enc, dtype=np.int64), np.array(tgt, dtype=np.int64), seq)


def reconstruct(example: CorruptedExample, vocab_size: int) -> np.ndarray:
    """Invert span corruption by splicing each target span back at its sentinel."""
    spans: list[list[int]] = []
    for tok in example.target_tokens:
        tok = int(tok)
        if tok == EOS_ID:
            break
        if tok == sentinel_id(len(spans), vocab_size):
            spans.append([])
        else:
            spans[-1].append(tok)
    out: list[int] = []
    k = 0
    for tok in example.encoder_tokens:
        tok = int(tok)
        if k < len(spans) and tok == sentinel_id(k, vocab_size):
            out.extend(spans[k])
            k += 1
        else:
            out.append(tok)
    return np.array(out, dtype=np.int64)


def make_batch(examples: Sequence[CorruptedExample]) -> Batch:
    return Batch.from_sequences([e.encoder_tokens for e in examples],
                                [e.target_tokens for e in examples])


# training

@dataclass
class TrainMetrics:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    tokens_per_sec: list[Optional[float]] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan
    held_out_log_ppl: Optional[float] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "tokens_per_sec"])
        for s, l, t in zip(self.steps, self.losses, self.tokens_per_sec):
            w.writerow([s, repr(l), "" if t is None else f"{t:.1f}"])
        return buf.getvalue()


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def _corrupt_rows(rows, rng, vocab_size, rate, span):
    return [span_corrupt(r, rate, span, rng, vocab_size) for r in rows]


def train(model: Model, corpus: np.ndarray, steps: int, batch_size: int = 8,
          learning_rate: float = 1e-3, seed: int = 0,
          corruption_rate: float = CORRUPTION_RATE, mean_span_len: float = MEAN_SPAN_LEN,
          held_out: Optional[np.ndarray] = None, out_dir=None, checkpoint_every: int = 0,
          clock: Optional[Callable[[], float]] = time.perf_counter) -> TrainMetrics:
    """Train ``model`` in place with Adam at a constant learning rate.

    ``initial_loss``/``final_loss`` are measured on one fixed probe batch, so
    they are comparable across steps.  Pass ``clock=None`` to leave
    ``tokens_per_sec`` empty and make every output a pure function of the seed.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    vocab = model.config.vocab_size
    batch_rng, probe_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    probe_rows = corpus[probe_rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)]
    probe = make_batch(_corrupt_rows(probe_rows, probe_rng, vocab, corruption_rate, mean_span_len))

    metrics = TrainMetrics()
    metrics.initial_loss = forward(model, probe)[1]
    adam = AdamState(learning_rate)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for step in range(1, steps + 1):
        t0 = clock() if clock else None
        rows = corpus[batch_rng.integers(0, len(corpus), size=batch_size)]
        batch = make_batch(_corrupt_rows(rows, batch_rng, vocab, corruption_rate, mean_span_len))
        loss, grads = loss_and_grads(model, batch)
        if not math.isfinite(loss) or loss > DIVERGENCE_FACTOR * metrics.initial_loss:
            raise TrainingDiverged(
                f"step {step}: loss {loss:.4g} exceeds {DIVERGENCE_FACTOR:g}x the initial "
                f"loss {metrics.initial_loss:.4g}; lower the learning rate")
        adam.update(model.params, grads)
        metrics.steps.append(step)
        metrics.losses.append(loss)
        if clock:
            n_tok = int(batch.encoder_mask.sum() + batch.target_mask.sum())
            metrics.tokens_per_sec.append(n_tok / max(clock() - t0, 1e-12))
        else:
            metrics.tokens_per_sec.append(None)
        if out is not None and checkpoint_every and step % checkpoint_every == 0:
            save_checkpoint(model, out / f"ckpt_{step:06d}.bin")

    metrics.final_loss = forward(model, probe)[1]
    if held_out is not None:
        metrics.held_out_log_ppl = evaluate_ppl(model, held_out, seed=seed,
                                                corruption_rate=corruption_rate,
                                                mean_span_len=mean_span_len)
    if out is not None:
        save_checkpoint(model, out / "final.bin")
        (out / "metrics.csv").write_text(metrics.to_csv(), encoding="utf-8")
    return metrics


def evaluate_ppl(model: Model, held_out, seed: int = 0, corruption_rate: float = CORRUPTION_RATE,
                 mean_span_len: float = MEAN_SPAN_LEN, batch_size: int = 32) -> float:
    """Negated mean token-level NLL over the held-out targets (higher is better).

    ``held_out`` is either raw sequences (corrupted here with ``seed``) or a
    list of :class:`CorruptedExample`.
    """
    if len(held_out) == 0:
        raise ValueError("empty held-out split")
    if isinstance(held_out[0], CorruptedExample):
        examples = list(held_out)
    else:
        rng = np.random.default_rng(seed)
        examples = _corrupt_rows(held_out, rng, model.config.vocab_size, corruption_rate, mean_span_len)
    total, count = 0.0, 0
    for i in range(0, len(examples), batch_size):
        batch = make_batch(examples[i:i + batch_size])
        logits, _ = forward(model, batch)
        total += float(token_nll(logits, batch.target_tokens, batch.target_mask).sum())
        count += batch.n_target_tokens
    return -total / count
