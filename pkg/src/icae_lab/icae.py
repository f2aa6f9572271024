"""Memory-token compression: encoder, memory-conditioned decoding, pretraining.

The encoder is the shared base plus LoRA deltas and a table of learnable
memory-query embeddings. Appending ``m = ceil(n / rate)`` queries to ``n``
source tokens and reading the final hidden states at those slots yields a
:class:`MemorySpan`. The decoder is the same base, frozen, reading spans in
place of token embeddings.
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import autograd as ag
from . import tokenizer as tok
from .autograd import Tensor
from .model import (
    LoraAdapter,
    ModelConfig,
    ParamStore,
    SequenceBatch,
    forward,
    freeze_decoder,
    greedy_generate,
    prefix_embeddings,
    transformer,
    embed,
    warmup_lr,
)

log = logging.getLogger(__name__)

TASK_TOKENS = {"AE": tok.AE, "LM": tok.LM, "QA": tok.QA, "ACT": tok.ACT}


class ChunkingError(ValueError):
    """Source span does not fit the encoder context; split it first."""


class BudgetError(ValueError):
    """Assembled context exceeds the decoder position budget."""

    def __init__(self, slots: int, budget: int):
        super().__init__(f"context needs {slots} slots, budget is {budget}")
        self.slots = slots
        self.budget = budget


def n_memory_slots(n: int, rate: float) -> int:
    if n < 1:
        raise ValueError("cannot compress an empty span")
    return max(1, math.ceil(n / rate))


@dataclass
class MemorySpan:
    vectors: Tensor
    source_token_count: int
    provenance: tuple = ()
    position_base: int | None = None

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @property
    def n(self) -> int:
        return self.source_token_count

    def detach(self) -> "MemorySpan":
        return MemorySpan(self.vectors.detach(), self.n, self.provenance, self.position_base)

    def checksum(self) -> str:
        return ag.checksum({"v": self.vectors})


@dataclass
class PretrainSample:
    input_tokens: list[int]
    objective: str
    target_tokens: list[int]

    def __post_init__(self):
        if self.objective not in ("AE", "LM"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "AE" and list(self.target_tokens) != list(self.input_tokens):
            raise ValueError("autoencoding target must equal its input")


def sample_objective(rng: np.random.Generator) -> str:
    return "AE" if rng.random() < 0.5 else "LM"


def make_pretrain_sample(window: Sequence[int], objective: str) -> PretrainSample:
    """AE reconstructs the window; LM continues its first 3/4 with the rest."""
    window = list(window)
    if objective == "AE":
        return PretrainSample(window, "AE", window)
    cut = max(1, (3 * len(window)) // 4)
    return PretrainSample(window[:cut], "LM", window[cut:])


class ICAE:
    """Frozen decoder (``decoder.*``) plus the trainable encoder (``encoder.*``).

    The encoder shares the frozen base tensors with the decoder; its only
    trainable weights are the LoRA factors and the memory-query table.
    """

    def __init__(self, cfg: ModelConfig, store: ParamStore, rate: float = 4.0,
                 lora_rank: int = 8, lora_alpha: float = 32.0):
        if rate < 1:
            raise ValueError("compression rate must be >= 1")
        self.cfg = cfg
        self.store = store
        self.rate = float(rate)
        self.lora_rank = lora_rank
        self.lora_alpha = float(lora_alpha)
        freeze_decoder(store)
        for name, t in store.tensors.items():
            t.requires_grad = name not in store.frozen
        self.decoder = store.view("decoder.")
        self.adapter = LoraAdapter.from_tensors(store.view("encoder."), lora_rank, lora_alpha)
        self.memory_queries = store["encoder.memory_queries"]

    @classmethod
    def from_base(cls, cfg: ModelConfig, base: ParamStore, rate: float = 4.0,
                  lora_rank: int = 8, lora_alpha: float = 32.0, max_memory: int = 128,
                  seed: int = 0) -> "ICAE":
        store = ParamStore()
        for name, t in base.items():
            store.add("decoder." + name, Tensor(t.data.copy()), frozen=True)
        adapter = LoraAdapter.create(cfg, lora_rank, lora_alpha, seed=seed)
        for name, t in adapter.named_tensors("encoder.lora.").items():
            store.add(name, t)
        # start queries near the embedding cloud so the decoder sees familiar scales
        rng = np.random.default_rng([seed, 7])
        emb = base["tok_emb"].data[: tok.N_BYTES]
        q = emb.mean(axis=0) + rng.normal(0, emb.std(), (max_memory, cfg.d_model))
        store.add("encoder.memory_queries", Tensor(q))
        return cls(cfg, store, rate, lora_rank, lora_alpha)

    @property
    def max_memory(self) -> int:
        return self.memory_queries.shape[0]

    def encoder_params(self) -> dict[str, Tensor]:
        return self.store.trainable()

    def decoder_checksum(self) -> str:
        return self.store.checksum("decoder.")

    def max_chunk(self) -> int:
        """Longest source span one encoder pass accepts."""
        best = 0
        for n in range(1, self.cfg.max_positions + 1):
            m = n_memory_slots(n, self.rate)
            if n + m <= self.cfg.max_positions and m <= self.max_memory:
                best = n
        return best


# ------------------------------------------------------------- compression


def compress(model: ICAE, tokens: Sequence[int], provenance: tuple = (),
             grad: bool = True) -> MemorySpan:
    """Encode ``tokens`` into ``ceil(n / rate)`` memory vectors.

    With ``grad=False`` (or inside ``no_grad``) the span is detached.
    """
    n = len(tokens)
    m = n_memory_slots(n, model.rate)
    if n + m > model.cfg.max_positions or m > model.max_memory:
        raise ChunkingError(
            f"{n} tokens need {n + m} encoder slots and {m} memory queries "
            f"(limits {model.cfg.max_positions}, {model.max_memory}); chunk the input"
        )
    ids = np.concatenate([np.asarray(tokens, dtype=np.int64), np.full(m, tok.MEM_SENTINEL)])
    if not grad:
        with ag.no_grad():
            return compress(model, tokens, provenance, grad=True)
    queries = ag.take_rows(model.memory_queries, np.arange(m))
    batch = SequenceBatch(ids, np.arange(n + m), [(n, queries)])
    batch.validate(model.cfg)
    hidden = transformer(model.decoder, model.cfg, embed(model.decoder, batch),
                         batch.position_ids, model.adapter)
    vectors = ag.take_rows(hidden, np.arange(n, n + m))
    if not np.isfinite(vectors.data).all():
        raise ag.NumericError("encoder produced non-finite memory vectors")
    return MemorySpan(vectors, n, tuple(provenance))


def split_chunks(tokens: Sequence[int], max_chunk: int) -> list[list[int]]:
    """Split into the fewest equal-length chunks (last may be shorter)."""
    tokens = list(tokens)
    k = max(1, math.ceil(len(tokens) / max_chunk))
    size = math.ceil(len(tokens) / k)
    return [tokens[i : i + size] for i in range(0, len(tokens), size)]


def compress_chunked(model: ICAE, tokens: Sequence[int], provenance: tuple = (),
                     grad: bool = True, max_chunk: int | None = None) -> list[MemorySpan]:
    limit = max_chunk or model.max_chunk()
    return [
        compress(model, chunk, provenance + (i,), grad=grad)
        for i, chunk in enumerate(split_chunks(tokens, limit))
    ]


# ---------------------------------------------------------------- assembly

Segment = "list[int] | MemorySpan"


def assemble(segments: Sequence, start: int = 0) -> SequenceBatch:
    """Lay segments out in order with consecutive position ids.

    A span occupies ``m`` slots (its source length never enters the
    positions). Discrete segments are token-id lists.
    """
    ids: list[np.ndarray] = []
    soft: list[tuple[int, Tensor]] = []
    cur = 0
    for seg in segments:
        if isinstance(seg, MemorySpan):
            seg.position_base = start + cur
            soft.append((cur, seg.vectors))
            ids.append(np.full(seg.m, tok.MEM_SENTINEL, dtype=np.int64))
            cur += seg.m
        else:
            arr = np.asarray(seg, dtype=np.int64).reshape(-1)
            ids.append(arr)
            cur += arr.size
    all_ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    return SequenceBatch(all_ids, np.arange(start, start + cur), soft)


def teacher_forced_loss(model: ICAE, context: Sequence, target: Sequence[int]) -> Tensor:
    """Cross-entropy of ``target`` given ``context`` segments, target rows only."""
    target = list(target)
    batch = assemble(list(context) + [target[:-1]])
    if len(batch) > model.cfg.max_positions:
        raise BudgetError(len(batch), model.cfg.max_positions)
    L = len(batch)
    n_ctx = L - (len(target) - 1)
    targets = np.zeros(L, dtype=np.int64)
    targets[n_ctx - 1 :] = target
    mask = np.zeros(L, dtype=bool)
    mask[n_ctx - 1 :] = True
    return ag.cross_entropy(forward(model.decoder, model.cfg, batch), targets, mask)


def decode_with_memory(model: ICAE, spans: Sequence[MemorySpan], task: str,
                       prompt: Sequence[int] = (), max_new: int = 64,
                       stop_ids: Iterable[int] | None = None) -> list[int]:
    """Greedy generation from ``[spans | task token | prompt]``.

    AE decoding stops at the end-of-reconstruction token, QA/ACT at EOS; LM
    runs for exactly ``max_new`` tokens.
    """
    if stop_ids is None:
        stop_ids = {"AE": (tok.END_RECON,), "LM": (), "QA": (tok.EOS,), "ACT": (tok.EOS,)}[task]
    batch = assemble(list(spans) + [[TASK_TOKENS[task]], list(prompt)])
    budget = model.cfg.max_positions
    if len(batch) > budget:
        raise BudgetError(len(batch), budget)
    batch.validate(model.cfg)
    out, _ = greedy_generate(model.decoder, model.cfg, prefix_embeddings(model.decoder, batch),
                             batch.position_ids, min(max_new, budget - len(batch)), stop_ids)
    return out


def reconstruct(model: ICAE, tokens: Sequence[int], max_new: int | None = None) -> list[int]:
    spans = compress_chunked(model, tokens, grad=False)
    return decode_with_memory(model, spans, "AE", (), max_new or len(tokens) + 8)


# ---------------------------------------------------------------- training


def objective_target(sample: PretrainSample) -> list[int]:
    if sample.objective == "AE":
        return list(sample.target_tokens) + [tok.END_RECON]
    return list(sample.target_tokens)


def pretrain_step(model: ICAE, sample: PretrainSample) -> float:
    """Forward + backward for one sample; gradients land on encoder tensors only."""
    spans = compress_chunked(model, sample.input_tokens)
    loss = teacher_forced_loss(model, spans + [[TASK_TOKENS[sample.objective]]],
                               objective_target(sample))
    loss.backward()
    return loss.item()


def qa_step(model: ICAE, context: Sequence[int], question: Sequence[int],
            answer: Sequence[int]) -> float:
    """Compressed context, discrete question, loss on the answer plus EOS."""
    spans = compress_chunked(model, context)
    loss = teacher_forced_loss(model, spans + [[tok.QA], list(question)],
                               list(answer) + [tok.EOS])
    loss.backward()
    return loss.item()


@dataclass
class TrainState:
    """Optimizer and schedule bookkeeping for encoder training."""

    model: ICAE
    lr: float
    warmup: int = 300
    grad_accum: int = 1
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    opt: ag.AdamW = field(init=False)
    micro: int = 0

    def __post_init__(self):
        self.opt = ag.AdamW(self.model.encoder_params(), self.lr, self.betas, self.weight_decay)

    def after_backward(self) -> bool:
        """Count one micro-step; apply the update once per accumulation window."""
        self.micro += 1
        if self.micro % self.grad_accum:
            return False
        params = self.opt.params
        if all(p.grad is None for p in params.values()):
            return False
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            elif self.grad_accum > 1:
                p.grad /= self.grad_accum
        self.opt.step(warmup_lr(self.opt.step_count + 1, self.lr, self.warmup))
        self.opt.zero_grad()
        return True


def iter_pretrain_samples(windows: Sequence[Sequence[int]], rng: np.random.Generator,
                          objectives: Sequence[str] = ("AE", "LM")) -> Iterator[PretrainSample]:
    """Endless stream of windows drawn uniformly, objective per draw."""
    while True:
        w = windows[int(rng.integers(len(windows)))]
        obj = sample_objective(rng) if len(objectives) == 2 else objectives[0]
        yield make_pretrain_sample(w, obj)


def reconstruction_accuracy(model: ICAE, tokens: Sequence[int]) -> float:
    """Fraction of source positions reproduced by greedy AE decoding."""
    out = reconstruct(model, tokens)
    hits = sum(1 for a, b in zip(out, tokens) if a == b)
    return hits / max(len(tokens), len(out))


def teacher_forced_accuracy(model: ICAE, tokens: Sequence[int]) -> float:
    with ag.no_grad():
        spans = compress_chunked(model, tokens)
        target = list(tokens) + [tok.END_RECON]
        batch = assemble(spans + [[tok.AE], target[:-1]])
        logits = forward(model.decoder, model.cfg, batch).data
    pred = logits[-len(target):].argmax(axis=-1)
    return float(np.mean(pred == np.asarray(target)))


# ---------------------------------------------------------------- span cache

_CACHE_MAGIC = b"ICSC"
_CACHE_VERSION = 1


class SpanCache:
    """Per-trajectory memory spans, keyed by step index, never evicted."""

    def __init__(self, trajectory_id: str, rate: float, d_model: int):
        self.trajectory_id = trajectory_id
        self.rate = float(rate)
        self.d_model = d_model
        self.spans: dict[int, MemorySpan] = {}

    def __contains__(self, step: int) -> bool:
        return step in self.spans

    def __getitem__(self, step: int) -> MemorySpan:
        return self.spans[step]

    def __len__(self) -> int:
        return len(self.spans)

    def put(self, step: int, span: MemorySpan) -> MemorySpan:
        stored = span.detach()
        self.spans[step] = stored
        return stored

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        tid = self.trajectory_id.encode()
        buf.write(_CACHE_MAGIC)
        buf.write(struct.pack("<II", _CACHE_VERSION, len(tid)))
        buf.write(tid)
        buf.write(struct.pack("<dII", self.rate, self.d_model, len(self.spans)))
        for step in sorted(self.spans):
            sp = self.spans[step]
            buf.write(struct.pack("<III", step, sp.n, sp.m))
            buf.write(np.ascontiguousarray(sp.vectors.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SpanCache":
        if data[:4] != _CACHE_MAGIC:
            raise ValueError("not a span cache file")
        off = 4
        version, tlen = struct.unpack_from("<II", data, off)
        if version != _CACHE_VERSION:
            raise ValueError(f"unsupported span cache version {version}")
        off += 8
        tid = data[off : off + tlen].decode()
        off += tlen
        rate, d, count = struct.unpack_from("<dII", data, off)
        off += 16
        cache = cls(tid, rate, d)
        for _ in range(count):
            step, n, m = struct.unpack_from("<III", data, off)
            off += 12
            nbytes = 8 * m * d
            if off + nbytes > len(data):
                raise ValueError("truncated span cache")
            vec = np.frombuffer(data, dtype="<f8", count=m * d, offset=off).reshape(m, d)
            off += nbytes
            cache.spans[step] = MemorySpan(Tensor(vec.copy()), n, (tid, step))
        return cache

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "SpanCache":
        return cls.from_bytes(Path(path).read_bytes())
