"""Decoder-only transformer with rotary positions and optional LoRA deltas.

One pretrained base is used twice: frozen as the decoder and, with low-rank
adapters on the query/value projections, as the encoder. Parameters live in a
flat :class:`ParamStore` keyed by dotted names.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .tokenizer import MEM_SENTINEL, N_BYTES, N_TOKENS


log = logging.getLogger(__name__)

LORA_TARGETS = ("q_proj", "v_proj")
_PROJ = ("q_proj", "k_proj", "v_proj", "o_proj")


class PositionOverflow(ValueError):
    pass


class UnresolvedSlot(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 264
    max_positions: int = 2048
    rope_theta: float = 10000.0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "rope_theta" and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_head % 2:
            raise ValueError("head size must be even for rotary embeddings")
        if self.vocab_size < N_TOKENS:
            raise ValueError(f"vocab_size must be >= {N_TOKENS}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class ParamStore:
    """Named tensors plus the set of names that must never be updated."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None, frozen: Iterable[str] = ()):
        self.tensors: dict[str, Tensor] = dict(tensors or {})
        self.frozen: set[str] = set()
        self.freeze(frozen)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(sorted(self.tensors))

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return ((k, self.tensors[k]) for k in sorted(self.tensors))

    def add(self, name: str, tensor: Tensor, frozen: bool = False) -> None:
        self.tensors[name] = tensor
        if frozen:
            self.freeze([name])
        else:
            tensor.requires_grad = True

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            self.frozen.add(n)
            self.tensors[n].requires_grad = False
            self.tensors[n].grad = None

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.items() if k not in self.frozen}

    def view(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: t for k, t in self.tensors.items() if k.startswith(prefix)}

    def checksum(self, prefix: str = "") -> str:
        return ag.checksum(self.tensors, [k for k in self.tensors if k.startswith(prefix)])

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def n_params(self, trainable_only: bool = False) -> int:
        src = self.trainable() if trainable_only else self.tensors
        return int(sum(t.data.size for t in src.values()))


def freeze_decoder(store: ParamStore, prefix: str = "decoder.") -> ParamStore:
    store.freeze([k for k in store.tensors if k.startswith(prefix)])
    return store


def init_base(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Random base weights (unprefixed names, all trainable)."""
    rng = np.random.default_rng(seed)
    d, std = cfg.d_model, 0.02
    out_std = std / math.sqrt(2 * cfg.n_layers)
    t: dict[str, Tensor] = {"tok_emb": Tensor(rng.normal(0, std, (cfg.vocab_size, d)), True)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        t[p + "attn_norm"] = Tensor(np.ones(d), True)
        for name in _PROJ:
            t[p + name] = Tensor(rng.normal(0, out_std if name == "o_proj" else std, (d, d)), True)
        t[p + "mlp_norm"] = Tensor(np.ones(d), True)
        t[p + "up_proj"] = Tensor(rng.normal(0, std, (d, cfg.d_ff)), True)
        t[p + "down_proj"] = Tensor(rng.normal(0, out_std, (cfg.d_ff, d)), True)
    t["final_norm"] = Tensor(np.ones(d), True)
    return ParamStore(t)


@dataclass
class LoraAdapter:
    """Low-rank deltas ``(alpha / rank) * A @ B`` on selected projections."""

    rank: int
    alpha: float
    targets: tuple[str, ...] = LORA_TARGETS
    weights: dict[tuple[int, str], tuple[Tensor, Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        bad = set(self.targets) - set(LORA_TARGETS)
        if bad:
            raise ValueError(f"LoRA targets limited to {LORA_TARGETS}, got {sorted(bad)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def create(cls, cfg: ModelConfig, rank: int = 8, alpha: float = 32.0, seed: int = 0,
               targets: Sequence[str] = LORA_TARGETS) -> "LoraAdapter":
        rng = np.random.default_rng(seed)
        ad = cls(rank, alpha, tuple(targets))
        for i in range(cfg.n_layers):
            for tname in ad.targets:
                a = Tensor(rng.normal(0, 1 / math.sqrt(cfg.d_model), (cfg.d_model, rank)), True)
                b = Tensor(np.zeros((rank, cfg.d_model)), True)
                ad.weights[(i, tname)] = (a, b)
        return ad

    def named_tensors(self, prefix: str = "lora.") -> dict[str, Tensor]:
        out = {}
        for (i, tname), (a, b) in sorted(self.weights.items()):
            out[f"{prefix}layers.{i}.{tname}.A"] = a
            out[f"{prefix}layers.{i}.{tname}.B"] = b
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, Tensor], rank: int, alpha: float,
                     prefix: str = "lora.") -> "LoraAdapter":
        ad = cls(rank, alpha, ())
        targets = set()
        for name, a in tensors.items():
            if not (name.startswith(prefix) and name.endswith(".A")):
                continue
            _, i, tname, _ = name[len(prefix):].split(".")
            ad.weights[(int(i), tname)] = (a, tensors[name[:-2] + ".B"])
            targets.add(tname)
        ad.targets = tuple(t for t in LORA_TARGETS if t in targets)
        return ad


@dataclass
class SequenceBatch:
    """One sequence: discrete ids, soft-embedding blocks and position ids.

    ``soft`` holds ``(start_slot, Tensor[m, d_model])`` blocks; every slot a
    block covers must carry the sentinel id, and every sentinel must be covered.
    """

    token_ids: np.ndarray
    position_ids: np.ndarray
    soft: list[tuple[int, Tensor]] = field(default_factory=list)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    def validate(self, cfg: ModelConfig) -> None:
        ids, pos = self.token_ids, self.position_ids
        if ids.shape != pos.shape:
            raise ValueError("token_ids and position_ids differ in length")
        if len(ids) and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError("token id outside the vocabulary")
        if len(pos) and (pos.max() >= cfg.max_positions or pos.min() < 0):
            raise PositionOverflow(f"position id {pos.max()} >= max_positions {cfg.max_positions}")
        if len(pos) > 1 and np.any(np.diff(pos) <= 0):
            raise ValueError("position ids must strictly increase")
        covered = np.zeros(len(ids), dtype=bool)
        for start, blk in self.soft:
            covered[start : start + blk.shape[0]] = True
        sentinel = ids == MEM_SENTINEL
        if np.any(sentinel & ~covered):
            raise UnresolvedSlot(f"sentinel slot {int(np.flatnonzero(sentinel & ~covered)[0])} has no soft embedding")
        if np.any(covered & ~sentinel):
            raise UnresolvedSlot("soft embedding placed on a non-sentinel slot")


def embed(base: Mapping[str, Tensor], batch: SequenceBatch) -> Tensor:
    x = ag.take_rows(base["tok_emb"], batch.token_ids)
    return ag.place_blocks(x, batch.soft) if batch.soft else x


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def _proj(h: Tensor, base, name: str, layer: int, adapter: LoraAdapter | None) -> Tensor:
    y = h @ base[f"layers.{layer}.{name}"]
    if adapter is not None and (layer, name) in adapter.weights:
        a, b = adapter.weights[(layer, name)]
        y = y + ((h @ a) @ b) * adapter.scale
    return y


def transformer(base: Mapping[str, Tensor], cfg: ModelConfig, x: Tensor,
                position_ids: np.ndarray, adapter: LoraAdapter | None = None) -> Tensor:
    """Run all blocks on input embeddings; returns final-normed hidden states."""
    T, H, dh = x.shape[0], cfg.n_heads, cfg.d_head
    tables = ag.rope_tables(position_ids, dh, cfg.rope_theta)
    mask = causal_mask(T)
    scale = 1.0 / math.sqrt(dh)

    def heads(y: Tensor) -> Tensor:
        return ag.transpose(ag.reshape(y, (T, H, dh)), (1, 0, 2))

    for i in range(cfg.n_layers):
        h = ag.rms_norm(x, base[f"layers.{i}.attn_norm"])
        q = ag.rope_rotate(heads(_proj(h, base, "q_proj", i, adapter)), position_ids, tables=tables)
        k = ag.rope_rotate(heads(_proj(h, base, "k_proj", i, adapter)), position_ids, tables=tables)
        v = heads(_proj(h, base, "v_proj", i, adapter))
        att = ag.softmax_rows(ag.mul(q @ ag.transpose(k), scale), mask)
        o = ag.reshape(ag.transpose(att @ v, (1, 0, 2)), (T, cfg.d_model))
        x = x + _proj(o, base, "o_proj", i, adapter)
        h = ag.rms_norm(x, base[f"layers.{i}.mlp_norm"])
        x = x + ag.silu(h @ base[f"layers.{i}.up_proj"]) @ base[f"layers.{i}.down_proj"]
    return ag.rms_norm(x, base["final_norm"])


def lm_head(base: Mapping[str, Tensor], hidden: Tensor) -> Tensor:
    return hidden @ ag.transpose(base["tok_emb"])


def forward(base: Mapping[str, Tensor], cfg: ModelConfig, batch: SequenceBatch,
            adapter: LoraAdapter | None = None) -> Tensor:
    """Logits ``[T, vocab]`` for one sequence."""
    batch.validate(cfg)
    return lm_head(base, transformer(base, cfg, embed(base, batch), batch.position_ids, adapter))


# ------------------------------------------------------------- inference


class KVSession:
    """Graph-free incremental evaluation with a per-layer key/value cache."""

    def __init__(self, base: Mapping[str, Tensor], cfg: ModelConfig,
                 adapter: LoraAdapter | None = None):
        self.cfg = cfg
        self.w = {k: t.data for k, t in base.items()}
        self.lora = {}
        if adapter is not None:
            self.lora = {key: (a.data, b.data, adapter.scale) for key, (a, b) in adapter.weights.items()}
        self.keys: list[np.ndarray | None] = [None] * cfg.n_layers
        self.values: list[np.ndarray | None] = [None] * cfg.n_layers
        self.length = 0

    def _proj(self, h, name, i):
        y = h @ self.w[f"layers.{i}.{name}"]
        if (i, name) in self.lora:
            a, b, s = self.lora[(i, name)]
            y = y + ((h @ a) @ b) * s
        return y

    @staticmethod
    def _rms(x, g, eps=1e-6):
        return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * g

    def feed(self, x: np.ndarray, position_ids: Sequence[int]) -> np.ndarray:
        """Append embeddings ``x [t, d]``; return final hidden states ``[t, d]``."""
        cfg = self.cfg
        t, H, dh = x.shape[0], cfg.n_heads, cfg.d_head
        pos = np.asarray(position_ids)
        if pos.size and pos.max() >= cfg.max_positions:
            raise PositionOverflow(f"position id {pos.max()} >= max_positions {cfg.max_positions}")
        cos, sin = ag.rope_tables(pos, dh, cfg.rope_theta)
        T0 = self.length
        mask = np.tril(np.ones((t, T0 + t), dtype=bool), k=T0)
        for i in range(cfg.n_layers):
            h = self._rms(x, self.w[f"layers.{i}.attn_norm"])
            q = ag._rotate(self._proj(h, "q_proj", i).reshape(t, H, dh).transpose(1, 0, 2), cos, sin)
            k = ag._rotate(self._proj(h, "k_proj", i).reshape(t, H, dh).transpose(1, 0, 2), cos, sin)
            v = self._proj(h, "v_proj", i).reshape(t, H, dh).transpose(1, 0, 2)
            if self.keys[i] is not None:
                k = np.concatenate([self.keys[i], k], axis=1)
                v = np.concatenate([self.values[i], v], axis=1)
            self.keys[i], self.values[i] = k, v
            s = np.where(mask, (q @ k.transpose(0, 2, 1)) / math.sqrt(dh), -np.inf)
            s = np.exp(s - s.max(axis=-1, keepdims=True))
            p = s / s.sum(axis=-1, keepdims=True)
            o = (p @ v).transpose(1, 0, 2).reshape(t, cfg.d_model)
            x = x + self._proj(o, "o_proj", i)
            h = self._rms(x, self.w[f"layers.{i}.mlp_norm"])
            u = h @ self.w[f"layers.{i}.up_proj"]
            x = x + (u / (1.0 + np.exp(-u))) @ self.w[f"layers.{i}.down_proj"]
        self.length += t
        return self._rms(x, self.w["final_norm"])

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        return hidden @ self.w["tok_emb"].T


def greedy_generate(base: Mapping[str, Tensor], cfg: ModelConfig, prefix: np.ndarray,
                    position_ids: Sequence[int], max_new: int, stop_ids: Iterable[int] = (),
                    adapter: LoraAdapter | None = None) -> tuple[list[int], bool]:
    """Greedy continuation of a prefix given as embeddings ``[T, d]``.

    New tokens take consecutive positions after the last prefix position.
    Returns the generated ids (stop token excluded) and whether a stop id
    was produced. Only byte tokens and the stop ids can be emitted; task
    markers and the memory sentinel are input-only.
    """
    stops = set(stop_ids)
    blocked = np.ones(cfg.vocab_size, dtype=bool)
    blocked[:N_BYTES] = False
    blocked[list(stops)] = False
    sess = KVSession(base, cfg, adapter)
    hidden = sess.feed(np.asarray(prefix, dtype=np.float64), position_ids)
    nxt = int(position_ids[-1]) + 1 if len(position_ids) else 0
    table = sess.w["tok_emb"]
    out: list[int] = []
    for _ in range(max_new):
        logits = np.where(blocked, -np.inf, sess.logits(hidden[-1]))
        tok = int(np.argmax(logits))
        if tok in stops:
            return out, True
        out.append(tok)
        if len(out) == max_new:
            break
        hidden = sess.feed(table[tok][None, :], [nxt])
        nxt += 1
    return out, False


def prefix_embeddings(base: Mapping[str, Tensor], batch: SequenceBatch) -> np.ndarray:
    x = base["tok_emb"].data[batch.token_ids].copy()
    for start, blk in batch.soft:
        x[start : start + blk.shape[0]] = blk.data
    return x


# -------------------------------------------------------------- pretraining


def warmup_lr(step: int, lr: float, warmup: int) -> float:
    """Linear warmup to ``lr`` over ``warmup`` steps (``step`` is 1-based)."""
    if warmup <= 0:
        return lr
    return lr * min(1.0, step / warmup)


def lm_loss(base: Mapping[str, Tensor], cfg: ModelConfig, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    batch = SequenceBatch(ids[:-1], np.arange(len(ids) - 1))
    return ag.cross_entropy(forward(base, cfg, batch), ids[1:])


def pretrain_base(corpus: Sequence[int], cfg: ModelConfig, steps: int, seed: int = 0,
                  lr: float = 3e-3, window: int = 256, warmup: int = 100,
                  weight_decay: float = 0.0, log_every: int = 0,
                  base: ParamStore | None = None) -> tuple[ParamStore, list[tuple[int, float]]]:
    """Next-token training of the shared base on random corpus windows.

    Returns the trained store (unprefixed names) and ``(step, loss)`` rows,
    one per ``log_every`` steps when positive.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size < 2:
        raise ValueError("pretraining corpus is empty")
    window = min(window, corpus.size - 1, cfg.max_positions)
    store = base if base is not None else init_base(cfg, seed)
    params = store.trainable()
    opt = ag.AdamW(params, lr, weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 1])
    history = []
    for step in range(1, steps + 1):
        start = int(rng.integers(0, corpus.size - window))
        loss = lm_loss(store.tensors, cfg, corpus[start : start + window + 1])
        opt.zero_grad()
        loss.backward()
        opt.step(warmup_lr(step, lr, warmup))
        if log_every and (step % log_every == 0 or step == 1):
            history.append((step, loss.item()))
            log.info("base step %d loss %.4f", step, loss.item())
    for t in store.tensors.values():
        t.grad = None
    return store, history
