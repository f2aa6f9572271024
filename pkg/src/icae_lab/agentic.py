"""Compressed contexts for multi-step agent trajectories.

Observations selected by a :class:`CompressionPolicy` are replaced by memory
spans; everything else stays discrete. Positions are renumbered over the
assembled slots so a span costs ``m`` positions, not its source length.
During training only the span of the observation right before the target
action carries gradients; earlier spans come from a per-trajectory cache.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np

from . import autograd as ag
from . import tokenizer as tok
from .autograd import Tensor
from .icae import (
    ICAE,
    BudgetError,
    MemorySpan,
    SpanCache,
    TASK_TOKENS,
    assemble,
    compress_chunked,
    n_memory_slots,
    split_chunks,
    teacher_forced_loss,
)
from .model import SequenceBatch, greedy_generate, prefix_embeddings

log = logging.getLogger(__name__)

ROLES = ("system", "action", "observation")
OUTCOMES = ("resolved", "unresolved", "budget_exhausted")
ACTION_OVERHEAD = 2  # ACT marker before, EOS terminator after


# ------------------------------------------------------------------ records


@dataclass
class Step:
    index: int
    role: str
    text: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def token_len(self) -> int:
        return tok.token_len(self.text)

    @property
    def ids(self) -> list[int]:
        return tok.tokenize(self.text)


@dataclass
class Trajectory:
    task_id: str
    seed: int
    steps: list[Step] = field(default_factory=list)
    outcome: str | None = None

    def __post_init__(self):
        if self.outcome is not None and self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")

    def append(self, role: str, text: str) -> Step:
        st = Step(len(self.steps), role, text)
        self.steps.append(st)
        return st

    def validate(self) -> None:
        if not self.steps or self.steps[0].role != "system":
            raise ValueError("step 0 must be the system prompt")
        for i, st in enumerate(self.steps):
            if st.index != i:
                raise ValueError(f"step indices must be dense, found {st.index} at {i}")
        tail = [s.role for s in self.steps if s.role != "system"]
        first_non_sys = next((i for i, s in enumerate(self.steps) if s.role != "system"), None)
        if first_non_sys is not None and any(s.role == "system" for s in self.steps[first_non_sys:]):
            raise ValueError("system steps must form a prefix")
        for a, b in zip(tail, tail[1:]):
            if a == b:
                raise ValueError("actions and observations must alternate")

    def action_indices(self) -> list[int]:
        return [s.index for s in self.steps if s.role == "action"]

    def observation_indices(self, upto: int | None = None) -> list[int]:
        end = len(self.steps) if upto is None else upto
        return [s.index for s in self.steps[:end] if s.role == "observation"]

    def actions(self) -> list[str]:
        return [s.text for s in self.steps if s.role == "action"]

    def to_json(self) -> str:
        rec = {
            "task_id": self.task_id,
            "seed": self.seed,
            "steps": [{"index": s.index, "role": s.role, "text": s.text} for s in self.steps],
            "outcome": self.outcome,
        }
        return json.dumps(rec, ensure_ascii=False, separators=(", ", ": "))

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        rec = json.loads(line)
        steps = [Step(int(s["index"]), s["role"], s["text"]) for s in rec["steps"]]
        return cls(str(rec["task_id"]), int(rec["seed"]), steps, rec.get("outcome"))


def dump_trajectories(trajs: Iterable[Trajectory]) -> str:
    return "".join(t.to_json() + "\n" for t in trajs)


def load_trajectories(text: str) -> list[Trajectory]:
    return [Trajectory.from_json(line) for line in text.splitlines() if line.strip()]


# ----------------------------------------------------------------- policies


@dataclass(frozen=True)
class CompressionPolicy:
    """Which observations become memory spans.

    Kinds: ``none``, ``threshold`` (token length > tau), ``last_k`` (the k
    most recent observations) and ``random_pct`` (each observation with
    probability pct/100, fixed per (seed, step)). Kinds never compose.
    """

    kind: str = "threshold"
    tau: int = 256
    k: int = 0
    pct: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "threshold", "last_k", "random_pct"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.tau < 1 or self.k < 0 or not 0 <= self.pct <= 100:
            raise ValueError("policy parameters out of range")

    @property
    def label(self) -> str:
        if self.kind == "threshold":
            return f"threshold{self.tau}"
        if self.kind == "last_k":
            return f"last_k{self.k}"
        if self.kind == "random_pct":
            return f"random_pct{self.pct:g}"
        return "none"


def _random_pick(seed: int, index: int, pct: float) -> bool:
    return float(np.random.default_rng([seed, index]).random()) < pct / 100.0


def select_compression_steps(traj: Trajectory, policy: CompressionPolicy,
                             upto: int | None = None) -> set[int]:
    """Observation indices below ``upto`` that the policy compresses."""
    if upto is None:
        upto = len(traj.steps)
    if not 0 <= upto <= len(traj.steps):
        raise IndexError(f"upto={upto} outside trajectory of {len(traj.steps)} steps")
    obs = traj.observation_indices(upto)
    if policy.kind == "none":
        return set()
    if policy.kind == "threshold":
        return {i for i in obs if traj.steps[i].token_len > policy.tau}
    if policy.kind == "last_k":
        return set(obs[len(obs) - policy.k :]) if policy.k else set()
    return {i for i in obs if _random_pick(policy.seed, i, policy.pct)}


def span_slots(n: int, rate: float, max_chunk: int | None = None) -> int:
    """Slots a compressed ``n``-token observation occupies (per-chunk ceilings)."""
    if max_chunk is None or n <= max_chunk:
        return n_memory_slots(n, rate)
    return sum(n_memory_slots(len(c), rate) for c in split_chunks(range(n), max_chunk))


def effective_compression_rate(traj: Trajectory, policy: CompressionPolicy, rate: float,
                               max_chunk: int | None = None) -> float:
    """Source tokens over occupied slots for the whole trajectory."""
    if not traj.steps:
        raise ValueError("empty trajectory")
    chosen = select_compression_steps(traj, policy)
    total = sum(s.token_len for s in traj.steps)
    occupied = sum(
        span_slots(s.token_len, rate, max_chunk) if s.index in chosen else s.token_len
        for s in traj.steps
    )
    if occupied == 0:
        raise ValueError("trajectory has no tokens")
    return total / occupied


# ----------------------------------------------------------------- assembly


class SpanSource:
    """Produces memory spans for one trajectory and caches them.

    Without a model, spans are zero placeholders with the right slot count;
    this is enough for scripted agents that ignore the context.
    """

    def __init__(self, model: ICAE | None, cache: SpanCache | None = None, rate: float = 4.0,
                 d_model: int = 128, trajectory_id: str = ""):
        self.model = model
        if model is not None:
            rate, d_model = model.rate, model.cfg.d_model
        self.rate = rate
        self.d_model = d_model
        self.cache = cache if cache is not None else SpanCache(trajectory_id, rate, d_model)
        self.max_chunk = model.max_chunk() if model is not None else None

    def get(self, step: Step, live: bool = False) -> list[MemorySpan]:
        """Spans for ``step``; a live request recompresses with the graph attached.

        The detached result is written to the cache either way, so later
        steps of the trajectory reuse the same vectors.
        """
        if not live and step.index in self.cache:
            return [self.cache[step.index]]
        if self.model is None:
            m = span_slots(step.token_len, self.rate, self.max_chunk)
            span = MemorySpan(Tensor(np.zeros((m, self.d_model))), step.token_len,
                              (self.cache.trajectory_id, step.index))
            return [self.cache.put(step.index, span)]
        spans = compress_chunked(self.model, step.ids, (self.cache.trajectory_id, step.index),
                                 grad=live)
        merged = MemorySpan(ag.concat([s.vectors for s in spans]) if len(spans) > 1
                            else spans[0].vectors, step.token_len,
                            (self.cache.trajectory_id, step.index))
        stored = self.cache.put(step.index, merged)
        return [merged] if live else [stored]


@dataclass
class Segment:
    step: int
    role: str
    tokens: list[int] | None = None
    span: MemorySpan | None = None

    @property
    def slots(self) -> int:
        return self.span.m if self.span is not None else len(self.tokens)


@dataclass
class AssembledContext:
    segments: list[Segment]
    position_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    grad_live: int | None = None

    @property
    def slots(self) -> int:
        return sum(s.slots for s in self.segments)

    def spans(self) -> list[Segment]:
        return [s for s in self.segments if s.span is not None]

    def batch(self) -> SequenceBatch:
        parts = [s.span if s.span is not None else s.tokens for s in self.segments]
        b = assemble(parts)
        b.position_ids = self.position_ids.copy()
        return b


def render_step(step: Step) -> list[int]:
    if step.role == "action":
        return [tok.ACT] + step.ids + [tok.EOS]
    return step.ids


def remap_positions(ctx: AssembledContext, start: int = 0) -> AssembledContext:
    """Consecutive ids over slots: each span consumes exactly ``m`` positions."""
    ctx.position_ids = np.arange(start, start + ctx.slots, dtype=np.int64)
    cur = start
    for seg in ctx.segments:
        if seg.span is not None:
            seg.span.position_base = cur
        cur += seg.slots
    return ctx


def assemble_context(traj: Trajectory, chosen: set[int], source: SpanSource, current: int,
                     train_live: bool = False, budget: int | None = None) -> AssembledContext:
    """History before step ``current`` followed by the ACT prompt.

    With ``train_live`` the span of observation ``current - 1`` (when chosen)
    is recompressed on the graph and flagged; all other spans are detached.
    """
    segs: list[Segment] = []
    live = None
    for st in traj.steps[:current]:
        if st.index in chosen:
            if st.role != "observation":
                raise ValueError(f"step {st.index} is a {st.role}; only observations compress")
            is_live = train_live and st.index == current - 1
            (span,) = source.get(st, live=is_live)
            if is_live:
                live = st.index
            segs.append(Segment(st.index, st.role, span=span))
        else:
            segs.append(Segment(st.index, st.role, tokens=render_step(st)))
    segs.append(Segment(current, "prompt", tokens=[TASK_TOKENS["ACT"]]))
    ctx = remap_positions(AssembledContext(segs, grad_live=live))
    if budget is not None and ctx.slots > budget:
        raise BudgetError(ctx.slots, budget)
    return ctx


def source_slot_count(traj: Trajectory, current: int) -> int:
    """Slots the same history would take with nothing compressed."""
    return sum(len(render_step(s)) for s in traj.steps[:current]) + 1


# ----------------------------------------------------------------- training


@dataclass
class AgenticStepResult:
    loss: float
    live_step: int | None
    slots: int


def train_step_agentic(model: ICAE, traj: Trajectory, policy: CompressionPolicy, k: int,
                       source: SpanSource) -> AgenticStepResult:
    """Loss on action ``k`` given the compressed history; runs backward.

    Only the span of observation ``k - 1`` is on the graph, so encoder
    gradients are zero whenever that observation stayed discrete.
    """
    step = traj.steps[k]
    if step.role != "action":
        raise ValueError(f"step {k} is not an action")
    chosen = select_compression_steps(traj, policy, k)
    ctx = assemble_context(traj, chosen, source, k, train_live=True,
                           budget=model.cfg.max_positions)
    parts = [s.span if s.span is not None else s.tokens for s in ctx.segments]
    loss = teacher_forced_loss(model, parts, step.ids + [tok.EOS])
    loss.backward()
    return AgenticStepResult(loss.item(), ctx.grad_live, ctx.slots)


def iter_action_steps(traj: Trajectory) -> Iterator[int]:
    yield from traj.action_indices()


# ------------------------------------------------------------------ rollout


class Environment(Protocol):
    task_id: str
    seed: int

    def system_prompt(self) -> str: ...

    def step(self, action: str) -> str: ...

    @property
    def finished(self) -> bool: ...

    @property
    def resolved(self) -> bool: ...


class Agent(Protocol):
    uses_memory: bool

    def act(self, traj: Trajectory, ctx: AssembledContext, max_tokens: int) -> tuple[str, bool]:
        """Next action text and whether it ended with a terminator within ``max_tokens``."""


class ScriptedAgent:
    """Replays fixed action strings, ignoring the context."""

    uses_memory = False

    def __init__(self, actions: Sequence[str] | None = None, env=None):
        self.actions = list(actions) if actions is not None else None
        self.env = env

    def act(self, traj, ctx, max_tokens):
        turn = len(traj.action_indices())
        if self.actions is not None:
            text = self.actions[turn] if turn < len(self.actions) else "$ submit"
        else:
            text = self.env.expert_action(turn)
        return text, tok.token_len(text) + 1 <= max_tokens


class ModelAgent:
    """Greedy decoding from the frozen decoder over the assembled context."""

    uses_memory = True

    def __init__(self, model: ICAE, max_action_tokens: int = 96):
        self.model = model
        self.max_action_tokens = max_action_tokens

    def act(self, traj, ctx, max_tokens):
        """Greedy action; an action cut at ``max_action_tokens`` is still executed.

        Only running out of context slots before a terminator counts as a
        failure to act.
        """
        batch = ctx.batch()
        room = min(max_tokens - 1, self.model.cfg.max_positions - len(batch))
        limit = min(self.max_action_tokens, room)
        if limit < 1:
            return "", False
        ids, stopped = greedy_generate(self.model.decoder, self.model.cfg,
                                       prefix_embeddings(self.model.decoder, batch),
                                       batch.position_ids, limit, (tok.EOS,))
        text = tok.detokenize([i for i in ids if i < tok.N_BYTES])
        return text, stopped or limit < room


def rollout(agent, env, policy: CompressionPolicy, budget: int, model: ICAE | None = None,
            rate: float = 4.0, d_model: int = 128, max_steps: int | None = None) -> Trajectory:
    """Run the agent loop until success, submit or the slot budget runs out.

    An action is executed only if the context including it (with its ACT
    marker and terminator) fits in ``budget`` slots.
    """
    traj = Trajectory(env.task_id, env.seed)
    traj.append("system", env.system_prompt())
    source = SpanSource(model if agent.uses_memory else None, rate=rate, d_model=d_model,
                        trajectory_id=env.task_id)
    while True:
        if max_steps is not None and len(traj.action_indices()) >= max_steps:
            traj.outcome = "unresolved"
            break
        k = len(traj.steps)
        chosen = select_compression_steps(traj, policy, k)
        with ag.no_grad():
            ctx = assemble_context(traj, chosen, source, k)
        room = budget - ctx.slots
        if room < 2:
            traj.outcome = "budget_exhausted"
            break
        text, ok = agent.act(traj, ctx, room)
        if not ok or tok.token_len(text) + 1 > room:
            traj.outcome = "budget_exhausted"
            break
        traj.append("action", text)
        traj.append("observation", env.step(text))
        if env.finished:
            traj.outcome = "resolved" if env.resolved else "unresolved"
            break
    return traj


def max_steps_closed_form(budget: int, system_tokens: int, action_tokens: int,
                          obs_slots: int) -> int:
    """Actions executed before exhaustion when every turn costs the same.

    Turn ``i`` (1-based) fits iff ``S + (i-1)(a+2+o) + (a+2) <= B``.
    """
    a = action_tokens + ACTION_OVERHEAD
    free = budget - system_tokens - a
    if free < 0:
        return 0
    return free // (a + obs_slots) + 1
