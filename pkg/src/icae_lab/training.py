"""Training loops for the three regimes: ICAE pretraining, QA and agentic fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tokenizer as tok
from .agentic import (
    CompressionPolicy,
    SpanSource,
    Trajectory,
    train_step_agentic,
)
from .data import QASample
from .icae import (
    ICAE,
    BudgetError,
    ChunkingError,
    PretrainSample,
    TrainState,
    make_pretrain_sample,
    pretrain_step,
    qa_step,
    sample_objective,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossRow:
    step: int
    objective: str
    loss: float


class EmptyDatasetError(ValueError):
    pass


def _logger(rows: list[LossRow], log_every: int, on_row: Callable[[LossRow], None] | None):
    def emit(step: int, objective: str, losses: list[float]) -> None:
        if not log_every or step % log_every or not losses:
            return
        row = LossRow(step, objective, float(np.mean(losses[-log_every:])))
        rows.append(row)
        log.info("step %d %s loss %.4f", row.step, row.objective, row.loss)
        if on_row:
            on_row(row)
    return emit


def pretrain_icae(model: ICAE, windows: Sequence[Sequence[int]], steps: int, state: TrainState,
                  seed: int, objectives: Sequence[str] = ("AE", "LM"), log_every: int = 10,
                  on_row: Callable[[LossRow], None] | None = None,
                  stop: Callable[[int], bool] | None = None) -> list[LossRow]:
    """AE/LM mix (one fair coin per sample when both are enabled).

    ``stop(step)`` is polled after each optimizer step; returning true ends
    training early.
    """
    if not windows:
        raise EmptyDatasetError("no pretraining windows")
    for o in objectives:
        if o not in ("AE", "LM"):
            raise ValueError(f"unknown objective {o!r}")
    rng = np.random.default_rng(seed)
    rows: list[LossRow] = []
    emit = _logger(rows, log_every, on_row)
    losses: list[float] = []
    for step in range(1, steps + 1):
        w = windows[int(rng.integers(len(windows)))]
        obj = sample_objective(rng) if len(objectives) == 2 else objectives[0]
        sample = make_pretrain_sample(w, obj) if obj == "LM" else PretrainSample(w, "AE", w)
        losses.append(pretrain_step(model, sample))
        state.after_backward()
        emit(step, "+".join(objectives), losses)
        if stop is not None and stop(step):
            break
    return rows


def finetune_qa(model: ICAE, samples: Sequence[QASample], steps: int, state: TrainState,
                seed: int, log_every: int = 10,
                on_row: Callable[[LossRow], None] | None = None) -> list[LossRow]:
    if not samples:
        raise EmptyDatasetError("no QA samples")
    rng = np.random.default_rng(seed)
    rows: list[LossRow] = []
    emit = _logger(rows, log_every, on_row)
    losses: list[float] = []
    for step in range(1, steps + 1):
        s = samples[int(rng.integers(len(samples)))]
        losses.append(qa_step(model, tok.tokenize(s.context), tok.tokenize(s.question),
                              tok.tokenize(s.answer)))
        state.after_backward()
        emit(step, "QA", losses)
    return rows


def finetune_agentic(model: ICAE, trajectories: Sequence[Trajectory], policy: CompressionPolicy,
                     steps: int, state: TrainState, seed: int, log_every: int = 10,
                     on_row: Callable[[LossRow], None] | None = None) -> list[LossRow]:
    """Teacher-forced action loss over expert trajectories.

    Each step picks a trajectory and one of its actions. Each pick starts a
    fresh span cache, so spans from other trajectories never leak in. Steps
    whose context exceeds the model's positions are skipped and counted.
    """
    pool = [(t, k) for t in trajectories for k in t.action_indices()]
    if not pool:
        raise EmptyDatasetError("agentic dataset has no action steps")
    rng = np.random.default_rng(seed)
    rows: list[LossRow] = []
    emit = _logger(rows, log_every, on_row)
    losses: list[float] = []
    skipped = 0
    for step in range(1, steps + 1):
        traj, k = pool[int(rng.integers(len(pool)))]
        source = SpanSource(model, trajectory_id=traj.task_id)
        try:
            res = train_step_agentic(model, traj, policy, k, source)
        except (BudgetError, ChunkingError):
            skipped += 1
            continue
        losses.append(res.loss)
        state.after_backward()
        emit(step, "ACT", losses)
    if skipped:
        log.warning("skipped %d of %d agentic steps over the position budget", skipped, steps)
    return rows
