"""Rollout evaluation and the policy x depth hypothesis sweep."""

from __future__ import annotations

import itertools
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .agentic import (
    CompressionPolicy,
    ModelAgent,
    ScriptedAgent,
    Trajectory,
    effective_compression_rate,
    rollout,
)
from .config import derive_seed
from .envs import TaskEnv, TaskSpec, build_world
from .icae import ICAE
from .metrics import (
    DegenerateSampleError,
    MetricRecord,
    bleu_ref,
    welch_t,
)

ORACLE = "oracle"


def worker_count() -> int:
    """Pool size: the CPU count, capped by ``ICAE_LAB_THREADS`` when set."""
    n = os.cpu_count() or 1
    raw = os.environ.get("ICAE_LAB_THREADS", "")
    if not raw:
        return n
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"ICAE_LAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, cap))


def ordered_map(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    """Map in a bounded pool; results come back in input order."""
    n = threads if threads is not None else worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def make_policy(kind: str, tau: int = 256, k: int = 2, pct: float = 50.0,
                seed: int = 0) -> CompressionPolicy:
    if kind == "none":
        return CompressionPolicy("none")
    if kind == "threshold":
        return CompressionPolicy("threshold", tau=tau)
    if kind == "last_k":
        return CompressionPolicy("last_k", k=k)
    if kind == "random_pct":
        return CompressionPolicy("random_pct", pct=pct, seed=seed)
    raise ValueError(f"unknown policy kind {kind!r}")


@dataclass(frozen=True)
class RolloutJob:
    model_name: str
    spec: TaskSpec
    policy: CompressionPolicy
    run_seed: int
    budget: int


@dataclass
class RolloutResult:
    record: MetricRecord
    trajectory: Trajectory


def task_spec(kind: str, seed: int, depth: int, payload_len: int = 8,
              obs_len: int = 400) -> TaskSpec:
    _, spec = build_world(kind, seed, depth, payload_len, obs_len)
    return spec


def run_rollout(job: RolloutJob, model: ICAE | None, max_action_tokens: int = 96,
                record_timing: bool = False, bleu_smoothing: bool = False) -> RolloutResult:
    """One episode plus its metric record.

    ``model=None`` runs the scripted expert. Model agents get the slot
    budget clipped to the decoder's positions.
    """
    env = TaskEnv(job.spec)
    expert = job.spec.params["expert_actions"]
    t0 = time.perf_counter()
    if model is None:
        traj = rollout(ScriptedAgent(env=env), env, job.policy, job.budget)
    else:
        budget = min(job.budget, model.cfg.max_positions)
        with ag.no_grad():
            traj = rollout(ModelAgent(model, max_action_tokens), env, job.policy, budget, model)
    wall = int(round((time.perf_counter() - t0) * 1000)) if record_timing else 0
    actions = traj.actions()
    b = bleu_ref(actions, expert, smooth=bleu_smoothing)
    resolved = int(env.resolved)
    rate = model.rate if model is not None else 4.0
    max_chunk = model.max_chunk() if model is not None else None
    rec = MetricRecord(
        run_id=f"{job.model_name}/{job.policy.label}/r{job.run_seed}",
        task_id=job.spec.task_id,
        bleu=float("nan") if b is None else b,
        exact_match=int(actions == list(expert[: len(actions)]) and len(actions) == len(expert)),
        pass_at=int(b is not None and b >= 0.8),
        resolved=resolved,
        steps=len(actions),
        eff_rate=effective_compression_rate(traj, job.policy, rate, max_chunk),
        wall_ms=wall,
        model=job.model_name,
        policy=job.policy.label,
        depth=job.spec.depth,
    )
    return RolloutResult(rec, traj)


def sweep_jobs(model_names: Sequence[str], kinds: Sequence[str], depths: Sequence[int],
               policy_kinds: Sequence[str], n_seeds: int, root_seed: int, budget: int,
               tau: int = 256, k: int = 2, pct: float = 50.0, payload_len: int = 8,
               obs_len: int = 400) -> list[RolloutJob]:
    """Full grid in a fixed order: model, policy, depth, kind, run."""
    jobs = []
    for name, pk, d, kind, r in itertools.product(model_names, policy_kinds, depths, kinds,
                                                  range(n_seeds)):
        task_seed = derive_seed(root_seed, f"task/{kind}/{d}/{r}") % 2**31
        policy = make_policy(pk, tau, k, pct, seed=derive_seed(root_seed, f"policy/{r}") % 2**31)
        jobs.append(RolloutJob(name, task_spec(kind, task_seed, d, payload_len, obs_len),
                               policy, r, budget))
    return jobs


def hypothesis_sweep(models: Mapping[str, ICAE | None], kinds: Sequence[str],
                     depths: Sequence[int], policy_kinds: Sequence[str], n_seeds: int,
                     root_seed: int = 0, budget: int = 4096, tau: int = 256, k: int = 2,
                     pct: float = 50.0, payload_len: int = 8, obs_len: int = 400,
                     max_action_tokens: int = 96, record_timing: bool = False,
                     threads: int | None = None,
                     bleu_smoothing: bool = False) -> list[RolloutResult]:
    """Roll out every (model, policy, depth, kind, run) cell.

    Produces ``len(models) * len(policies) * len(depths) * len(kinds) *
    n_seeds`` results in grid order regardless of the pool size.
    """
    jobs = sweep_jobs(list(models), kinds, depths, policy_kinds, n_seeds, root_seed, budget,
                      tau, k, pct, payload_len, obs_len)
    return ordered_map(
        lambda j: run_rollout(j, models[j.model_name], max_action_tokens, record_timing,
                              bleu_smoothing),
        jobs, threads)


# ----------------------------------------------------------------- tables


@dataclass(frozen=True)
class GridRow:
    model: str
    policy: str
    depth: int
    n: int
    resolution_rate: float
    mean_steps: float
    mean_bleu_ref: float
    mean_eff_rate: float


def _nanmean(xs: Sequence[float]) -> float:
    vals = [x for x in xs if not math.isnan(x)]
    return float(np.mean(vals)) if vals else float("nan")


def resolution_grid(records: Sequence[MetricRecord]) -> list[GridRow]:
    """Per (model, policy, depth) cell, in first-seen order."""
    cells: dict[tuple[str, str, int], list[MetricRecord]] = {}
    for r in records:
        cells.setdefault((r.model, r.policy, r.depth), []).append(r)
    return [
        GridRow(m, p, d, len(rs), float(np.mean([r.resolved for r in rs])),
                float(np.mean([r.steps for r in rs])), _nanmean([r.bleu for r in rs]),
                float(np.mean([r.eff_rate for r in rs])))
        for (m, p, d), rs in cells.items()
    ]


@dataclass(frozen=True)
class WelchRow:
    within: str  # the fixed factor: model for policy pairs, policy for model pairs
    metric: str
    group_a: str
    group_b: str
    n_a: int
    n_b: int
    mean_a: float
    mean_b: float
    t: float
    df: float
    p: float
    note: str


def per_run_means(records: Sequence[MetricRecord], metric: str) -> dict[tuple[str, str], list[float]]:
    """Metric averaged within each run, keyed by (model, policy); one value per run."""
    runs: dict[tuple[str, str, str], list[float]] = {}
    for r in records:
        runs.setdefault((r.model, r.policy, r.run_id), []).append(float(getattr(r, metric)))
    out: dict[tuple[str, str], list[float]] = {}
    for (m, p, _), vals in runs.items():
        out.setdefault((m, p), []).append(_nanmean(vals))
    return out


def welch_comparisons(records: Sequence[MetricRecord],
                      metrics: Sequence[str] = ("resolved", "bleu", "steps", "eff_rate")) -> list[WelchRow]:
    """Welch tests between every pair of policy columns, per model and metric.

    Samples are per-run means. Pairs where the test is undefined (fewer than
    two runs, or zero variance on both sides) get NaN statistics and a note.
    """
    rows = []
    for metric in metrics:
        groups = per_run_means(records, metric)
        models = list(dict.fromkeys(m for m, _ in groups))
        for model in models:
            pols = [p for m, p in groups if m == model]
            for a, b in itertools.combinations(pols, 2):
                xa = [v for v in groups[(model, a)] if not math.isnan(v)]
                xb = [v for v in groups[(model, b)] if not math.isnan(v)]
                ma = float(np.mean(xa)) if xa else float("nan")
                mb = float(np.mean(xb)) if xb else float("nan")
                try:
                    w = welch_t(xa, xb)
                    t, df, p, note = w.t, w.df, w.p, ""
                except DegenerateSampleError as e:
                    t = df = p = float("nan")
                    note = "degenerate: " + str(e)
                rows.append(WelchRow(model, metric, a, b, len(xa), len(xb), ma, mb, t, df, p, note))
    return rows


def checkpoint_comparisons(records: Sequence[MetricRecord],
                           metrics: Sequence[str] = ("resolved", "bleu", "steps", "eff_rate")) -> list[WelchRow]:
    """Welch tests between models under the same policy."""
    swapped = [
        MetricRecord(**{**r.__dict__, "model": r.policy, "policy": r.model}) for r in records
    ]
    return welch_comparisons(swapped, metrics)


def welch_text(rows: Sequence[WelchRow]) -> str:
    """Fixed-width plain-text report."""
    head = f"{'within':<14} {'metric':<11} {'a':<14} {'b':<14} {'mean_a':>9} {'mean_b':>9} " \
           f"{'t':>9} {'df':>8} {'p':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        stats = "degenerate" if r.note else f"{r.t:>9.4f} {r.df:>8.3f} {r.p:>9.4g}"
        lines.append(f"{r.within:<14} {r.metric:<11} {r.group_a:<14} {r.group_b:<14} "
                     f"{r.mean_a:>9.4f} {r.mean_b:>9.4f} {stats}")
    return "\n".join(lines) + "\n"
