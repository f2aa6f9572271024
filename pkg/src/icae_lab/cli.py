"""Command-line entry point: ``icae-lab <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes ``manifest.json`` into its output directory before it
starts and finalises it when it ends.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import plotting
from . import tokenizer as tok
from .agentic import dump_trajectories, load_trajectories
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, derive_seed, load_config
from .data import (
    DatasetError,
    QASample,
    build_qa_set,
    corpus_stream,
    pretrain_windows,
    read_corpus,
    synthetic_qa,
)
from .envs import replay
from .icae import (
    ICAE,
    TrainState,
    compress,
    decode_with_memory,
    n_memory_slots,
    split_chunks,
)
from .metrics import (
    MetricRecord,
    exact_match,
    pass_at_bleu,
    records_to_csv,
    rows_to_csv,
    text_bleu,
    trajectory_stats,
)
from .model import ModelConfig, ParamStore, pretrain_base
from .sweep import (
    ORACLE,
    RolloutJob,
    checkpoint_comparisons,
    hypothesis_sweep,
    make_policy,
    ordered_map,
    resolution_grid,
    run_rollout,
    task_spec,
    welch_comparisons,
    welch_text,
)
from .training import EmptyDatasetError, LossRow, finetune_agentic, finetune_qa, pretrain_icae

log = logging.getLogger("icae_lab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _seed32(root: int, label: str) -> int:
    return derive_seed(root, label) % 2**32


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("icae_lab") / "fixtures" / name))


# ---------------------------------------------------------------- manifest


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _without_out(argv: Sequence[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out":
            skip = True
        elif not a.startswith("--out="):
            out.append(a)
    return out


@dataclass
class RunManifest:
    command: list[str]
    config: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str | None = None
    status: str = "running"
    exit_code: int | None = None

    @property
    def input_hash(self) -> str:
        """Content hash of everything that determines the outputs.

        The output directory is left out: it names where results go, not
        what they are. Input files count by content, not by path.
        """
        h = hashlib.sha256()
        h.update(json.dumps([_without_out(self.command), self.config, self.seed,
                             sorted(self.inputs.values())]).encode())
        return h.hexdigest()

    def add_input(self, path: str | Path) -> None:
        p = Path(path)
        if p.is_dir():
            for f in sorted(p.rglob("*.txt")):
                self.inputs[str(f)] = _sha256_file(f)
        elif p.exists():
            self.inputs[str(p)] = _sha256_file(p)

    def write(self, out: Path) -> None:
        rec = {
            "command": self.command, "seed": self.seed, "config": self.config,
            "inputs": self.inputs, "input_hash": self.input_hash,
            "started": self.started, "finished": self.finished, "status": self.status,
            "exit_code": self.exit_code, "outputs": self.outputs,
        }
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(rec, indent=2) + "\n", encoding="utf-8")


class Run:
    """Output directory plus its manifest; every file goes through here."""

    def __init__(self, out: Path, manifest: RunManifest):
        self.out = out
        self.manifest = manifest

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        self._track(path)
        return path

    def track(self, path: Path) -> Path:
        self._track(path)
        return path

    def _track(self, path: Path) -> None:
        if str(path) not in self.manifest.outputs:
            self.manifest.outputs.append(str(path))


# ----------------------------------------------------------------- models


def _icae_meta(model: ICAE, stage: str, seed: int, cfg: Config) -> dict:
    return {
        "stage": stage,
        "seed": seed,
        "model": model.cfg.to_dict(),
        "icae": {"rate": model.rate, "lora_rank": model.lora_rank,
                 "lora_alpha": model.lora_alpha, "max_memory": model.max_memory},
        "config": cfg.to_text(),
    }


def load_model(path: str | Path) -> ICAE:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    store, meta = load_checkpoint(p)
    if "model" not in meta or "icae" not in meta:
        raise UsageError(f"{p}: not an ICAE checkpoint (missing model metadata)")
    cfg = ModelConfig(**meta["model"])
    ic = meta["icae"]
    return ICAE(cfg, store, ic["rate"], ic["lora_rank"], ic["lora_alpha"])


def base_from_checkpoint(path: str | Path) -> tuple[ModelConfig, ParamStore]:
    """The frozen base inside an ICAE checkpoint, unprefixed."""
    model = load_model(path)
    base = ParamStore()
    for name, t in model.store.items():
        if name.startswith("decoder."):
            base.add(name[len("decoder."):], ag.Tensor(t.data.copy()))
    return model.cfg, base


def _named_checkpoints(specs: Sequence[str] | None, allow_oracle: bool) -> dict[str, ICAE | None]:
    """``NAME=PATH`` or ``PATH`` (named by its stem); ``oracle`` is the scripted expert."""
    out: dict[str, ICAE | None] = {}
    for spec in specs or []:
        if spec == ORACLE:
            if not allow_oracle:
                raise UsageError("the scripted oracle only applies to rollout suites")
            out[ORACLE] = None
            continue
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        if name in out:
            raise UsageError(f"duplicate checkpoint name {name!r}")
        out[name] = load_model(path)
    return out


# ------------------------------------------------------------------ config


def resolve_config(args) -> Config:
    cfg = load_config(args.config)
    pol = cfg.policy
    overrides = {k: getattr(args, k, None) for k in ("tau", "k", "pct")}
    kind = getattr(args, "policy", None)
    cfg.policy = replace(pol, kind=kind or pol.kind,
                         **{k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "runs", None) is not None:
        cfg.eval = replace(cfg.eval, runs=args.runs)
    return cfg.validate()


def _policy(cfg: Config, seed: int):
    p = cfg.policy
    return make_policy(p.kind, p.tau, p.k, p.pct, seed=_seed32(seed, "policy"))


# ---------------------------------------------------------------- outputs


def _loss_outputs(run: Run, rows: Sequence[LossRow]) -> None:
    run.write_text("loss.csv", rows_to_csv(rows, ["step", "objective", "loss"]))
    run.track(plotting.loss_curve(rows, run.out / "loss.png"))


def _save_model(run: Run, model: ICAE, stage: str, seed: int, cfg: Config) -> str:
    path = run.out / "model.ckpt"
    digest = save_checkpoint(model.store, path, _icae_meta(model, stage, seed, cfg))
    run.track(path)
    print(f"checkpoint {path} sha256={digest}")
    return digest


@dataclass(frozen=True)
class RunRow:
    run_id: str
    model: str
    policy: str
    n: int
    resolution_rate: float
    mean_bleu: float
    mean_steps: float
    mean_eff_rate: float


def run_summaries(records: Sequence[MetricRecord]) -> list[RunRow]:
    groups: dict[str, list[MetricRecord]] = {}
    for r in records:
        groups.setdefault(r.run_id, []).append(r)
    rows = []
    for run_id, rs in groups.items():
        bleus = [r.bleu for r in rs if not math.isnan(r.bleu)]
        rows.append(RunRow(run_id, rs[0].model, rs[0].policy, len(rs),
                           float(np.mean([r.resolved for r in rs])),
                           float(np.mean(bleus)) if bleus else float("nan"),
                           float(np.mean([r.steps for r in rs])),
                           float(np.mean([r.eff_rate for r in rs]))))
    return rows


def _eval_outputs(run: Run, records: list[MetricRecord], welch_rows, runs: int,
                  metric: str = "resolved") -> None:
    run.write_text("records.csv", records_to_csv(records))
    run.write_text("summary.csv", rows_to_csv(run_summaries(records)))
    run.write_text("steps.csv", rows_to_csv(trajectory_stats(records)))
    run.track(plotting.steps_boxplot(records, run.out / "steps.png"))
    if runs < 2:
        print("warning: fewer than 2 runs; significance tests skipped", file=sys.stderr)
        return
    if welch_rows:
        run.write_text("welch.csv", rows_to_csv(welch_rows))
        run.write_text("welch.txt", welch_text(welch_rows))
        print(welch_text(welch_rows), end="")
    run.track(plotting.welch_means(records, run.out / "welch.png", metric))


# --------------------------------------------------------------- commands


def cmd_pretrain(args, cfg: Config, run: Run) -> int:
    seed = args.seed
    if cfg.data.corpus:
        docs = read_corpus([cfg.data.corpus])
        run.manifest.add_input(cfg.data.corpus)
    else:
        corpus = fixture_path("notes_corpus.txt")
        docs = read_corpus([corpus])
        run.manifest.add_input(corpus)
    rows: list[LossRow] = []
    if args.checkpoint:
        run.manifest.add_input(args.checkpoint)
        mcfg, base = base_from_checkpoint(args.checkpoint)
        print(f"base: reused from {args.checkpoint}")
    else:
        mcfg = cfg.model
        base, hist = pretrain_base(
            corpus_stream(docs), mcfg, cfg.base.steps, seed=_seed32(seed, "base"),
            lr=cfg.base.lr, window=cfg.base.window, warmup=cfg.base.warmup,
            log_every=cfg.pretrain.log_every)
        rows += [LossRow(s, "base", loss) for s, loss in hist]
    ic = cfg.icae
    model = ICAE.from_base(mcfg, base, ic.rate, ic.lora_rank, ic.lora_alpha, ic.max_memory,
                           seed=_seed32(seed, "encoder-init"))
    windows = pretrain_windows(docs, min(cfg.pretrain.window, model.max_chunk()))
    p = cfg.pretrain
    state = TrainState(model, p.lr, p.warmup, p.grad_accum, p.weight_decay)
    objectives = tuple(o.strip() for o in p.objectives.split(","))
    before = model.decoder_checksum()
    rows += pretrain_icae(model, windows, p.steps, state, _seed32(seed, "pretrain"),
                          objectives, p.log_every)
    if model.decoder_checksum() != before:
        raise RuntimeError("decoder weights changed during encoder training")
    _loss_outputs(run, rows)
    _save_model(run, model, "pretrain", seed, cfg)
    return EXIT_OK


def _require_checkpoint(args, run: Run) -> ICAE:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model = load_model(args.checkpoint)
    run.manifest.add_input(args.checkpoint)
    return model


def expert_trajectories(cfg: Config, seed: int):
    """Scripted expert runs over the configured task kinds and depths."""
    kinds, depths = cfg.eval.kind_list(), cfg.eval.depth_list()
    out = []
    for i in range(cfg.data.train_tasks):
        kind = kinds[i % len(kinds)]
        depth = depths[(i // len(kinds)) % len(depths)]
        spec = task_spec(kind, _seed32(seed, f"train-task/{i}") % 2**31, depth,
                         cfg.eval.payload_len, cfg.eval.obs_len)
        out.append(replay(spec, spec.params["expert_actions"]))
    return out


def _qa_samples(cfg: Config, run: Run) -> list[QASample]:
    path = Path(cfg.data.qa) if cfg.data.qa else fixture_path("qa_fixture.jsonl")
    run.manifest.add_input(path)
    return build_qa_set(path)


def answer_question(model: ICAE, sample: QASample, max_new: int = 64) -> str:
    with ag.no_grad():
        spans = [compress(model, c, grad=False)
                 for c in split_chunks(tok.tokenize(sample.context), model.max_chunk())]
        ids = decode_with_memory(model, spans, "QA", tok.tokenize(sample.question), max_new)
    return tok.detokenize([i for i in ids if i < tok.N_BYTES])


def cmd_finetune(args, cfg: Config, run: Run) -> int:
    model = _require_checkpoint(args, run)
    seed = args.seed
    f = cfg.finetune
    state = TrainState(model, f.lr, f.warmup, f.grad_accum, f.weight_decay)
    before = model.decoder_checksum()
    if args.mode == "qa":
        samples = _qa_samples(cfg, run)
        rows = finetune_qa(model, samples, f.steps, state, _seed32(seed, "finetune-qa"),
                           f.log_every)
        em = np.mean([exact_match(answer_question(model, s), s.answer) for s in samples])
        print(f"train EM {em:.4f} over {len(samples)} samples")
    else:
        if cfg.data.trajectories:
            path = Path(cfg.data.trajectories)
            run.manifest.add_input(path)
            trajs = load_trajectories(path.read_text(encoding="utf-8"))
        else:
            trajs = expert_trajectories(cfg, seed)
            run.write_text("train_trajectories.jsonl", dump_trajectories(trajs))
        rows = finetune_agentic(model, trajs, _policy(cfg, seed), f.steps, state,
                                _seed32(seed, "finetune-agentic"), f.log_every)
    if model.decoder_checksum() != before:
        raise RuntimeError("decoder weights changed during fine-tuning")
    _loss_outputs(run, rows)
    _save_model(run, model, f"finetune-{args.mode}", seed, cfg)
    return EXIT_OK


def _qa_eval(models: dict[str, ICAE], cfg: Config, seed: int, run: Run) -> list[MetricRecord]:
    smooth = cfg.eval.bleu_smoothing
    base = _qa_samples(cfg, run) if cfg.data.qa else None
    records = []
    for r in range(cfg.eval.runs):
        if base is None:
            samples = synthetic_qa(_seed32(seed, f"eval-qa/{r}"), cfg.eval.tasks)
        else:
            rng = np.random.default_rng(_seed32(seed, f"eval-qa/{r}"))
            samples = [base[int(i)] for i in rng.integers(len(base), size=len(base))]
        for name, model in models.items():
            preds = ordered_map(lambda s: answer_question(model, s), samples)
            for i, (s, pred) in enumerate(zip(samples, preds)):
                n_ctx, n_q = tok.token_len(s.context), tok.token_len(s.question)
                em = exact_match(pred, s.answer)
                records.append(MetricRecord(
                    run_id=f"{name}/qa/r{r}", task_id=f"qa-r{r}-{i}",
                    bleu=text_bleu(pred, s.answer, smooth=smooth) if pred.strip() else 0.0,
                    exact_match=em, pass_at=pass_at_bleu(pred, s.answer), resolved=em,
                    steps=1,
                    eff_rate=(n_ctx + n_q) / (n_memory_slots(n_ctx, model.rate) + n_q),
                    wall_ms=0, model=name, policy="qa", depth=0))
    return records


def _rollout_jobs(names: Sequence[str], cfg: Config, seed: int) -> list[RolloutJob]:
    e = cfg.eval
    kinds, depths = e.kind_list(), e.depth_list()
    jobs = []
    for name in names:
        for r in range(e.runs):
            policy = make_policy(cfg.policy.kind, cfg.policy.tau, cfg.policy.k, cfg.policy.pct,
                                 seed=_seed32(seed, f"policy/{r}") % 2**31)
            for i in range(e.tasks):
                kind = kinds[i % len(kinds)]
                depth = depths[(i // len(kinds)) % len(depths)]
                spec = task_spec(kind, _seed32(seed, f"eval-task/{i}/{r}") % 2**31, depth,
                                 e.payload_len, e.obs_len)
                jobs.append(RolloutJob(name, spec, policy, r, e.budget))
    return jobs


def cmd_eval(args, cfg: Config, run: Run) -> int:
    seed, e = args.seed, cfg.eval
    suite = args.suite
    models = _named_checkpoints(args.checkpoint, allow_oracle=suite != "qa")
    for spec in args.checkpoint or []:
        if spec != ORACLE:
            run.manifest.add_input(spec.partition("=")[2] or spec)
    if suite == "qa":
        if not models:
            raise UsageError("eval qa needs at least one --checkpoint")
        records = _qa_eval(models, cfg, seed, run)
        _eval_outputs(run, records, checkpoint_comparisons(records, ("exact_match", "bleu")),
                      e.runs, metric="exact_match")
        return EXIT_OK
    if suite == "sweep":
        # the scripted oracle is always present as the control row
        models = {ORACLE: None, **{k: v for k, v in models.items() if k != ORACLE}}
        results = hypothesis_sweep(
            models, e.kind_list(), e.depth_list(), e.policy_list(), e.runs, seed, e.budget,
            cfg.policy.tau, cfg.policy.k, cfg.policy.pct, e.payload_len, e.obs_len,
            e.max_action_tokens, e.record_timing, bleu_smoothing=e.bleu_smoothing)
    else:
        if not models:
            raise UsageError("eval rollout needs --checkpoint (a path, NAME=PATH or 'oracle')")
        jobs = _rollout_jobs(list(models), cfg, seed)
        results = ordered_map(
            lambda j: run_rollout(j, models[j.model_name], e.max_action_tokens, e.record_timing,
                                  e.bleu_smoothing),
            jobs)
    records = [r.record for r in results]
    run.write_text("trajectories.jsonl", dump_trajectories(r.trajectory for r in results))
    welch = checkpoint_comparisons(records) if len(models) > 1 else []
    if suite == "sweep":
        welch = welch_comparisons(records) + welch
        run.write_text("grid.csv", rows_to_csv(resolution_grid(records)))
    _eval_outputs(run, records, welch, e.runs)
    for row in resolution_grid(records):
        print(f"{row.model:<10} {row.policy:<14} depth {row.depth}: "
              f"resolved {row.resolution_rate:.2f} over {row.n}, mean steps {row.mean_steps:.2f}")
    return EXIT_OK


def cmd_rollout(args, cfg: Config, run: Run) -> int:
    """One episode, printed as a transcript."""
    if not args.checkpoint or args.checkpoint == ORACLE:
        name, model = ORACLE, None
    else:
        model = _require_checkpoint(args, run)
        name = Path(args.checkpoint).stem
    e = cfg.eval
    spec = task_spec(args.task, args.task_seed, args.depth, e.payload_len, e.obs_len)
    job = RolloutJob(name, spec, _policy(cfg, args.seed), 0, e.budget)
    res = run_rollout(job, model, e.max_action_tokens, e.record_timing, e.bleu_smoothing)
    for st in res.trajectory.steps:
        text = st.text if len(st.text) <= 240 else st.text[:240] + f"... [{len(st.text)} chars]"
        print(f"[{st.index}] {st.role}: {text}")
    print(f"outcome: {res.trajectory.outcome}; steps {res.record.steps}; "
          f"BLEU_ref {res.record.bleu:.4f}; effective rate {res.record.eff_rate:.4f}")
    run.write_text("trajectory.jsonl", dump_trajectories([res.trajectory]))
    run.write_text("records.csv", records_to_csv([res.record]))
    return EXIT_OK


def _token_diff(src: list[int], rec: list[int]) -> list[str]:
    lines = []
    sm = difflib.SequenceMatcher(a=src, b=rec, autojunk=False)
    for op, i1, i2, j1, j2 in sm.get_opcodes():
        if op == "equal":
            continue
        a = tok.detokenize(src[i1:i2])
        b = tok.detokenize(rec[j1:j2])
        lines.append(f"  @{i1}: {op} -{a!r} +{b!r}")
    return lines


def inspect_report(model: ICAE, text: str) -> tuple[str, float]:
    """Reconstruction report for ``text`` and its positional token accuracy."""
    ids = tok.tokenize(text)
    if not ids:
        raise UsageError("nothing to inspect: empty text")
    chunks = split_chunks(ids, model.max_chunk())
    m_total = sum(n_memory_slots(len(c), model.rate) for c in chunks)
    lines = [f"n={len(ids)} m={m_total} rho={model.rate:g} chunks={len(chunks)}"]
    hits = total = 0
    recon_all: list[int] = []
    for ci, chunk in enumerate(chunks):
        with ag.no_grad():
            span = compress(model, chunk, grad=False)
            out = decode_with_memory(model, [span], "AE", (), len(chunk) + 8)
        rec = [i for i in out if i != tok.END_RECON]
        recon_all += rec
        h = sum(1 for a, b in zip(chunk, rec) if a == b)
        hits += h
        total += max(len(chunk), len(rec))
        if len(chunks) > 1:
            lines.append(f"chunk {ci}: n={len(chunk)} m={span.m} "
                         f"accuracy={h / max(len(chunk), len(rec)):.4f}")
        lines += _token_diff(chunk, rec)
    acc = hits / total
    if len(lines) == 1 + (len(chunks) if len(chunks) > 1 else 0):
        lines.append("diff: none")
    lines.append(f"reconstruction: {tok.detokenize(recon_all)!r}")
    lines.append(f"token accuracy: {acc:.4f}")
    return "\n".join(lines) + "\n", acc


def cmd_inspect(args, cfg: Config, run: Run) -> int:
    model = _require_checkpoint(args, run)
    if args.text is not None:
        text = args.text
    elif args.file:
        if args.file == "-":
            text = sys.stdin.read()
        else:
            path = Path(args.file)
            if not path.is_file():
                raise UsageError(f"file not found: {path}")
            run.manifest.add_input(path)
            text = path.read_text(encoding="utf-8")
    else:
        raise UsageError("inspect needs --text or --file")
    report, _ = inspect_report(model, text)
    print(report, end="")
    run.write_text("inspect.txt", report)
    return EXIT_OK


def cmd_sweep(args, cfg: Config, run: Run) -> int:
    args.suite = "sweep"
    return cmd_eval(args, cfg, run)


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="INI-style run configuration")
    p.add_argument("--seed", type=int, default=0, metavar="N", help="root seed (default 0)")
    p.add_argument("--out", metavar="DIR", help="output directory (default runs/<command>)")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")


def _policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", choices=["none", "threshold", "last_k", "random_pct"])
    p.add_argument("--tau", type=int, metavar="N", help="threshold policy token cutoff")
    p.add_argument("--k", type=int, metavar="N", help="last_k policy window")
    p.add_argument("--pct", type=float, metavar="N", help="random_pct policy percentage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icae-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain the base model, then the encoder (AE/LM)")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH",
                   help="reuse the frozen base from this checkpoint instead of pretraining one")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the encoder on QA or agentic trajectories")
    p.add_argument("mode", choices=["qa", "agentic"])
    _common(p)
    _policy_flags(p)
    p.add_argument("--checkpoint", metavar="PATH", help="pretrained checkpoint")
    p.set_defaults(fn=cmd_finetune)

    for name, helptext in (("eval", "evaluate checkpoints over a suite"),
                           ("sweep", "policy x depth hypothesis sweep")):
        p = sub.add_parser(name, help=helptext)
        if name == "eval":
            p.add_argument("suite", choices=["qa", "rollout", "sweep"])
        _common(p)
        _policy_flags(p)
        p.add_argument("--checkpoint", action="append", metavar="[NAME=]PATH",
                       help="checkpoint to evaluate (repeatable); 'oracle' is the scripted expert")
        p.add_argument("--runs", type=int, metavar="N", help="independent runs (seeds)")
        p.set_defaults(fn=cmd_eval if name == "eval" else cmd_sweep)

    p = sub.add_parser("rollout", help="run one episode and print its transcript")
    _common(p)
    _policy_flags(p)
    p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (default: oracle)")
    p.add_argument("--task", default="keychain",
                   choices=["keychain", "secret_command", "patch_fix"])
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--task-seed", type=int, default=0)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("inspect", help="compress text and show the reconstruction diff")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--text")
    src.add_argument("--file", metavar="PATH", help="text file, or - for stdin")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out or Path("runs") / args.command)
    manifest = RunManifest(["icae-lab"] + argv, cfg.to_text(), args.seed, started=_now())
    if args.config:
        manifest.add_input(args.config)
    run = Run(out, manifest)
    manifest.write(out)
    try:
        code = args.fn(args, cfg, run)
    except (UsageError, ConfigError, DatasetError, EmptyDatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except Exception as e:  # runtime failure: report, keep the manifest honest
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    manifest.finished = _now()
    manifest.exit_code = code
    manifest.status = "ok" if code == EXIT_OK else "failed"
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
