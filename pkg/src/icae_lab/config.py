"""Run configuration: INI-style ``key = value`` text with sections.

Every section maps onto a dataclass; unknown sections or keys are errors.
Defaults are desk-scale. :data:`FULL_SCALE` lists the full-scale training
hyperparameters for reference; :func:`full_scale_preset` applies the
optimizer part of them to the small model.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .envs import TASK_KINDS
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class IcaeSection:
    rate: float = 4.0
    lora_rank: int = 8
    lora_alpha: float = 32.0
    max_memory: int = 128


@dataclass
class BaseSection:
    steps: int = 300
    lr: float = 3e-3
    window: int = 256
    warmup: int = 100


@dataclass
class PretrainSection:
    steps: int = 200
    lr: float = 1e-3
    batch_size: int = 1
    grad_accum: int = 8
    warmup: int = 300
    window: int = 256
    weight_decay: float = 0.0
    log_every: int = 10
    objectives: str = "AE,LM"


@dataclass
class FinetuneSection:
    steps: int = 200
    lr: float = 1e-3
    batch_size: int = 1
    grad_accum: int = 1
    warmup: int = 300
    weight_decay: float = 0.0
    log_every: int = 10


@dataclass
class PolicySection:
    kind: str = "threshold"
    tau: int = 256
    k: int = 2
    pct: float = 50.0


@dataclass
class EvalSection:
    runs: int = 5
    tasks: int = 4
    kinds: str = "keychain,secret_command,patch_fix"
    depths: str = "1,2,3,4"
    budget: int = 4096
    obs_len: int = 400
    payload_len: int = 8
    max_action_tokens: int = 96
    policies: str = "none,threshold,last_k,random_pct"
    record_timing: bool = False
    bleu_smoothing: bool = False

    def kind_list(self) -> list[str]:
        return [x.strip() for x in self.kinds.split(",") if x.strip()]

    def policy_list(self) -> list[str]:
        return [x.strip() for x in self.policies.split(",") if x.strip()]

    def depth_list(self) -> list[int]:
        try:
            return [int(x) for x in self.depths.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"eval.depths must be comma-separated integers, got {self.depths!r}") from None


@dataclass
class DataSection:
    corpus: str = ""  # empty: the bundled notes fixture
    qa: str = ""
    trajectories: str = ""
    train_tasks: int = 24


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    icae: IcaeSection = field(default_factory=IcaeSection)
    base: BaseSection = field(default_factory=BaseSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    policy: PolicySection = field(default_factory=PolicySection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)

    def validate(self) -> "Config":
        if self.icae.rate < 1:
            raise ConfigError("icae.rate must be >= 1")
        if self.icae.lora_rank < 1 or self.icae.max_memory < 1:
            raise ConfigError("icae.lora_rank and icae.max_memory must be >= 1")
        for sec in (self.base, self.pretrain, self.finetune):
            if sec.steps < 0 or sec.lr <= 0 or sec.warmup < 0:
                raise ConfigError("steps/warmup must be >= 0 and lr > 0")
        for sec in (self.pretrain, self.finetune):
            if sec.batch_size != 1:
                raise ConfigError("only batch_size = 1 is supported")
            if sec.grad_accum < 1:
                raise ConfigError("grad_accum must be >= 1")
        if self.policy.kind not in ("none", "threshold", "last_k", "random_pct"):
            raise ConfigError(f"unknown policy kind {self.policy.kind!r}")
        if self.policy.tau < 1 or self.policy.k < 0 or not 0 <= self.policy.pct <= 100:
            raise ConfigError("policy parameters out of range")
        if self.eval.runs < 1 or self.eval.budget < 1 or self.eval.tasks < 1:
            raise ConfigError("eval.runs, eval.tasks and eval.budget must be >= 1")
        if self.data.train_tasks < 1:
            raise ConfigError("data.train_tasks must be >= 1")
        for o in self.pretrain.objectives.split(","):
            if o.strip() not in ("AE", "LM"):
                raise ConfigError(f"unknown pretrain objective {o.strip()!r}")
        _split_names(self.eval.kinds, TASK_KINDS, "eval.kinds")
        _split_names(self.eval.policies, ("none", "threshold", "last_k", "random_pct"),
                     "eval.policies")
        depths = self.eval.depth_list()
        if any(d < 1 for d in depths):
            raise ConfigError("eval.depths must be >= 1")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"[{f.name}]")
            for k, v in asdict(getattr(self, f.name)).items():
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)


def _split_names(raw: str, allowed, where: str) -> list[str]:
    names = [x.strip() for x in raw.split(",") if x.strip()]
    if not names:
        raise ConfigError(f"{where} is empty")
    for n in names:
        if n not in allowed:
            raise ConfigError(f"{where}: unknown name {n!r}")
    return names


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(raw: str, typ: str, where: str):
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {typ}") from None
    return raw.strip()


def _section_types(cls) -> dict[str, str]:
    return {f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in fields(cls)}


def parse_config(text: str, source: str = "<config>") -> Config:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    cfg = Config()
    known = {f.name: f for f in fields(Config)}
    values: dict[str, dict] = {}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        section_cls = type(getattr(cfg, sec))
        types = _section_types(section_cls)
        vals = {}
        for key, raw in cp.items(sec):
            if key not in types:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
            vals[key] = _convert(raw, types[key], f"{source} [{sec}] {key}")
        values[sec] = vals
    for sec, vals in values.items():
        current = asdict(getattr(cfg, sec))
        current.update(vals)
        try:
            setattr(cfg, sec, type(getattr(cfg, sec))(**current))
        except ValueError as e:
            raise ConfigError(f"{source} [{sec}]: {e}") from None
    return cfg.validate()


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config().validate()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
    return parse_config(text, str(p))


FULL_SCALE = {
    "pretrain": {"optimizer": "AdamW", "lr": 1e-4, "batch_size": 1, "grad_accum": 8,
                 "lora_rank": 128, "lora_alpha": 32, "targets": ("q_proj", "v_proj"),
                 "warmup": 300, "steps": 100_000},
    "finetune": {"optimizer": "AdamW", "lr": 5e-5, "batch_size": 1, "grad_accum": 1,
                 "lora_rank": 128, "lora_alpha": 32, "targets": ("q_proj", "v_proj"),
                 "warmup": 300, "steps": {"squad": 10_000, "repoqa": 4_000, "swe": 150_000}},
}


def full_scale_preset() -> Config:
    """Full-scale optimizer settings on the desk-scale model."""
    cfg = Config()
    cfg.icae.lora_rank = 128
    cfg.pretrain.lr, cfg.pretrain.grad_accum, cfg.pretrain.warmup = 1e-4, 8, 300
    cfg.finetune.lr, cfg.finetune.grad_accum, cfg.finetune.warmup = 5e-5, 1, 300
    return cfg.validate()


def derive_seed(root: int, label: str) -> int:
    """Independent 63-bit stream seed for a named component."""
    h = hashlib.sha256(f"{root}:{label}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1
