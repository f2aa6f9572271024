"""Evaluation statistics: BLEU family, exact match, Welch's t-test, step stats."""

from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

_WORD = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DegenerateSampleError(ValueError):
    pass


def metric_tokens(text: str) -> list[str]:
    """Whitespace + punctuation split used for every text metric."""
    return _WORD.findall(text)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4,
         smooth: bool = False) -> float:
    """Sentence BLEU with one reference.

    Geometric mean of clipped n-gram precisions (orders 1..max_n) times the
    brevity penalty. Without smoothing any zero precision gives 0; with
    ``smooth`` orders above one use add-one counts. Orders longer than the
    candidate have no n-grams and are left out of the mean, so a short
    candidate scored against itself still gets 1.
    """
    if not reference:
        raise ValueError("reference must be non-empty")
    c, r = len(candidate), len(reference)
    if c == 0:
        return 0.0
    orders = min(max_n, c)
    log_p = 0.0
    for n in range(1, orders + 1):
        cand = _ngrams(candidate, n)
        ref = _ngrams(reference, n)
        total = max(c - n + 1, 0)
        hits = sum(min(k, ref[g]) for g, k in cand.items())
        if smooth and n > 1:
            hits, total = hits + 1, total + 1
        if hits == 0 or total == 0:
            return 0.0
        log_p += math.log(hits / total) / orders
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def text_bleu(candidate: str, reference: str, **kw) -> float:
    return bleu(metric_tokens(candidate), metric_tokens(reference), **kw)


def exact_match(candidate: str, reference: str) -> int:
    return int(candidate.strip() == reference.strip())


# ------------------------------------------------------------ Pass@BLEU

_FENCE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)

COMMENT_PREFIXES = {
    "python": ("#",), "py": ("#",), "sh": ("#",), "bash": ("#",), "shell": ("#",),
    "ruby": ("#",), "r": ("#",), "yaml": ("#",), "toml": ("#",),
    "c": ("//",), "cpp": ("//",), "c++": ("//",), "java": ("//",), "javascript": ("//",),
    "js": ("//",), "typescript": ("//",), "ts": ("//",), "go": ("//",), "rust": ("//",),
    "kotlin": ("//",), "swift": ("//",), "scala": ("//",), "php": ("//", "#"),
    "sql": ("--",), "lua": ("--",), "haskell": ("--",),
}
_DEFAULT_PREFIXES = ("#", "//")


def extract_code(text: str) -> tuple[str, str]:
    """First fenced block as ``(language_tag, body)``; whole text if none."""
    m = _FENCE.search(text)
    if not m:
        return "", text
    return m.group(1).strip().lower(), m.group(2)


def strip_comments(code: str, lang: str = "") -> str:
    """Drop full-line comments and trailing comments outside string literals."""
    prefixes = COMMENT_PREFIXES.get(lang, _DEFAULT_PREFIXES)
    out = []
    for line in code.splitlines():
        cut = _comment_start(line, prefixes)
        line = line[:cut].rstrip() if cut is not None else line.rstrip()
        if line.strip():
            out.append(line)
    return "\n".join(out)


def _comment_start(line: str, prefixes: Sequence[str]) -> int | None:
    quote = None
    i = 0
    while i < len(line):
        ch = line[i]
        if quote:
            if ch == "\\":
                i += 2
                continue
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        else:
            for p in prefixes:
                if line.startswith(p, i):
                    return i
        i += 1
    return None


def normalize_code(text: str) -> str:
    lang, body = extract_code(text)
    return strip_comments(body, lang)


def pass_at_bleu(candidate: str, reference: str, threshold: float = 0.8) -> int:
    cand = metric_tokens(normalize_code(candidate))
    ref = metric_tokens(normalize_code(reference))
    if not ref:
        return int(not cand)
    return int(bleu(cand, ref) >= threshold)


# -------------------------------------------------------------- BLEU_ref


def bleu_ref(actions, expert_actions, smooth: bool = False) -> float | None:
    """Mean per-index action BLEU over the aligned prefix; None if either is empty.

    Arguments are action-string lists or trajectories.
    """
    if hasattr(actions, "actions"):
        actions = actions.actions()
    if hasattr(expert_actions, "actions"):
        expert_actions = expert_actions.actions()
    k = min(len(actions), len(expert_actions))
    if k == 0:
        return None
    return sum(text_bleu(actions[i], expert_actions[i], smooth=smooth) for i in range(k)) / k


# ----------------------------------------------------------------- Welch


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 500) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t."""
    if t == 0:
        return 1.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float


def welch_t(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateSampleError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va == 0 and vb == 0:
        raise DegenerateSampleError("both samples have zero variance")
    se2 = va + vb
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    # rescale before squaring so tiny variances do not underflow to 0/0
    s = max(va, vb)
    ra, rb = va / s, vb / s
    df = float((ra + rb) ** 2 / (ra**2 / (a.size - 1) + rb**2 / (b.size - 1)))
    return WelchResult(t, df, t_sf_two_sided(t, df))


# --------------------------------------------------------------- records


@dataclass
class MetricRecord:
    run_id: str
    task_id: str
    bleu: float
    exact_match: int
    pass_at: int
    resolved: int
    steps: int
    eff_rate: float
    wall_ms: int
    model: str = ""
    policy: str = ""
    depth: int = 0

    def __post_init__(self):
        # NaN marks a missing score (no actions to compare)
        if not (math.isnan(self.bleu) or 0.0 <= self.bleu <= 1.0):
            raise ValueError(f"bleu out of range: {self.bleu}")
        for name in ("exact_match", "pass_at", "resolved"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")
        if self.steps < 0 or self.wall_ms < 0:
            raise ValueError("steps and wall_ms must be non-negative")


RECORD_COLUMNS = [f.name for f in fields(MetricRecord)]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records: Iterable[MetricRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in RECORD_COLUMNS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    types = {f.name: f.type for f in fields(MetricRecord)}
    for row in rows:
        kw = {}
        for k, v in row.items():
            t = types[k]
            kw[k] = float(v) if t == "float" else int(v) if t == "int" else v
        out.append(MetricRecord(**kw))
    return out


@dataclass(frozen=True)
class RunSummary:
    key: str
    n: int
    mean: float
    variance: float | None


def summarize(values: Mapping[str, Sequence[float]]) -> list[RunSummary]:
    out = []
    for key in sorted(values):
        v = np.asarray(values[key], dtype=np.float64)
        out.append(RunSummary(key, int(v.size), float(v.mean()),
                              float(v.var(ddof=1)) if v.size >= 2 else None))
    return out


@dataclass(frozen=True)
class StepStats:
    model: str
    policy: str
    n: int
    mean: float
    q1: float
    median: float
    q3: float


def trajectory_stats(records: Sequence[MetricRecord]) -> list[StepStats]:
    """Step-count distribution per (model, policy), sorted by key."""
    if not records:
        raise ValueError("no records")
    groups: dict[tuple[str, str], list[int]] = {}
    for r in records:
        groups.setdefault((r.model, r.policy), []).append(r.steps)
    out = []
    for (model, policy), steps in sorted(groups.items()):
        s = np.asarray(steps, dtype=np.float64)
        q1, med, q3 = np.percentile(s, [25, 50, 75])
        out.append(StepStats(model, policy, int(s.size), float(s.mean()), float(q1),
                             float(med), float(q3)))
    return out


def rows_to_csv(rows: Sequence, header: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if rows and header is None:
        header = list(asdict(rows[0]))
    if header:
        w.writerow(header)
    for r in rows:
        vals = asdict(r).values() if hasattr(r, "__dataclass_fields__") else r
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue()
