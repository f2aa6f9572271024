"""Corpus ingestion and dataset builders for pretraining, QA and trajectories."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .icae import PretrainSample, make_pretrain_sample, sample_objective
from .tokenizer import tokenize


class DatasetError(ValueError):
    pass


# ------------------------------------------------------------------ corpus

_SUBJECTS = [
    "the parser", "the scheduler", "the cache layer", "the test runner", "the build script",
    "the config loader", "the logging module", "the request handler", "the worker pool",
    "the migration tool", "the file watcher", "the command line tool", "the plugin loader",
    "the index", "the serializer", "the retry policy", "the session store", "the linter",
]
_VERBS = [
    "reads", "writes", "validates", "rejects", "caches", "rebuilds", "skips", "parses",
    "formats", "loads", "flushes", "retries", "renames", "splits", "merges", "sorts",
]
_OBJECTS = [
    "the settings file", "every pending job", "the lock file", "stale entries", "the manifest",
    "all input paths", "the response body", "broken symlinks", "the version string",
    "empty lines", "the error log", "duplicate keys", "the output directory", "unicode names",
    "the checksum table", "the header row", "old snapshots", "the user config",
]
_CLAUSES = [
    "before the first request", "when the timeout expires", "after each commit",
    "unless the flag is set", "on every restart", "while the queue is full",
    "if the path is missing", "during shutdown", "once per minute", "when tests fail",
]
_PATHS = ["src/app.py", "lib/util.py", "setup.cfg", "docs/index.md", "tests/test_io.py",
          "tools/run.sh", "conf/base.toml", "README.md", "Makefile", "src/cli.py"]


def _sentence(rng: np.random.Generator) -> str:
    pick = lambda xs: xs[int(rng.integers(len(xs)))]
    form = int(rng.integers(5))
    s, v, o, c = pick(_SUBJECTS), pick(_VERBS), pick(_OBJECTS), pick(_CLAUSES)
    if form == 0:
        return f"{s.capitalize()} {v} {o} {c}."
    if form == 1:
        return f"In {pick(_PATHS)}, {s} {v} {o}."
    if form == 2:
        return f"{s.capitalize()} {v} {o} and then {pick(_VERBS)} {pick(_OBJECTS)}."
    if form == 3:
        n = int(rng.integers(2, 99))
        return f"Version {n // 10}.{n % 10} of {s} {v} {o} {c}."
    return f"Note: {s} never {v.rstrip('s')}s {o} {c}."


def synthetic_document(rng: np.random.Generator, n_sentences: int) -> str:
    return " ".join(_sentence(rng) for _ in range(n_sentences))


def synthetic_corpus(seed: int, n_docs: int = 200, sentences: tuple[int, int] = (6, 20)) -> list[str]:
    """Deterministic plain-text documents in the style of project notes."""
    rng = np.random.default_rng([seed, 11])
    return [
        synthetic_document(rng, int(rng.integers(sentences[0], sentences[1] + 1)))
        for _ in range(n_docs)
    ]


def read_corpus(paths: Iterable[str | Path]) -> list[str]:
    """UTF-8 documents from files or directories (``*.txt``, sorted)."""
    docs: list[str] = []
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("*.txt")) if p.is_dir() else [p]
        for f in files:
            text = f.read_text(encoding="utf-8")
            if text.strip():
                docs.append(text)
    if not docs:
        raise DatasetError("corpus is empty")
    return docs


def corpus_stream(docs: Sequence[str], sep: str = "\n\n") -> list[int]:
    return tokenize(sep.join(docs) + sep)


# ------------------------------------------------------------ pretraining


def pretrain_windows(docs: Sequence[str], window: int) -> list[list[int]]:
    """Non-overlapping ``window``-token slices of the concatenated corpus."""
    if not docs:
        raise DatasetError("corpus is empty")
    ids = corpus_stream(docs)
    return [ids[i : i + window] for i in range(0, len(ids) - window + 1, window)]


def build_pretrain_chunks(docs: Sequence[str], window: int, seed: int) -> Iterator[PretrainSample]:
    """One sample per window in corpus order, objective drawn 50/50 per window."""
    rng = np.random.default_rng([seed, 3])
    for w in pretrain_windows(docs, window):
        yield make_pretrain_sample(w, sample_objective(rng))


# --------------------------------------------------------------------- QA


@dataclass(frozen=True)
class QASample:
    context: str
    question: str
    answer: str


def parse_qa_lines(lines: Iterable[str], source: str = "<qa>") -> list[QASample]:
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{source}:{lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise DatasetError(f"{source}:{lineno}: record must be an object")
        for key in ("context", "question", "answer"):
            val = rec.get(key)
            if not isinstance(val, str) or not val:
                raise DatasetError(f"{source}:{lineno}: missing or empty field {key!r}")
        out.append(QASample(rec["context"], rec["question"], rec["answer"]))
    return out


def build_qa_set(path: str | Path) -> list[QASample]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_qa_lines(fh, str(path))


def write_qa_set(samples: Sequence[QASample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"context": s.context, "question": s.question,
                                 "answer": s.answer}, ensure_ascii=False) + "\n")


def synthetic_qa(seed: int, n: int) -> list[QASample]:
    """Fact-lookup QA: a paragraph of notes hides one ``key: value`` fact."""
    rng = np.random.default_rng([seed, 5])
    alphabet = np.array(list("abcdefghjkmnpqrstuvwxyz23456789"))
    out = []
    for i in range(n):
        key = _SUBJECTS[int(rng.integers(len(_SUBJECTS)))].split()[-1]
        val = "".join(rng.choice(alphabet, 6))
        before = synthetic_document(rng, int(rng.integers(2, 5)))
        after = synthetic_document(rng, int(rng.integers(2, 5)))
        ctx = f"{before} The {key} token is {val}. {after}"
        out.append(QASample(ctx, f"What is the {key} token?", val))
    return out
