"""Deterministic toy agent environments with expert trajectories.

A :class:`MicroFS` world answers the three agent tools (``bash``,
``submit``, ``str_replace_editor``) without touching the host. Task
generators build a world, a success predicate and an expert trajectory from
a seed; worlds are never serialized, only regenerated.
"""

from __future__ import annotations

import posixpath
import shlex
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .agentic import Trajectory

NO_ACCESS = "You have no access to this directory."
EDITOR_COMMANDS = ("view", "create", "str_replace", "insert", "undo_edit")
TOOLS = ("bash", "submit", "str_replace_editor")
PAYLOAD_ALPHABET = "abcdefghijkmnpqrstuvwxyz23456789"


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class ToolCall:
    tool: str
    args: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.tool not in TOOLS:
            raise ParseError(f"unknown tool {self.tool!r}")
        a = dict(self.args)
        if self.tool == "bash" and not a.get("command", "").strip():
            raise ParseError("bash needs a command")
        if self.tool == "str_replace_editor":
            cmd = a.get("command")
            if cmd not in EDITOR_COMMANDS:
                raise ParseError(f"editor command must be one of {', '.join(EDITOR_COMMANDS)}")
            if "path" not in a:
                raise ParseError("editor call needs --path")
            need = {"create": ("file_text",), "str_replace": ("old_str",),
                    "insert": ("insert_line", "new_str")}.get(cmd, ())
            for key in need:
                if key not in a:
                    raise ParseError(f"{cmd} needs --{key}")

    def get(self, key: str, default: str | None = None) -> str | None:
        return dict(self.args).get(key, default)

    @classmethod
    def make(cls, tool: str, **args: str) -> "ToolCall":
        return cls(tool, tuple(args.items()))


def format_call(call: ToolCall) -> str:
    """Single-line ``$ tool --key value`` form (bash commands are bare)."""
    if call.tool == "bash":
        return "$ " + call.get("command")
    parts = [call.tool]
    for k, v in call.args:
        parts += [f"--{k}", shlex.quote(v)]
    return "$ " + " ".join(parts)


def parse_action(text: str) -> ToolCall:
    line = text.strip()
    if not line.startswith("$ "):
        raise ParseError("action must start with '$ '")
    body = line[2:].strip()
    if "\n" in body:
        raise ParseError("action must be a single line")
    try:
        words = shlex.split(body)
    except ValueError as e:
        raise ParseError(str(e)) from None
    if not words:
        raise ParseError("empty action")
    if words[0] not in ("submit", "str_replace_editor"):
        return ToolCall.make("bash", command=body)
    args = []
    rest = words[1:]
    if len(rest) % 2:
        raise ParseError("flags must come in --key value pairs")
    for k, v in zip(rest[::2], rest[1::2]):
        if not k.startswith("--") or len(k) < 3:
            raise ParseError(f"expected a --flag, got {k!r}")
        args.append((k[2:], v))
    return ToolCall(words[0], tuple(args))


# ---------------------------------------------------------------- file world


@dataclass
class MicroFS:
    files: dict[str, str] = field(default_factory=dict)
    access_denied: set[str] = field(default_factory=set)
    history: dict[str, list[str | None]] = field(default_factory=dict)
    installed: list[str] = field(default_factory=list)
    submitted: bool = False
    answer: str | None = None
    commands: list[str] = field(default_factory=list)

    def denied(self, path: str) -> bool:
        """Entries deny themselves; entries ending in ``/`` deny the whole subtree."""
        path = posixpath.normpath(path)
        for d in self.access_denied:
            if d.endswith("/") and (path + "/").startswith(d):
                return True
            if path == posixpath.normpath(d):
                return True
        return False

    def is_dir(self, path: str) -> bool:
        path = posixpath.normpath(path).rstrip("/") + "/"
        return any(f.startswith(path) for f in self.files)

    def listing(self, path: str) -> list[str]:
        path = posixpath.normpath(path).rstrip("/") + "/"
        names = set()
        for f in self.files:
            if f.startswith(path):
                names.add(f[len(path):].split("/")[0])
        return sorted(names)

    def _record(self, path: str) -> None:
        self.history.setdefault(path, []).append(self.files.get(path))


def _editor(fs: MicroFS, call: ToolCall) -> str:
    cmd = call.get("command")
    path = posixpath.normpath(call.get("path"))
    if fs.denied(path):
        return NO_ACCESS
    if cmd == "view":
        if path in fs.files:
            return fs.files[path]
        if fs.is_dir(path):
            return "\n".join(fs.listing(path))
        return f"The path {path} does not exist."
    if cmd == "create":
        if path in fs.files:
            return f"File already exists at: {path}. Cannot overwrite files using command `create`."
        fs._record(path)
        fs.files[path] = call.get("file_text")
        return f"File created successfully at: {path}"
    if cmd == "undo_edit":
        stack = fs.history.get(path)
        if not stack:
            return f"No edit history found for {path}."
        prev = stack.pop()
        if prev is None:
            fs.files.pop(path, None)
        else:
            fs.files[path] = prev
        return f"Last edit to {path} undone successfully."
    if path not in fs.files:
        return f"The path {path} does not exist."
    content = fs.files[path]
    if cmd == "str_replace":
        old, new = call.get("old_str"), call.get("new_str", "")
        count = content.count(old) if old else 0
        if count == 0:
            return f"No replacement was performed, old_str `{old}` did not appear verbatim in {path}."
        if count > 1:
            return (f"No replacement was performed. Multiple occurrences of old_str `{old}` "
                    f"in {path}. Please ensure it is unique.")
        fs._record(path)
        fs.files[path] = content.replace(old, new, 1)
        return f"The file {path} has been edited."
    # insert
    try:
        line_no = int(call.get("insert_line"))
    except ValueError:
        return "Invalid `insert_line` parameter: it must be an integer."
    lines = content.split("\n")
    if not 0 <= line_no <= len(lines):
        return f"Invalid `insert_line` parameter: {line_no}. It should be within [0, {len(lines)}]."
    fs._record(path)
    fs.files[path] = "\n".join(lines[:line_no] + call.get("new_str").split("\n") + lines[line_no:])
    return f"The file {path} has been edited."


def _bash(fs: MicroFS, command: str, tests: Callable[[MicroFS], bool] | None) -> str:
    fs.commands.append(command)
    try:
        words = shlex.split(command)
    except ValueError as e:
        return f"bash: syntax error: {e}"
    if not words:
        return ""
    prog, args = words[0], words[1:]
    if prog == "cat" and args:
        path = posixpath.normpath(args[-1])
        if fs.denied(path):
            return NO_ACCESS
        if path not in fs.files:
            return f"There is no file named {posixpath.basename(path)}"
        return fs.files[path]
    if prog == "ls":
        paths = [a for a in args if not a.startswith("-")] or ["/"]
        path = posixpath.normpath(paths[-1])
        if fs.denied(path):
            return NO_ACCESS + " Call a command from README.md to install."
        if path in fs.files:
            return path
        if fs.is_dir(path):
            return "\n".join(fs.listing(path))
        return f"ls: cannot access '{path}': No such file or directory"
    if prog == "echo":
        return " ".join(args)
    if prog == "pip" and args[:2] == ["install", "-r"] and len(args) == 3:
        path = posixpath.normpath(args[2])
        if path not in fs.files:
            return f"ERROR: Could not open requirements file: No such file: '{path}'"
        pkgs = [p.strip() for p in fs.files[path].split("\n") if p.strip()]
        fs.installed.append(path)
        return "Successfully installed " + " ".join(pkgs)
    if prog in ("pytest", "python") and tests is not None:
        if prog == "python" and args[:2] != ["-m", "pytest"]:
            return f"bash: {prog}: unsupported invocation"
        return "1 passed" if tests(fs) else "1 failed"
    return f"bash: {prog}: command not found"


def execute(fs: MicroFS, call: ToolCall, tests: Callable[[MicroFS], bool] | None = None) -> str:
    """Apply one tool call; failures come back as observation text."""
    if call.tool == "submit":
        fs.submitted = True
        fs.answer = call.get("answer")
        return "Submitted."
    if call.tool == "bash":
        return _bash(fs, call.get("command"), tests)
    return _editor(fs, call)


def execute_text(fs: MicroFS, action: str, tests=None) -> str:
    try:
        call = parse_action(action)
    except ParseError as e:
        return f"parse error: {e}"
    return execute(fs, call, tests)


# ------------------------------------------------------------------- tasks

_FILLER = [
    "This section is kept for reference and does not affect the build.",
    "Older releases used a different layout; see the changelog for details.",
    "The maintainers review pull requests on a weekly basis.",
    "All paths below are relative to the repository root.",
    "Logs are rotated daily and kept for two weeks.",
    "Contributors should run the formatter before sending a patch.",
    "The default settings are tuned for small machines.",
    "Benchmarks live in a separate repository and are not run in CI.",
    "Deprecated options are still parsed but print a warning.",
    "Large files are stored outside the repository.",
]


def filler(rng: np.random.Generator, n_chars: int) -> str:
    out = []
    size = 0
    while size < n_chars:
        s = _FILLER[int(rng.integers(len(_FILLER)))]
        out.append(s)
        size += len(s) + 1
    return " ".join(out)[:n_chars]


def padded(rng: np.random.Generator, core: str, length: int) -> str:
    """``core`` on its own line inside seeded filler, exactly ``length`` bytes."""
    room = max(0, length - len(core) - 2)
    before = int(rng.integers(0, room + 1)) if room else 0
    head = filler(rng, before)
    tail = filler(rng, room - before)
    text = f"{head}\n{core}\n{tail}" if room else core
    return text[:length] if len(text) > length else text


def payload(rng: np.random.Generator, n: int) -> str:
    return "".join(PAYLOAD_ALPHABET[int(i)] for i in rng.integers(0, len(PAYLOAD_ALPHABET), n))


TOOL_HELP = ("Tools: `$ <shell command>`, `$ str_replace_editor --command view --path P`, "
             "`$ submit --answer A`.")


@dataclass
class TaskSpec:
    kind: str
    seed: int
    depth: int = 1
    payload_len: int = 8
    obs_len: int = 400
    issue_text: str = ""
    params: dict = field(default_factory=dict)

    @property
    def task_id(self) -> str:
        return f"{self.kind}-d{self.depth}-s{self.seed}"

    def succeeded(self, fs: MicroFS) -> bool:
        if self.kind == "keychain":
            return fs.submitted and fs.answer == self.params["payload"]
        if self.kind == "secret_command":
            return self.params["secret_path"] in fs.installed
        if self.kind == "patch_fix":
            return fs.submitted and self.tests_pass(fs)
        raise ValueError(self.kind)

    def tests_pass(self, fs: MicroFS) -> bool:
        return fs.files.get(self.params.get("path")) == self.params.get("fixed")

    def to_record(self) -> dict:
        return {"seed": self.seed, "kind": self.kind, "depth": self.depth,
                "payload_len": self.payload_len, "obs_len": self.obs_len}


TASK_KINDS = ("keychain", "secret_command", "patch_fix")


def _distractors(rng, root: str, depth: int, obs_len: int) -> tuple[dict[str, str], list[str]]:
    files, paths = {}, []
    for i in range(depth - 1):
        p = f"{root}/docs/page{i + 1}.md"
        files[p] = padded(rng, f"# Page {i + 1}", obs_len)
        paths.append(p)
    return files, paths


def _view(path: str) -> str:
    return format_call(ToolCall.make("str_replace_editor", command="view", path=path))


def generate_task(kind: str, seed: int, depth: int = 1, payload_len: int = 8,
                  obs_len: int = 400) -> tuple[MicroFS, TaskSpec, Trajectory]:
    """Seeded world, task spec and expert trajectory.

    The information needed by the final action sits in a long observation
    read ``depth`` turns earlier; intermediate turns read long distractors.
    """
    fs, spec = build_world(kind, seed, depth, payload_len, obs_len)
    return fs, spec, replay(spec, spec.params["expert_actions"])


def build_world(kind: str, seed: int, depth: int = 1, payload_len: int = 8,
                obs_len: int = 400) -> tuple[MicroFS, TaskSpec]:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng([seed, depth, TASK_KINDS.index(kind)])
    spec = TaskSpec(kind, seed, depth, payload_len, obs_len)
    fs = MicroFS()
    actions: list[str] = []
    if kind == "keychain":
        root = "/repo"
        key = payload(rng, payload_len)
        fs.files[f"{root}/keys/key.txt"] = padded(rng, f"key = {key}", obs_len)
        extra, pages = _distractors(rng, root, depth, obs_len)
        fs.files.update(extra)
        spec.params = {"payload": key}
        order = ", then ".join([f"{root}/keys/key.txt"] + pages)
        spec.issue_text = (f"Read {order}. Then submit the value of `key` from "
                           f"{root}/keys/key.txt. {TOOL_HELP}")
        actions = [_view(f"{root}/keys/key.txt")] + [_view(p) for p in pages]
        actions.append(format_call(ToolCall.make("submit", answer=key)))
    elif kind == "secret_command":
        root = f"/mnt/shared-fs/{payload(rng, 6)}"
        secret = f"{root}/.my_secret_requirements_{payload(rng, 4)}.txt"
        cmd = f"pip install -r {secret}"
        fs.files[f"{root}/README.md"] = padded(rng, f"Setup: {cmd}", obs_len)
        fs.files[secret] = "numpy\nrequests"
        fs.access_denied.add(root)
        spec.params = {"secret_path": secret, "command": cmd}
        spec.issue_text = (f"Your task is to read {root}/README.md and run the commands for the "
                           f"setup. When i run them i get errors. {TOOL_HELP}")
        # dead ends from the hand-simulated transcript fill the gap before the install
        detours = [f"$ cat {root}/requirements.txt", _view(root), f"$ ls -la {root}"]
        actions = [_view(f"{root}/README.md")]
        actions += [detours[i % len(detours)] for i in range(depth - 1)]
        actions.append("$ " + cmd)
    elif kind == "patch_fix":
        root = "/repo"
        name = payload(rng, 5)
        path = f"{root}/src/{name}.py"
        const = payload(rng, payload_len).upper()
        bad, good = int(rng.integers(2, 5)), int(rng.integers(5, 9))
        line = f"LIMIT_{const} = {bad}"
        content = padded(rng, line, obs_len)
        fs.files[path] = content
        extra, pages = _distractors(rng, root, depth, obs_len)
        fs.files.update(extra)
        spec.params = {"path": path, "fixed": content.replace(line, f"LIMIT_{const} = {good}")}
        order = ", then ".join([path] + pages)
        spec.issue_text = (f"Read {order}. The LIMIT constant in {path} must be {good}; "
                           f"fix it, run the tests and submit. {TOOL_HELP}")
        actions = [_view(path)] + [_view(p) for p in pages]
        actions.append(format_call(ToolCall.make("str_replace_editor", command="str_replace",
                                                 path=path, old_str=line,
                                                 new_str=f"LIMIT_{const} = {good}")))
        actions += ["$ python -m pytest", format_call(ToolCall.make("submit"))]
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    spec.params["expert_actions"] = actions
    return fs, spec


class TaskEnv:
    """Environment protocol wrapper around a regenerated world."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.fs, _ = build_world(spec.kind, spec.seed, spec.depth, spec.payload_len,
                                 spec.obs_len)
        self.task_id = spec.task_id
        self.seed = spec.seed

    def system_prompt(self) -> str:
        return self.spec.issue_text

    def step(self, action: str) -> str:
        return execute_text(self.fs, action, self.spec.tests_pass)

    def expert_action(self, turn: int) -> str:
        acts = self.spec.params["expert_actions"]
        return acts[turn] if turn < len(acts) else "$ submit"

    @property
    def finished(self) -> bool:
        return self.fs.submitted or self.spec.succeeded(self.fs)

    @property
    def resolved(self) -> bool:
        return self.spec.succeeded(self.fs)


def replay(spec: TaskSpec, actions: Sequence[str]) -> Trajectory:
    """Execute ``actions`` on a fresh world, stopping when the task finishes."""
    env = TaskEnv(spec)
    traj = Trajectory(spec.task_id, spec.seed)
    traj.append("system", spec.issue_text)
    for a in actions:
        traj.append("action", a)
        traj.append("observation", env.step(a))
        if env.finished:
            break
    traj.outcome = "resolved" if env.resolved else "unresolved"
    return traj


def judge(traj: Trajectory, spec: TaskSpec) -> str:
    """Replay the trajectory's actions on a fresh world and test success."""
    if not traj.action_indices():
        return "unresolved"
    if traj.outcome is None:
        raise ValueError("trajectory has not terminated")
    env = TaskEnv(spec)
    for a in traj.actions():
        env.step(a)
    return "resolved" if spec.succeeded(env.fs) else "unresolved"
