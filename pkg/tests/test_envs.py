import pytest

from icae_lab import tokenizer as tok
from icae_lab.agentic import Trajectory
from icae_lab.envs import (
    NO_ACCESS,
    TASK_KINDS,
    MicroFS,
    ParseError,
    TaskEnv,
    ToolCall,
    build_world,
    execute,
    execute_text,
    format_call,
    generate_task,
    judge,
    parse_action,
    replay,
)


def editor(**args):
    return ToolCall.make("str_replace_editor", **args)


def test_denied_path_is_unreadable_by_every_tool():
    fs = MicroFS({"/secret/a.txt": "x", "/secret/README.md": "y"}, {"/secret"})
    assert execute(fs, editor(command="view", path="/secret")) == NO_ACCESS
    assert execute_text(fs, "$ cat /secret") == NO_ACCESS
    assert execute_text(fs, "$ ls -la /secret").startswith(NO_ACCESS)
    # a plain entry denies the directory itself, not the files inside it
    assert execute_text(fs, "$ cat /secret/README.md") == "y"


def test_subtree_denial():
    fs = MicroFS({"/d/x/y": "1"}, {"/d/"})
    assert fs.denied("/d/x/y") and fs.denied("/d")
    assert not fs.denied("/dx")


def test_str_replace_missing_string_leaves_file_unchanged():
    fs = MicroFS({"/f": "abc"})
    obs = execute(fs, editor(command="str_replace", path="/f", old_str="x", new_str="y"))
    assert "No replacement was performed" in obs
    assert fs.files["/f"] == "abc" and "/f" not in fs.history


def test_str_replace_requires_unique_match():
    fs = MicroFS({"/f": "aa"})
    obs = execute(fs, editor(command="str_replace", path="/f", old_str="a", new_str="b"))
    assert "Multiple occurrences" in obs and fs.files["/f"] == "aa"
    execute(fs, editor(command="str_replace", path="/f", old_str="aa", new_str="b"))
    assert fs.files["/f"] == "b"


def test_create_then_undo_removes_file():
    fs = MicroFS()
    execute(fs, editor(command="create", path="/n.py", file_text="print(1)"))
    assert fs.files["/n.py"] == "print(1)"
    execute(fs, editor(command="undo_edit", path="/n.py"))
    assert "/n.py" not in fs.files
    assert "No edit history" in execute(fs, editor(command="undo_edit", path="/n.py"))


def test_insert_and_undo_restore_exact_content():
    fs = MicroFS({"/f": "a\nb"})
    execute(fs, editor(command="insert", path="/f", insert_line="1", new_str="z"))
    assert fs.files["/f"] == "a\nz\nb"
    execute(fs, editor(command="undo_edit", path="/f"))
    assert fs.files["/f"] == "a\nb"
    assert "Invalid" in execute(fs, editor(command="insert", path="/f", insert_line="9",
                                           new_str="q"))


def test_bad_actions_become_observations():
    fs = MicroFS()
    assert execute_text(fs, "rm -rf /").startswith("parse error")
    assert "command not found" in execute_text(fs, "$ rm -rf /")
    with pytest.raises(ParseError):
        parse_action("$ str_replace_editor --command view")


def test_format_and_parse_round_trip():
    call = editor(command="str_replace", path="/a b.py", old_str="x = 'q'", new_str="y; z")
    assert parse_action(format_call(call)) == call


@pytest.mark.parametrize("kind", TASK_KINDS)
@pytest.mark.parametrize("depth", [1, 2, 4])
def test_expert_replay_resolves(kind, depth):
    for seed in range(5):
        fs, spec, expert = generate_task(kind, seed, depth=depth)
        assert expert.outcome == "resolved"
        assert judge(expert, spec) == "resolved"
        expert.validate()


def test_generation_is_deterministic():
    a = generate_task("secret_command", 7, depth=3)
    b = generate_task("secret_command", 7, depth=3)
    assert a[0] == b[0]
    assert a[2].to_json() == b[2].to_json()
    assert generate_task("secret_command", 8, depth=3)[2].to_json() != a[2].to_json()


def test_secret_command_readme_is_long_and_quoted_verbatim():
    fs, spec, expert = generate_task("secret_command", 0, depth=1)
    readme = expert.steps[2].text
    assert tok.token_len(readme) > 256
    assert spec.params["command"] in readme
    assert expert.actions()[-1] == "$ " + spec.params["command"]
    assert NO_ACCESS in execute_text(fs, f"$ ls -la {spec.params['secret_path'].rsplit('/', 1)[0]}")


def test_keychain_payload_read_then_submitted():
    _, spec, expert = generate_task("keychain", 3, depth=1, payload_len=8)
    key = spec.params["payload"]
    assert len(key) == 8
    obs = expert.observation_indices()
    assert key in expert.steps[obs[0]].text
    assert key in expert.steps[obs[0] + 1].text


def test_keychain_one_char_off_is_unresolved():
    _, spec, expert = generate_task("keychain", 1, depth=2)
    key = spec.params["payload"]
    wrong = key[:-1] + ("a" if key[-1] != "a" else "b")
    actions = expert.actions()[:-1] + [f"$ submit --answer {wrong}"]
    assert replay(spec, actions).outcome == "unresolved"


def test_empty_trajectory_is_unresolved():
    _, spec = build_world("patch_fix", 0)
    traj = Trajectory(spec.task_id, 0)
    traj.append("system", spec.issue_text)
    assert judge(traj, spec) == "unresolved"


def test_judge_replays_on_fresh_world():
    _, spec, expert = generate_task("patch_fix", 5, depth=2)
    skipped = [a for a in expert.actions() if "str_replace" not in a or "view" in a]
    traj = replay(spec, skipped)
    assert traj.outcome == "unresolved" and judge(traj, spec) == "unresolved"


def test_env_wrapper_finishes_on_submit():
    _, spec = build_world("keychain", 0)
    env = TaskEnv(spec)
    assert not env.finished
    env.step("$ submit --answer nope")
    assert env.finished and not env.resolved


def test_depth_validation():
    with pytest.raises(ValueError):
        build_world("keychain", 0, depth=0)
    with pytest.raises(ValueError):
        build_world("nope", 0)
