import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icae_lab.metrics import (
    DegenerateSampleError,
    MetricRecord,
    bleu,
    bleu_ref,
    exact_match,
    metric_tokens,
    normalize_code,
    pass_at_bleu,
    records_from_csv,
    records_to_csv,
    summarize,
    t_sf_two_sided,
    text_bleu,
    trajectory_stats,
    welch_t,
)
from oracles import bleu_fraction

# (candidate, reference, value); values frozen from the exact-count oracle
BLEU_FIXTURES = [
    ("the the the the", "the cat", 0.0),
    ("the cat sat on the mat", "the cat sat on the mat", 1.0),
    ("the cat sat on a mat", "the cat sat on the mat", 0.537284965911771),
    ("a cat sat on the mat today", "the cat sat on the mat", 0.6147881529512643),
    ("$ ls -la /repo", "$ ls -la /repo/src", 0.0),
    ("$ cat README . md", "$ cat README . md", 1.0),
    ("pip install -r req . txt", "pip install -r / mnt / req . txt", 0.0),
    ("return x + y", "return x + y + z", 0.6065306597126334),
    ("def f ( x ) : return x", "def f ( y ) : return y", 0.0),
    ("one two three four five six", "six five four three two one", 0.0),
    ("the quick brown fox jumps over the lazy dog",
     "the quick brown fox jumped over the lazy dog", 0.5969491792019644),
    ("submit --answer abc123", "submit --answer abc124", 0.0),
    ("x", "x y z w", 0.049787068367863944),
    ("a b a b a b", "a b a b", 0.5081327481546147),
]

# (a, b, t, df, p) frozen from scipy.stats.ttest_ind(equal_var=False)
WELCH_FIXTURES = [
    ([1, 2, 3, 4, 5], [2, 3, 4, 5, 6], -1.0, 8.0, 0.34659350708733416),
    ([0.1, 0.4, 0.35, 0.8, 0.2], [0.9, 0.7, 0.95, 0.6, 0.85],
     -3.148683711534314, 6.171921613858419, 0.019111276968300176),
    ([3.0, 3.1, 2.9], [1, 5, 3, 4, 2, 6], -0.652791209833867, 5.056893314831442,
     0.5424002208639291),
    ([10, 12, 11, 13, 9], [10.5, 11.5, 10.0, 12.0, 11.0], 0.0, 5.882352941176471, 1.0),
]

# (t, df, two-sided p) frozen from scipy.stats.t.sf
T_FIXTURES = [
    (-1.0, 8.0, 0.34659350708733416),
    (2.5, 3.3, 0.0800528363083544),
    (0.3, 40.0, 0.7657307167710191),
    (-4.2, 5.5, 0.006890449947090447),
]


# ------------------------------------------------------------------ BLEU


@pytest.mark.parametrize("cand,ref,value", BLEU_FIXTURES)
def test_bleu_fixtures(cand, ref, value):
    assert abs(bleu(cand.split(), ref.split()) - value) < 1e-9
    assert abs(bleu_fraction(cand.split(), ref.split()) - value) < 1e-9


def test_bleu_edge_cases():
    assert bleu([], ["a"]) == 0.0
    assert bleu(["a"], ["a"]) == 1.0


words = st.lists(st.sampled_from(list("abcdefg")), min_size=1, max_size=14)


@given(words, words)
def test_bleu_matches_oracle_and_is_bounded(c, r):
    v = bleu(c, r)
    assert 0.0 <= v <= 1.0
    assert abs(v - bleu_fraction(c, r)) < 1e-12
    assert bleu(c, r) == v


@given(words)
def test_bleu_identity_and_brevity(r):
    assert bleu(r, r) == pytest.approx(1.0, abs=1e-15)
    prev = 1.0
    for cut in range(len(r) - 1, 0, -1):
        cur = bleu(r[:cut], r)
        assert cur <= prev + 1e-15
        prev = cur


def test_smoothing_is_off_by_default():
    c, r = "a b c d".split(), "a b x d".split()
    assert bleu(c, r) == 0.0
    assert bleu(c, r, smooth=True) > 0.0


def test_metric_tokens_split_punctuation():
    assert metric_tokens("$ ls -la /repo") == ["$", "ls", "-", "la", "/", "repo"]


# -------------------------------------------------------------- EM / Pass


def test_exact_match():
    assert exact_match("42", "42") == 1
    assert exact_match("42\n", "42") == 1
    assert exact_match("43", "42") == 0
    assert exact_match("Abc", "abc") == 0


REF_CODE = "def add(a, b):\n    return a + b"


def test_pass_extracts_fenced_block():
    cand = f"Here is the fix:\n```python\n{REF_CODE}\n```\nThat should work."
    assert pass_at_bleu(cand, REF_CODE) == 1


def test_pass_ignores_comments():
    cand = "# helper\ndef add(a, b):  # sum\n    # body\n    return a + b"
    assert normalize_code(cand) == REF_CODE
    assert pass_at_bleu(cand, REF_CODE) == 1


def test_pass_keeps_hash_inside_strings():
    assert normalize_code('x = "#not a comment"  # real') == 'x = "#not a comment"'
    assert normalize_code("```js\nlet u = 'a//b'; // c\n```") == "let u = 'a//b';"


def test_pass_rejects_unrelated_code():
    assert pass_at_bleu("```python\nimport os\nprint(os.getcwd())\n```", REF_CODE) == 0


@given(st.text(max_size=40), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_pass_monotone_in_threshold(cand, t1, t2):
    lo, hi = sorted((t1, t2))
    assert pass_at_bleu(cand, REF_CODE, hi) <= pass_at_bleu(cand, REF_CODE, lo)


# -------------------------------------------------------------- BLEU_ref


def test_bleu_ref_cases():
    expert = ["$ cat README.md", "$ pip install -r x.txt", "$ submit --answer k"]
    assert bleu_ref(expert, expert) == 1.0
    assert bleu_ref(["q w e r"] * 3, expert) == 0.0
    assert bleu_ref([], expert) is None


def test_bleu_ref_half_identical():
    expert = ["alpha beta gamma delta", "one two three four"]
    mine = ["alpha beta gamma delta", "zulu yankee xray whiskey"]
    per_action = [text_bleu(a, b) for a, b in zip(mine, expert)]
    assert per_action == [1.0, 0.0]
    assert bleu_ref(mine, expert) == 0.5


# ----------------------------------------------------------------- Welch


@pytest.mark.parametrize("a,b,t,df,p", WELCH_FIXTURES)
def test_welch_fixtures(a, b, t, df, p):
    r = welch_t(a, b)
    assert abs(r.t - t) < 1e-12 and abs(r.df - df) < 1e-9
    assert abs(r.p - p) < 1e-6


def test_welch_hand_case_exact():
    r = welch_t([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert r.t == -1.0 and r.df == 8.0


@pytest.mark.parametrize("t,df,p", T_FIXTURES)
def test_t_tail(t, df, p):
    assert abs(t_sf_two_sided(t, df) - p) < 1e-9


def test_welch_shuffled_copy():
    r = welch_t([1, 5, 2, 8], [8, 2, 5, 1])
    assert r.t == 0.0 and r.p == 1.0


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=8),
       st.lists(st.floats(-100, 100), min_size=2, max_size=8))
def test_welch_swap_symmetry(a, b):
    try:
        r = welch_t(a, b)
    except DegenerateSampleError:
        return
    s = welch_t(b, a)
    assert s.t == -r.t
    assert abs(s.p - r.p) < 1e-12 and 0.0 <= r.p <= 1.0


def test_welch_degenerate():
    with pytest.raises(DegenerateSampleError):
        welch_t([1, 1, 1], [2, 2])
    with pytest.raises(DegenerateSampleError):
        welch_t([1], [2, 3])


# --------------------------------------------------------------- records


def _rec(policy, steps, model="m"):
    return MetricRecord("r0", "t", 0.5, 1, 0, 1, steps, 2.0, 12, model, policy, 1)


def test_trajectory_stats():
    (one,) = trajectory_stats([_rec("none", 81)] * 3)
    assert one.mean == 81 and one.q1 == one.median == one.q3 == 81
    (single,) = trajectory_stats([_rec("none", 7)])
    assert single.q1 == single.median == single.q3 == 7
    rows = trajectory_stats([_rec("none", 81), _rec("threshold256", 113)])
    assert [r.policy for r in rows] == ["none", "threshold256"]
    with pytest.raises(ValueError):
        trajectory_stats([])


def test_record_bounds():
    with pytest.raises(ValueError):
        MetricRecord("r", "t", 1.5, 0, 0, 0, 1, 1.0, 0)
    with pytest.raises(ValueError):
        MetricRecord("r", "t", 0.5, 2, 0, 0, 1, 1.0, 0)
    MetricRecord("r", "t", math.nan, 0, 0, 0, 0, 1.0, 0)


def test_records_csv_round_trip():
    recs = [_rec("none", 3), MetricRecord("r1", "k", 0.1 + 0.2, 0, 1, 0, 9, 1 / 3, 0)]
    text = records_to_csv(recs)
    assert text.splitlines()[0].startswith("run_id,task_id,bleu,exact_match,pass_at,resolved")
    back = records_from_csv(text)
    assert back == recs
    assert records_to_csv(back) == text


def test_summarize_variance_needs_two():
    s = {r.key: r for r in summarize({"a": [1.0, 3.0], "b": [2.0]})}
    assert s["a"].variance == 2.0 and s["b"].variance is None


def test_metrics_are_pure():
    a = [np.float64(x) for x in (0.1, 0.7, 0.3)]
    assert welch_t(a, [0.2, 0.9, 0.4]) == welch_t(a, [0.2, 0.9, 0.4])
