"""
Test answer normalization, matching rules, rewards and the judge prompt
"""
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajectory.model import ImageTokens, TextSegment, Trajectory
from verifier.judge import JUDGE_SYSTEM_PROMPT, build_judge_prompt, render_judge_prompt
from verifier.matchers import (
    match_domain,
    match_numeric,
    match_symbolic,
    match_textual,
    normalize_answer,
    parse_number,
)
from verifier.rules import MatchRule, MissingGroundTruth, accuracy_reward, format_reward

COLORS = ["red", "green", "blue"]


def _answered(tail, reasoning="I looked at the grid."):
    return Trajectory(
        prompt_text="Q",
        segments=(
            TextSegment(reasoning),
            ImageTokens(indices=(0,), grid_h=1, grid_w=1),
            TextSegment(f"Final Answer: {tail}"),
        ),
    )


# (gold, prediction, options, r_acc, rule)
CORPUS = [
    ("42", "42", None, 1.0, MatchRule.NUMERIC),
    ("42", "42.", None, 1.0, MatchRule.NUMERIC),
    ("1,000", "1000", None, 1.0, MatchRule.NUMERIC),
    ("1000", "1,000", None, 1.0, MatchRule.NUMERIC),
    ("50%", "0.5", None, 1.0, MatchRule.NUMERIC),
    ("0.5", "50%", None, 1.0, MatchRule.NUMERIC),
    ("1e3", "1000", None, 1.0, MatchRule.NUMERIC),
    ("3.0", "3", None, 1.0, MatchRule.NUMERIC),
    ("-2", "-2.00", None, 1.0, MatchRule.NUMERIC),
    ("7", "8", None, 0.0, MatchRule.NUMERIC),
    ("42", "The answer is 42", None, 1.0, MatchRule.NUMERIC),
    ("1/2", "0.5", None, 1.0, MatchRule.SYMBOLIC),
    ("x+1", "1+x", None, 1.0, MatchRule.SYMBOLIC),
    ("x+1", "x+2", None, 0.0, MatchRule.SYMBOLIC),
    ("2x", "x*2", None, 1.0, MatchRule.SYMBOLIC),
    ("(x+1)^2", "x^2+2x+1", None, 1.0, MatchRule.SYMBOLIC),
    ("x^2-1", "(x-1)*(x+1)", None, 1.0, MatchRule.SYMBOLIC),
    ("x", "X", None, 1.0, MatchRule.SYMBOLIC),
    ("paris", "Paris", None, 1.0, MatchRule.TEXTUAL),
    ("Paris", "The answer is Paris.", None, 1.0, MatchRule.TEXTUAL),
    ("blue", "dark blue", None, 0.5, MatchRule.TEXTUAL),
    ("new york", "new york city", None, 0.5, MatchRule.TEXTUAL),
    ("blue", "red", None, 0.0, MatchRule.TEXTUAL),
    ("cat", "category", None, 0.0, MatchRule.TEXTUAL),
    ("blue", "red or blue", None, 0.0, MatchRule.TEXTUAL),
    ("42", "42 or 43", None, 0.0, MatchRule.TEXTUAL),
    ("12", "twelve", None, 0.0, MatchRule.TEXTUAL),
    ("B", "2", COLORS, 1.0, MatchRule.DOMAIN),
    ("B", "green", COLORS, 1.0, MatchRule.DOMAIN),
    ("B", "(B)", COLORS, 1.0, MatchRule.DOMAIN),
    ("B", "option b", COLORS, 1.0, MatchRule.DOMAIN),
    ("2", "b", COLORS, 1.0, MatchRule.DOMAIN),
    ("green", "B", COLORS, 1.0, MatchRule.DOMAIN),
    ("B", "A", COLORS, 0.0, MatchRule.DOMAIN),
    ("B", "4", COLORS, 0.0, MatchRule.DOMAIN),
    # "1" is both the first ordinal and the second option's text
    ("B", "1", ["2", "1", "3"], 0.0, MatchRule.DOMAIN),
]


@pytest.mark.parametrize("gold, pred, options, r_acc, rule", CORPUS)
def test_corpus(gold, pred, options, r_acc, rule):
    verdict = accuracy_reward(gold, _answered(pred), options=options)
    assert verdict.r_acc == r_acc
    assert verdict.matched_rule == rule
    assert verdict.r_fmt == 1


def test_corpus_size():
    assert len(CORPUS) >= 30


@pytest.mark.parametrize("t", [
    _answered("   "),
    Trajectory(prompt_text="Q", segments=(TextSegment("the answer is 42"),)),
    Trajectory(prompt_text="Q", segments=(TextSegment("Final Answer: 42"),)),
])
def test_format_failures_zero_accuracy(t):
    verdict = accuracy_reward("42", t)
    assert verdict.r_fmt == 0
    assert verdict.r_acc == 0.0
    assert verdict.matched_rule == MatchRule.NONE


def test_format_reward():
    t = Trajectory(prompt_text="Q", segments=(TextSegment("Because X. Final Answer: 42"),))
    assert format_reward(t) == 1
    assert format_reward(_answered("")) == 0
    assert format_reward(Trajectory(prompt_text="Q", segments=(TextSegment("no marker"),))) == 0


def test_missing_ground_truth():
    with pytest.raises(MissingGroundTruth):
        accuracy_reward("", _answered("1"))
    with pytest.raises(MissingGroundTruth):
        accuracy_reward("   ", _answered("1"))


def test_verdict_record():
    record = accuracy_reward("42", _answered("42.")).to_dict()
    assert record == {
        "r_acc": 1.0,
        "r_fmt": 1,
        "matched_rule": "Numeric",
        "normalized_gold": "42",
        "normalized_pred": "42",
    }


def test_custom_marker():
    t = Trajectory(prompt_text="Q", segments=(TextSegment("counted three ANSWER: 3"),))
    assert accuracy_reward("3", t, marker="ANSWER:").r_acc == 1.0


# -- matchers -------------------------------------------------------------------

def test_normalize_examples():
    assert normalize_answer("  The answer is Paris. ") == "paris"
    assert normalize_answer("42") == "42"
    assert normalize_answer("The final answer is: 7!") == "7"
    assert normalize_answer("A\n  b\tC") == "a b c"


@given(st.text(max_size=40))
def test_normalize_is_idempotent(s):
    once = normalize_answer(s)
    assert normalize_answer(once) == once


@given(st.text(alphabet="abc xyz.,!", max_size=30))
def test_textual_exact_match_is_reflexive(s):
    assert match_textual(s, s) == 1.0


def test_parse_number():
    assert parse_number("1,234.5") == 1234.5
    assert parse_number("12%") == 0.12
    assert parse_number("2.5E-2") == 0.025
    assert parse_number("1,23") is None
    assert parse_number("abc") is None


def test_numeric_not_applicable():
    assert match_numeric("abc", "3") is None


def test_symbolic_limits():
    assert match_symbolic("2^100000", "1") is None
    assert match_symbolic("x+y", "y+x") is None
    assert match_symbolic("1/0", "1") is None
    assert match_symbolic("sin(x)", "sin(x)") is None
    assert match_symbolic("x" * 300, "x") is None


@pytest.mark.parametrize("pred", [
    "((x+1)^64)^16",
    "((x+1)^64)^64",
    "(((x+1)^64)^64)^64",
    "(x+1)^40*(x-1)^40",
    "((2^64)^64)^64",
])
def test_symbolic_rejects_nested_blowup(pred):
    assert match_symbolic("x", pred) is None


def test_symbolic_nested_powers_within_bound():
    assert match_symbolic("x^6", "(x^2)^3") == 1.0
    assert match_symbolic("(x+1)^64", "((x+1)^8)^8") == 1.0


def test_domain_needs_options():
    assert match_domain("B", "2") is None
    assert match_domain("B", "2", []) is None
    assert match_domain("Z", "A", COLORS) is None


# -- judge prompt -----------------------------------------------------------------

def test_judge_prompt_slots():
    prompt = build_judge_prompt("42", "forty-two")
    assert prompt["system"] == JUDGE_SYSTEM_PROMPT
    assert prompt["system"].startswith("You are a strict QA judge.")
    assert "### Ground Truth\n42\n" in prompt["user"]
    assert "### Model Answer\nforty-two\n" in prompt["user"]
    assert "### Options" not in prompt["user"]
    assert prompt["user"].endswith("Return only one of: True, False.")


def test_judge_prompt_options():
    text = render_judge_prompt("B", "2", COLORS)
    assert "### Options\nA. red\nB. green\nC. blue\n" in text
    assert text.index("Your final output must be only the single token") < text.index("### Ground Truth")
