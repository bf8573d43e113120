"""
Rule-based accuracy and format rewards.

Rules run in a fixed order (Domain, Numeric, Symbolic, Textual); the first
applicable one decides the accuracy score.
"""

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional, Sequence

from trajectory.model import FINAL_ANSWER_MARKER, extract_final_answer, reasoning_text
from utils.errors import EngineError
from verifier.matchers import (
    match_domain,
    match_numeric,
    match_symbolic,
    match_textual,
    normalize_answer,
)

logger = logging.getLogger(__name__)


class MissingGroundTruth(EngineError):
    pass


class MatchRule(str, Enum):
    NUMERIC = "Numeric"
    SYMBOLIC = "Symbolic"
    TEXTUAL = "Textual"
    DOMAIN = "Domain"
    NONE = "None"


@dataclass(frozen=True)
class VerdictBreakdown:
    r_acc: float
    r_fmt: int
    matched_rule: MatchRule
    normalized_gold: str
    normalized_pred: str

    def to_dict(self):
        record = asdict(self)
        record["matched_rule"] = self.matched_rule.value
        return record


def format_reward(t, marker=FINAL_ANSWER_MARKER):
    """
    R_Fmt: 1 iff there is non-empty reasoning text before the last marker and
    a non-empty final answer after it.
    """
    answer = extract_final_answer(t, marker)
    if not answer:
        return 0
    return 1 if reasoning_text(t, marker) else 0


def accuracy_reward(gold, t, options: Optional[Sequence[str]] = None, marker=FINAL_ANSWER_MARKER):
    """
    Score a trajectory's final answer against the gold answer.

    Args:
        gold: Ground-truth answer (non-empty)
        t: Trajectory
        options: Optional multiple-choice option texts, in label order (A, B, ...)
        marker: Final-answer marker

    Returns:
        verdict: VerdictBreakdown (r_acc is 0 whenever the format check fails)
    """
    if gold is None or not gold.strip():
        raise MissingGroundTruth("accuracy reward needs a non-empty ground-truth answer")

    normalized_gold = normalize_answer(gold)
    r_fmt = format_reward(t, marker)
    raw_pred = extract_final_answer(t, marker) or ""
    normalized_pred = normalize_answer(raw_pred)

    if r_fmt == 0:
        return VerdictBreakdown(0.0, 0, MatchRule.NONE, normalized_gold, normalized_pred)

    rules = []
    if options:
        rules.append((MatchRule.DOMAIN, lambda: match_domain(gold, raw_pred, options)))
    rules += [
        (MatchRule.NUMERIC, lambda: match_numeric(gold, raw_pred)),
        (MatchRule.SYMBOLIC, lambda: match_symbolic(gold, raw_pred)),
        (MatchRule.TEXTUAL, lambda: match_textual(gold, raw_pred)),
    ]
    for rule, match in rules:
        score = match()
        if score is not None:
            logger.debug(f"{rule.value} rule scored {normalized_pred!r} vs {normalized_gold!r}: {score}")
            return VerdictBreakdown(float(score), r_fmt, rule, normalized_gold, normalized_pred)

    # unreachable: the textual rule always applies
    return VerdictBreakdown(0.0, r_fmt, MatchRule.NONE, normalized_gold, normalized_pred)
