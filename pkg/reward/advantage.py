import logging
from dataclasses import dataclass

import numpy as np

from utils.errors import EngineError

logger = logging.getLogger(__name__)


class GroupTooSmall(EngineError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    """
    Weights of the composite reward R = alpha*R_Acc + beta*R_Fmt + gamma*R_Pe.

    Defaults are accuracy-dominant with mild format and perception shaping.
    """

    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise EngineError(f"reward weights must be non-negative, got {self}")
        if not self.alpha + self.beta + self.gamma > 0:
            raise EngineError("reward weights must not all be zero")


@dataclass(frozen=True)
class RewardBreakdown:
    acc: float
    fmt: float
    pe: float
    total: float

    def to_dict(self):
        return {"acc": self.acc, "fmt": self.fmt, "pe": self.pe, "total": self.total}


def composite_reward(acc, fmt, pe, w=RewardWeights()):
    return w.alpha * acc + w.beta * fmt + w.gamma * pe


def reward_breakdown(acc, fmt, pe, w=RewardWeights()):
    return RewardBreakdown(acc=float(acc), fmt=float(fmt), pe=float(pe), total=composite_reward(acc, fmt, pe, w))


def group_advantages(rewards, delta=1e-6):
    """
    Group-relative advantages A_i = (r_i - mean) / (std + delta).

    Args:
        rewards: Rewards of one rollout group (|G| >= 2)
        delta: Positive stabilizer

    Returns:
        advantages: float64 array, exactly zero when all rewards are equal

    Raises:
        GroupTooSmall: fewer than 2 rewards
        EngineError: a non-finite reward or a non-positive delta
    """
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.size < 2:
        raise GroupTooSmall(f"group-relative advantages need at least 2 rewards, got {r.size}")
    if not np.isfinite(r).all():
        raise EngineError(f"rewards must be finite, got {r.tolist()}")
    if not delta > 0:
        raise EngineError(f"delta must be positive, got {delta}")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    # work on r / max|r| so mean and population std cannot overflow
    scale = np.abs(r).max()
    z = r / scale
    z = z - z.mean()
    return z / (z.std() + delta / scale)


def is_degenerate(rewards):
    r = np.asarray(rewards, dtype=np.float64)
    return r.size == 0 or bool(np.max(r) == np.min(r))


def filter_degenerate(groups):
    """Keep only mixed-outcome groups (reward spread > 0), preserving order."""
    kept = [g for g in groups if not is_degenerate(g.rewards)]
    if len(kept) < len(groups):
        logger.debug(f"Filtered {len(groups) - len(kept)} of {len(groups)} degenerate groups")
    return kept
