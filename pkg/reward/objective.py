"""
PPO-clip surrogate with a KL regularizer over rollout groups, and its exact
gradient with respect to the current per-token log-probabilities.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from reward.advantage import group_advantages
from trajectory.model import ResponseMask, Trajectory
from utils.errors import EngineError

logger = logging.getLogger(__name__)


class EmptyInput(EngineError):
    pass


class MaskAllZero(EngineError):
    pass


class LengthMismatch(EngineError):
    pass


@dataclass(frozen=True)
class PerpoConfig:
    """
    Clip range, KL weight and advantage stabilizer.

    Args:
        eps_low: Lower clip range, ratio floor is 1 - eps_low
        eps_high: Upper clip range, ratio ceiling is 1 + eps_high
        beta_kl: KL loss coefficient
        delta: Advantage stabilizer
    """

    eps_low: float = 0.20
    eps_high: float = 0.28
    beta_kl: float = 0.003
    delta: float = 1e-6

    def __post_init__(self):
        if not 0 < self.eps_low < 1:
            raise EngineError(f"eps_low must lie in (0, 1), got {self.eps_low}")
        if not self.eps_high > 0:
            raise EngineError(f"eps_high must be positive, got {self.eps_high}")
        if not self.beta_kl >= 0:
            raise EngineError(f"beta_kl must be non-negative, got {self.beta_kl}")
        if not self.delta > 0:
            raise EngineError(f"delta must be positive, got {self.delta}")

    @property
    def lower(self):
        return 1.0 - self.eps_low

    @property
    def upper(self):
        return 1.0 + self.eps_high


@dataclass(frozen=True, eq=False)
class RolloutSample:
    """One candidate y^(i): its reward, per-token log-probs and response mask (length T_i)."""

    reward: float
    logp_old: np.ndarray
    logp_ref: np.ndarray
    logp_cur: np.ndarray
    mask: np.ndarray
    trajectory: Optional[Trajectory] = None

    def __post_init__(self):
        mask = self.mask.as_array() if isinstance(self.mask, ResponseMask) else self.mask
        try:
            reward = float(self.reward)
            arrays = {
                name: np.asarray(value, dtype=np.float64).reshape(-1)
                for name, value in (
                    ("logp_old", self.logp_old),
                    ("logp_ref", self.logp_ref),
                    ("logp_cur", self.logp_cur),
                    ("mask", mask),
                )
            }
        except (TypeError, ValueError, OverflowError) as e:
            raise EngineError(f"rollout sample needs numeric fields: {e}") from e
        if not np.isfinite(reward):
            raise EngineError(f"reward must be finite, got {reward}")
        lengths = {name: a.size for name, a in arrays.items()}
        if len(set(lengths.values())) != 1:
            raise LengthMismatch(f"per-token arrays disagree in length: {lengths}")
        for name, a in arrays.items():
            if not np.isfinite(a).all():
                raise EngineError(f"{name} must be finite")
            object.__setattr__(self, name, a)
        object.__setattr__(self, "reward", reward)

    @property
    def response_length(self):
        return float(self.mask.sum())

    def with_logp_cur(self, logp_cur):
        return RolloutSample(self.reward, self.logp_old, self.logp_ref, logp_cur, self.mask, self.trajectory)


@dataclass(frozen=True)
class RolloutGroup:
    prompt_id: str
    samples: Sequence[RolloutSample] = field(default_factory=tuple)

    @property
    def rewards(self):
        return np.array([s.reward for s in self.samples], dtype=np.float64)


def ppo_clip_term(rho, adv, cfg=PerpoConfig()):
    """min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)."""
    if not rho > 0:
        raise EngineError(f"probability ratio must be positive, got {rho}")
    return min(rho * adv, min(max(rho, cfg.lower), cfg.upper) * adv)


def kl_term(logp_cur, logp_ref):
    """Per-token KL estimator log(pi_theta / pi_ref)."""
    return logp_cur - logp_ref


def _check(groups):
    if not groups:
        raise EmptyInput("objective needs at least one rollout group")
    for g in groups:
        if not g.samples:
            raise EmptyInput(f"group {g.prompt_id!r} has no samples")
        for i, s in enumerate(g.samples):
            if not s.response_length > 0:
                raise MaskAllZero(f"sample {i} of group {g.prompt_id!r} has an all-zero response mask")


def _token_terms(s, adv, cfg):
    rho = np.exp(s.logp_cur - s.logp_old)
    unclipped = rho * adv
    clipped = np.clip(rho, cfg.lower, cfg.upper) * adv
    surrogate = np.minimum(unclipped, clipped)
    kl = kl_term(s.logp_cur, s.logp_ref)
    # the min takes the unclipped branch on ties
    d_surrogate = np.where(unclipped <= clipped, unclipped, 0.0)
    return surrogate - cfg.beta_kl * kl, d_surrogate - cfg.beta_kl


def token_weights(groups):
    """Aggregation weight m_t / (n_groups * |G| * L_i) per token, per sample."""
    n_groups = len(groups)
    return [
        [s.mask / (n_groups * len(g.samples) * s.response_length) for s in g.samples]
        for g in groups
    ]


def perpo_objective(groups, cfg=PerpoConfig()):
    """
    J = mean over groups of (1/|G|) sum_i (1/L_i) sum_t m_t (clip_term - beta_kl * kl).

    Advantages come from each group's rewards; ratios from logp_cur - logp_old.

    Args:
        groups: Non-empty list of RolloutGroup (already filtered)
        cfg: PerpoConfig

    Returns:
        objective: float
    """
    _check(groups)
    total = 0.0
    for g, weights in zip(groups, token_weights(groups)):
        advantages = group_advantages(g.rewards, cfg.delta)
        for s, adv, w in zip(g.samples, advantages, weights):
            terms, _ = _token_terms(s, adv, cfg)
            total += float(np.sum(w * terms))
    return total


def perpo_objective_grad(groups, cfg=PerpoConfig()):
    """
    Exact gradient of perpo_objective w.r.t. each sample's logp_cur.

    The clipped branch contributes 0 when the min selects it; the KL term
    contributes -beta_kl per masked token, both scaled by the aggregation weight.

    Returns:
        grads: grads[g][i] is a float64 array shaped like groups[g].samples[i].logp_cur
    """
    _check(groups)
    grads = []
    for g, weights in zip(groups, token_weights(groups)):
        advantages = group_advantages(g.rewards, cfg.delta)
        group_grads = []
        for s, adv, w in zip(g.samples, advantages, weights):
            _, d_terms = _token_terms(s, adv, cfg)
            group_grads.append(w * d_terms)
        grads.append(group_grads)
    return grads


def rollout_group_from_dict(record):
    """
    Build a RolloutGroup from a JSON record:
    {"prompt_id": str, "samples": [{"reward", "logp_old", "logp_ref", "logp_cur", "mask"}, ...]}.

    Samples carrying only a reward get empty per-token arrays.
    """
    if not isinstance(record, dict) or not isinstance(record.get("samples"), list):
        raise EngineError("group record needs a samples array")
    samples = []
    for i, item in enumerate(record["samples"]):
        if not isinstance(item, dict) or "reward" not in item:
            raise EngineError(f"sample {i} needs a reward")
        reward = item["reward"]
        if isinstance(reward, bool) or not isinstance(reward, (int, float)):
            raise EngineError(f"sample {i} reward must be a number, got {reward!r}")
        samples.append(
            RolloutSample(
                reward=reward,
                logp_old=item.get("logp_old", []),
                logp_ref=item.get("logp_ref", []),
                logp_cur=item.get("logp_cur", []),
                mask=item.get("mask", []),
            )
        )
    return RolloutGroup(prompt_id=str(record.get("prompt_id", "")), samples=tuple(samples))
