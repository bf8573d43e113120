from dataclasses import dataclass
from typing import Optional

import numpy as np

from codebook.parser import IndexOutOfRange
from utils.errors import EngineError


class DimMismatch(EngineError):
    pass


class EmptyOmega(EngineError):
    pass


@dataclass(frozen=True)
class PerceptionConfig:
    """
    Perception hyperparameters.

    Args:
        tau: TV sensitivity; None means calibrate from the active codebook
        lambda_pe: Weight of the perception loss in PeSFT
    """

    tau: Optional[float] = None
    lambda_pe: float = 1.0

    def __post_init__(self):
        if self.tau is not None and not self.tau > 0:
            raise EngineError(f"tau must be positive, got {self.tau}")
        if not self.lambda_pe >= 0:
            raise EngineError(f"lambda_pe must be non-negative, got {self.lambda_pe}")


@dataclass(frozen=True, eq=False)
class ProjectedStates:
    """
    Final-layer states at image-token positions and their projection.

    Args:
        hidden: |Omega| x H states h_t
        proj: D x H projection W
        targets: |Omega| target code indices c_t
    """

    hidden: np.ndarray
    proj: np.ndarray
    targets: np.ndarray


def _residuals(ps, cb):
    hidden = np.asarray(ps.hidden, dtype=np.float64)
    proj = np.asarray(ps.proj, dtype=np.float64)
    targets = np.asarray(ps.targets, dtype=np.int64).reshape(-1)

    if hidden.ndim != 2 or proj.ndim != 2:
        raise DimMismatch(f"hidden and proj must be matrices, got {hidden.shape} and {proj.shape}")
    if hidden.shape[0] == 0:
        raise EmptyOmega("no image-token positions to align")
    if proj.shape[1] != hidden.shape[1]:
        raise DimMismatch(f"proj has {proj.shape[1]} columns, hidden states have H={hidden.shape[1]}")
    if proj.shape[0] != cb.d:
        raise DimMismatch(f"proj has {proj.shape[0]} rows, codebook has D={cb.d}")
    if targets.shape[0] != hidden.shape[0]:
        raise DimMismatch(f"{targets.shape[0]} targets for {hidden.shape[0]} states")
    if targets.min() < 0 or targets.max() >= cb.k:
        raise IndexOutOfRange(f"target code outside [0, {cb.k})")

    # W h_t - E[c_t], one row per position
    return hidden, proj, hidden @ proj.T - cb.rows[targets]


def perception_loss(ps, cb):
    """
    L_Pe = (1/|Omega|) sum_t ||W h_t - E[c_t]||^2, with E frozen.

    Args:
        ps: ProjectedStates
        cb: Codebook

    Returns:
        loss: Non-negative float
    """
    _, _, res = _residuals(ps, cb)
    return float(np.mean(np.sum(res ** 2, axis=1)))


def perception_loss_grad(ps, cb):
    """
    Analytic gradients of the perception loss.

    Returns:
        grad_proj: D x H array, (2/|Omega|) sum_t r_t h_t^T
        grad_hidden: |Omega| x H array, (2/|Omega|) W^T r_t per position
    """
    hidden, proj, res = _residuals(ps, cb)
    scale = 2.0 / hidden.shape[0]
    return scale * res.T @ hidden, scale * res @ proj
