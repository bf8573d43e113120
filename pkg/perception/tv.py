import logging

import numpy as np

from codebook.parser import EmbeddingGrid, reshape_grid
from utils.errors import EngineError

logger = logging.getLogger(__name__)

_TAU_CACHE = {}


def tv_energy(grid):
    """
    2-D total-variation energy of an embedding grid.

    E_h and E_v are the mean squared embedding differences over horizontal and
    vertical neighbor pairs (no wraparound). A direction without pairs
    contributes 0.

    Args:
        grid: EmbeddingGrid (H_q x W_q x D)

    Returns:
        e2d: (E_h + E_v) / D
    """
    z = np.asarray(grid.values, dtype=np.float64)
    h, w, d = z.shape

    e_h = 0.0
    if w > 1:
        e_h = float(np.mean(np.sum(np.diff(z, axis=1) ** 2, axis=2)))
    e_v = 0.0
    if h > 1:
        e_v = float(np.mean(np.sum(np.diff(z, axis=0) ** 2, axis=2)))

    return (e_h + e_v) / d


def segment_score(e2d, tau):
    """s_r = 1 / (1 + E_2D / tau), in (0, 1]."""
    if not tau > 0:
        raise EngineError(f"tau must be positive, got {tau}")
    if e2d < 0:
        raise EngineError(f"TV energy must be non-negative, got {e2d}")
    return 1.0 / (1.0 + e2d / tau)


def calibrate_tau(cb, n_grids=64, grid_size=8, seed=0):
    """
    Default tau: mean TV energy of random uniform-index grids from this codebook.

    Computed once per (codebook, settings) and cached.
    """
    key = (cb.fingerprint, n_grids, grid_size, seed)
    if key not in _TAU_CACHE:
        rng = np.random.default_rng(seed)
        energies = []
        for _ in range(n_grids):
            indices = rng.integers(0, cb.k, size=(grid_size, grid_size))
            energies.append(tv_energy(EmbeddingGrid(values=cb.rows[indices])))
        tau = float(np.mean(energies))
        if not tau > 0:
            # every row identical: any positive scale gives s_r == 1
            tau = 1.0
        logger.debug(f"Calibrated tau={tau:.6f} for codebook {cb.fingerprint[:8]}")
        _TAU_CACHE[key] = tau
    return _TAU_CACHE[key]


def resolve_tau(cb, cfg):
    return cfg.tau if cfg.tau is not None else calibrate_tau(cb)


def score_trajectory(t, cb, tau):
    """
    Per-segment perception scores of a trajectory's response images.

    Returns:
        record: {'r_pe': float, 'per_segment': [s_r, ...], 'e2d': [E_2D, ...]}
    """
    energies = [tv_energy(reshape_grid(seg, cb)) for seg in t.image_segments]
    scores = [segment_score(e, tau) for e in energies]
    # no image segments: no functional image was produced
    r_pe = float(np.mean(scores)) if scores else 0.0
    return {"r_pe": r_pe, "per_segment": scores, "e2d": energies}


def perception_reward(t, cb, cfg):
    """
    R_Pe: mean segment score over the response's image-token segments.

    Args:
        t: Trajectory
        cb: Codebook
        cfg: PerceptionConfig (tau None -> calibrated)

    Returns:
        r_pe: Float in [0, 1]; 0.0 when the response has no image segments
    """
    return score_trajectory(t, cb, resolve_tau(cb, cfg))["r_pe"]
