import cv2
import numpy as np

from trajectory.model import ImageTokens


def nearest_rows(features, cb):
    """
    Assign each feature vector to its nearest codebook row (squared L2).

    Args:
        features: N x D array
        cb: Codebook

    Returns:
        indices: N int array (ties resolve to the lowest index)
    """
    features = np.asarray(features, dtype=np.float64)
    # ||x||^2 - 2 x.E + ||E||^2
    distances = (
        np.sum(features ** 2, axis=1, keepdims=True)
        - 2.0 * features @ cb.rows.T
        + np.sum(cb.rows ** 2, axis=1)[None, :]
    )
    return np.argmin(distances, axis=1)


def patch_features(image, grid, d):
    """
    Mean RGB of each cell of a grid x grid patch raster, lifted to D dims.

    Channels are mapped to [-1, 1] and tiled cyclically to length D.
    """
    patches = cv2.resize(image.astype(np.float32), (grid, grid), interpolation=cv2.INTER_AREA)
    rgb = patches.reshape(grid * grid, 3).astype(np.float64) / 127.5 - 1.0
    reps = -(-d // 3)
    return np.tile(rgb, (1, reps))[:, :d]


def encode_image(image, cb, grid=8):
    """
    Encode an RGB raster into image tokens by nearest-row assignment on patches.

    Args:
        image: H x W x 3 uint8 RGB array
        cb: Codebook
        grid: Patch raster size (tokens form a grid x grid segment)

    Returns:
        segment: ImageTokens with grid_h == grid_w == grid
    """
    indices = nearest_rows(patch_features(image, grid, cb.d), cb)
    return ImageTokens(indices=tuple(int(i) for i in indices), grid_h=grid, grid_w=grid)
