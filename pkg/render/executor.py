"""
Deterministic renderer for atomic visual actions.

Images are H x W x 3 uint8 RGB arrays. Every executor returns a new array and
never mutates its input.
"""

import logging

import cv2
import numpy as np

from render.actions import Bbox, Line, Mark, Pred, ZoomIn, parse_action, parse_delta
from render.glyphs import text_bitmap
from utils.errors import EngineError

logger = logging.getLogger(__name__)

ZOOM_SIZE = 512
BBOX_WIDTH = 3
LINE_WIDTH = 2
MARK_RADIUS_FRAC = 0.02

RED = (255, 0, 0)
BLUE = (0, 0, 255)
WHITE = (255, 255, 255)
BLACK = (0, 0, 0)

PALETTE = {
    "red": RED,
    "green": (0, 160, 0),
    "blue": BLUE,
    "yellow": (255, 215, 0),
    "white": WHITE,
    "black": BLACK,
    "gray": (128, 128, 128),
}


class EmptyCrop(EngineError):
    pass


class CellOutOfRange(EngineError):
    pass


class RenderAborted(EngineError):
    """A trajectory render stopped at action `index`; `prefix` holds the images rendered before it."""

    def __init__(self, index, cause, prefix):
        super().__init__(f"action {index} failed: {cause}")
        self.index = index
        self.cause = cause
        self.prefix = prefix


def as_raster(img):
    """Validate an RGB raster and return it as a contiguous uint8 array."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise EngineError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise EngineError(f"expected uint8 pixels, got {img.dtype}")
    return np.ascontiguousarray(img)


def blank_image(width, height, color=WHITE):
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = color
    return img


def _round_half_up(v):
    return int(np.floor(v + 0.5))


def _span(start, extent, size):
    lo = min(max(_round_half_up(start * size), 0), size)
    hi = min(max(_round_half_up((start + extent) * size), 0), size)
    return lo, hi


def _point(x, y, w, h):
    px = min(max(_round_half_up(x * w), 0), w - 1)
    py = min(max(_round_half_up(y * h), 0), h - 1)
    return px, py


def exec_zoom(img, a):
    """
    Crop the region and resize it to 512x512 with corner-aligned bilinear sampling.

    Raises:
        EmptyCrop: the rounded pixel region has zero area
    """
    img = as_raster(img)
    h, w = img.shape[:2]
    x0, x1 = _span(a.x, a.w, w)
    y0, y1 = _span(a.y, a.h, h)
    if x1 <= x0 or y1 <= y0:
        raise EmptyCrop(f"zoom region rounds to {x1 - x0}x{y1 - y0} pixels")

    crop = np.ascontiguousarray(img[y0:y1, x0:x1])
    # output corners sample the crop's corner pixel centers exactly
    xs = np.linspace(0.0, x1 - x0 - 1, ZOOM_SIZE, dtype=np.float32)
    ys = np.linspace(0.0, y1 - y0 - 1, ZOOM_SIZE, dtype=np.float32)
    map_x, map_y = np.meshgrid(xs, ys)
    return cv2.remap(crop, map_x, map_y, interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def exec_bbox(img, a):
    """Copy of img with a 3-pixel red outline drawn inside the region's pixel bounds."""
    out = as_raster(img).copy()
    h, w = out.shape[:2]
    x0, x1 = _span(a.x, a.w, w)
    y0, y1 = _span(a.y, a.h, h)
    x1, y1 = max(x1, min(x0 + 1, w)), max(y1, min(y0 + 1, h))

    t = BBOX_WIDTH
    out[y0:min(y0 + t, y1), x0:x1] = RED
    out[max(y1 - t, y0):y1, x0:x1] = RED
    out[y0:y1, x0:min(x0 + t, x1)] = RED
    out[y0:y1, max(x1 - t, x0):x1] = RED
    return out


def mark_radius(w, h):
    return max(1, _round_half_up(MARK_RADIUS_FRAC * min(w, h)))


def _draw_label(out, text, left, bottom):
    scale = max(1, _round_half_up(min(out.shape[:2]) / 256))
    ink = text_bitmap(text, scale)
    pad = scale
    chip_h, chip_w = ink.shape[0] + 2 * pad, ink.shape[1] + 2 * pad
    top = bottom - chip_h

    chip = np.empty((chip_h, chip_w, 3), dtype=np.uint8)
    chip[:] = WHITE
    chip[pad:pad + ink.shape[0], pad:pad + ink.shape[1]][ink] = BLACK

    # clip the chip to the frame
    h, w = out.shape[:2]
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + chip_h, h), min(left + chip_w, w)
    if y1 > y0 and x1 > x0:
        out[y0:y1, x0:x1] = chip[y0 - top:y1 - top, x0 - left:x1 - left]


def exec_mark(img, a):
    """
    Filled red circle of radius 2% of min(W, H) at (x*W, y*H); an id is drawn as
    a black label on a white chip at the circle's top-right.
    """
    out = as_raster(img).copy()
    h, w = out.shape[:2]
    cx, cy = _point(a.x, a.y, w, h)
    r = mark_radius(w, h)
    cv2.circle(out, (cx, cy), r, RED, thickness=-1, lineType=cv2.LINE_8)
    if a.id:
        _draw_label(out, a.id, left=cx + r, bottom=cy - r)
    return out


def _midpoint_walk(p1, p2):
    """Integer midpoint (Bresenham) walk from p1 to p2, one pixel per major-axis step."""
    x0, y0 = p1
    x1, y1 = p2
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x1 >= x0 else -1
    sy = 1 if y1 >= y0 else -1
    err = dx + dy
    points = []
    while True:
        points.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return points
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def line_footprint(a, w, h):
    """
    Pixels painted by a LINE on a W x H image.

    The midpoint walk is widened to LINE_WIDTH by adding the next pixel across
    the minor axis (the previous one on the last row or column).

    Returns:
        (ys, xs): Integer index arrays of the painted pixels
    """
    p1 = _point(a.x1, a.y1, w, h)
    p2 = _point(a.x2, a.y2, w, h)
    x_major = abs(p2[0] - p1[0]) >= abs(p2[1] - p1[1])
    pixels = set()
    for x, y in _midpoint_walk(p1, p2):
        pixels.add((y, x))
        for k in range(1, LINE_WIDTH):
            if x_major:
                pixels.add((y + k if y + k < h else max(y - k, 0), x))
            else:
                pixels.add((y, x + k if x + k < w else max(x - k, 0)))
    ys, xs = zip(*sorted(pixels))
    return np.array(ys), np.array(xs)


def exec_line(img, a):
    """2-pixel blue segment between the two endpoints (integer midpoint rasterization)."""
    out = as_raster(img).copy()
    h, w = out.shape[:2]
    ys, xs = line_footprint(a, w, h)
    out[ys, xs] = BLUE
    return out


def resolve_color(color):
    if isinstance(color, str):
        if color not in PALETTE:
            raise CellOutOfRange(f"unknown color {color!r}")
        return PALETTE[color]
    if (
        isinstance(color, list)
        and len(color) == 3
        and all(isinstance(c, int) and not isinstance(c, bool) and 0 <= c <= 255 for c in color)
    ):
        return tuple(color)
    raise CellOutOfRange(f"color must be a palette name or [r,g,b] in 0..255, got {color!r}")


def cell_bounds(row, col, grid, w, h):
    """Pixel bounds (x0, y0, x1, y1) of a cell in a grid x grid overlay."""
    return (col * w // grid, row * h // grid, (col + 1) * w // grid, (row + 1) * h // grid)


def exec_pred(img, a):
    """
    Apply a PRED delta: edits run in order over a copy of img.

    Raises:
        BadDelta: malformed delta
        CellOutOfRange: cell outside its declared grid, or unknown color
    """
    out = as_raster(img).copy()
    h, w = out.shape[:2]
    for edit in parse_delta(a.delta):
        if edit["op"] == "set_cell":
            g, row, col = edit["grid"], edit["row"], edit["col"]
            if not (0 <= row < g and 0 <= col < g):
                raise CellOutOfRange(f"cell ({row},{col}) outside a {g}x{g} grid")
            x0, y0, x1, y1 = cell_bounds(row, col, g, w, h)
            out[y0:y1, x0:x1] = resolve_color(edit["color"])
        else:
            out = execute(out, parse_action(edit["action"]))
    return out


_EXECUTORS = {
    ZoomIn: exec_zoom,
    Bbox: exec_bbox,
    Mark: exec_mark,
    Line: exec_line,
    Pred: exec_pred,
}


def execute(img, a):
    """Apply one action and return the post-action image."""
    return _EXECUTORS[type(a)](img, a)


def run_trajectory_render(init, actions):
    """
    Fold the executors over an action list starting from the initial image.

    Args:
        init: Initial RGB image
        actions: List of parsed actions

    Returns:
        chain: One post-action image per action

    Raises:
        RenderAborted: carries the failing index, its error and the rendered prefix
    """
    chain = []
    state = as_raster(init)
    for index, action in enumerate(actions):
        try:
            state = execute(state, action)
        except EngineError as e:
            logger.warning(f"Render aborted at action {index} ({type(e).__name__}): {e}")
            raise RenderAborted(index, e, chain) from e
        chain.append(state)
    return chain
