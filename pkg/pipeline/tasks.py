"""
Synthetic colored-grid tasks and their interleaved training trajectories.

Two ways to build a trajectory for a task:
    annotate_task: the task's exact action plan (annotated traces)
    bootstrap_stepwise: one keyword-derived action per text step of a text-only CoT
"""

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from codebook.quantize import encode_image
from render.actions import Bbox, Mark, Pred, ZoomIn, format_action, make_line
from render.executor import blank_image, execute, run_trajectory_render
from trajectory.model import FINAL_ANSWER_MARKER, TextSegment, Trajectory
from utils.errors import EngineError

logger = logging.getLogger(__name__)

COLORS = ("red", "green", "blue", "yellow")

# every word a task trajectory can emit (prompts are hashed, not tokenized)
TASK_WORDS = (
    "look", "at", "the", "grid", "row", "column", "count", "mark", "each", "cell", "cells",
    "in", "update", "after", "marking", "line", "between", "first", "last", "zoom", "on",
    "and", "is", "of", "number", ".",
) + COLORS


class NoSteps(EngineError):
    pass


@dataclass(frozen=True, eq=False)
class SynthTask:
    """
    A G x G colored grid plus a counting question about it.

    Args:
        task_id: Stable identifier
        grid: Row-major color names
        question: Prompt text
        gold: Answer string (a non-negative integer)
        init_image: Rendered grid, RGB uint8
        color: Color the question asks about
        row: 0-based row for row questions, None for whole-grid questions
    """

    task_id: str
    grid: Tuple[Tuple[str, ...], ...]
    question: str
    gold: str
    init_image: np.ndarray = field(repr=False)
    color: str = "red"
    row: Optional[int] = None

    @property
    def size(self):
        return len(self.grid)

    def cells_of_color(self):
        """(row, col) of every target-colored cell inside the question's scope."""
        return target_cells(self.grid, self.color, self.row)


def target_cells(grid, color, row=None):
    rows = range(len(grid)) if row is None else [row]
    return [(r, c) for r in rows for c in range(len(grid)) if grid[r][c] == color]


def grid_delta(grid):
    edits = [
        {"op": "set_cell", "row": r, "col": c, "color": color, "grid": len(grid)}
        for r, row in enumerate(grid)
        for c, color in enumerate(row)
    ]
    return json.dumps(edits, separators=(",", ":"))


def render_grid(grid, image_size):
    """Paint a color grid onto a white square raster through a PRED edit list."""
    return execute(blank_image(image_size, image_size), Pred(grid_delta(grid)))


def gen_synth_tasks(seed, n, grid_size=3, image_size=96):
    """
    Deterministic synthetic tasks.

    Task i draws from numpy's generator seeded with (seed, i), so each task is
    fully determined by the 64-bit seed and its position.

    Args:
        seed: Non-negative integer seed
        n: Number of tasks (>= 1)
        grid_size: G
        image_size: Side of the rendered init image in pixels

    Returns:
        tasks: List of SynthTask
    """
    if n < 1:
        raise EngineError(f"need at least one task, got n={n}")
    if grid_size < 1:
        raise EngineError(f"grid_size must be positive, got {grid_size}")

    return [synth_task(seed, i, grid_size, image_size) for i in range(n)]


def synth_task(seed, i, grid_size=3, image_size=96):
    """Task i of the stream determined by seed (what gen_synth_tasks yields at position i)."""
    rng = np.random.default_rng([seed, i])
    cells = rng.integers(0, len(COLORS), size=(grid_size, grid_size))
    grid = tuple(tuple(COLORS[v] for v in row) for row in cells)
    color = COLORS[int(rng.integers(0, len(COLORS)))]
    if grid_size > 1 and rng.random() < 0.5:
        row = int(rng.integers(0, grid_size))
        question = f"How many {color} cells are in row {row + 1} of the grid?"
    else:
        row = None
        question = f"How many {color} cells are in the grid?"
    return SynthTask(
        task_id=f"task-{seed}-{i}",
        grid=grid,
        question=question,
        gold=str(len(target_cells(grid, color, row))),
        init_image=render_grid(grid, image_size),
        color=color,
        row=row,
    )


def _cell_center(r, c, g):
    return (c + 0.5) / g, (r + 0.5) / g


def _row_region(row, g):
    return Bbox(0.0, row / g, 1.0, 1.0 / g)


def _mark_cells(cells, g):
    draws = []
    for k, (r, c) in enumerate(cells, start=1):
        x, y = _cell_center(r, c, g)
        draws.append({"op": "draw", "action": format_action(Mark(x, y, str(k)))})
    return Pred(json.dumps(draws, separators=(",", ":")))


def seed_cot(task):
    """Text-only reasoning steps for a task, before any visualization."""
    color = task.color
    if task.row is None:
        return ["look at the grid .", f"count the {color} cells .", "update the grid after marking ."]
    return [f"look at row {task.row + 1} .", f"count the {color} cells in row {task.row + 1} ."]


def action_plan(task):
    """Exact annotated (step text, action) pairs for a task."""
    g = task.size
    cells = task.cells_of_color()
    if task.row is None:
        return [
            ("look at the grid .", ZoomIn(0.0, 0.0, 1.0, 1.0)),
            (f"mark each {task.color} cell .", _mark_cells(cells, g)),
        ]
    return [
        (f"look at row {task.row + 1} .", _row_region(task.row, g)),
        (f"mark each {task.color} cell in row {task.row + 1} .", _mark_cells(cells, g)),
    ]


_TRANSITION_WORDS = {"next", "becomes", "move", "shift", "update", "after"}
_REGION_WORDS = {"row", "column", "region", "area", "corner", "top", "bottom", "left", "right"}
_COUNT_WORDS = {"count", "how", "many", "number", "total"}
_LINE_WORDS = {"line", "connect", "compare", "between"}


def step_action(text, task):
    """
    Keyword rule mapping one reasoning step to an atomic action.

    Priority: transition -> PRED, counting -> MARK, region -> BBOX, line -> LINE,
    anything else -> full-frame ZOOM-in. Geometry comes from the task.
    """
    words = set(re.findall(r"[a-z]+", text.lower()))
    g = task.size
    cells = task.cells_of_color()
    row_match = re.search(r"\brow (\d+)", text.lower())
    row = int(row_match.group(1)) - 1 if row_match else None
    if row is not None and not 0 <= row < g:
        row = None

    if words & _TRANSITION_WORDS:
        draws = []
        for r, c in cells:
            x0, y0 = c / g, r / g
            draws.append({"op": "draw", "action": format_action(Bbox(x0, y0, 1.0 / g, 1.0 / g))})
        return Pred(json.dumps(draws, separators=(",", ":")))
    if words & _COUNT_WORDS:
        if cells:
            return Mark(*_cell_center(*cells[0], g), str(len(cells)))
        return Mark(0.5, 0.5)
    if words & _REGION_WORDS:
        return _row_region(row, g) if row is not None else Bbox(0.0, 0.0, 1.0, 1.0)
    if words & _LINE_WORDS and len(cells) >= 2:
        (x1, y1), (x2, y2) = _cell_center(*cells[0], g), _cell_center(*cells[-1], g)
        return make_line(x1, y1, x2, y2)
    return ZoomIn(0.0, 0.0, 1.0, 1.0)


def _assemble(task, steps, actions, cb, vocab, image_grid, marker):
    images = run_trajectory_render(task.init_image, actions)
    segments = []
    for text, image in zip(steps, images):
        segments.append(TextSegment(text, tuple(vocab.encode_text(text)) + (vocab.img_id,)))
        segments.append(encode_image(image, cb, image_grid))
    final = f"{marker} {task.gold}"
    segments.append(TextSegment(final, tuple(vocab.encode_text(final)) + (vocab.eos_id,)))
    return Trajectory(
        prompt_text=task.question,
        segments=tuple(segments),
        prompt_image=encode_image(task.init_image, cb, image_grid),
        ground_truth=task.gold,
        meta={
            "task_id": task.task_id,
            "actions": json.dumps([format_action(a) for a in actions], separators=(",", ":")),
        },
    )


def annotate_task(task, cb, vocab, image_grid=8, marker=FINAL_ANSWER_MARKER):
    """Interleaved trajectory following the task's exact action plan."""
    plan = action_plan(task)
    return _assemble(task, [s for s, _ in plan], [a for _, a in plan], cb, vocab, image_grid, marker)


def bootstrap_stepwise(seed_steps, task, cb, vocab, image_grid=8, marker=FINAL_ANSWER_MARKER):
    """
    Lift a text-only CoT into an interleaved trajectory with one image per step.

    Each step's action comes from step_action, is rendered on the running visual
    state, and the rendered image is encoded to image tokens by nearest-row
    assignment on image_grid x image_grid patches.

    Args:
        seed_steps: Text reasoning steps (>= 1)
        task: SynthTask
        cb: Codebook
        vocab: ToyVocab used for text token ids
        image_grid: Patch raster size per image segment
        marker: Final-answer marker

    Returns:
        trajectory: Trajectory with exactly len(seed_steps) image segments
    """
    steps = list(seed_steps)
    if not steps:
        raise NoSteps("bootstrapping needs at least one text step")
    actions = [step_action(s, task) for s in steps]
    logger.debug(f"{task.task_id}: bootstrapped {[format_action(a) for a in actions]}")
    return _assemble(task, steps, actions, cb, vocab, image_grid, marker)
