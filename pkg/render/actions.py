"""
Atomic visual actions and their text syntax.

Coordinates are normalized to [0, 1] with (0, 0) at the top-left corner:
    ZOOM-in(x,y,w,h)  BBOX(x,y,w,h)  MARK(x,y[,id])  LINE(x1,y1,x2,y2)  PRED(delta)
"""

import json
import re
from dataclasses import dataclass
from typing import Optional, Union

from utils.errors import EngineError


class UnknownAction(EngineError):
    pass


class ArityMismatch(EngineError):
    pass


class FormatError(EngineError):
    pass


class BadDelta(EngineError):
    pass


_CALL_RE = re.compile(r"^\s*([A-Za-z][A-Za-z-]*)\s*\((.*)\)\s*$", re.DOTALL)
_DECIMAL_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_MARK_ID_RE = re.compile(r"[A-Za-z0-9_-]{1,8}")
# float sums such as 0.7 + 0.3
_SLACK = 1e-9


@dataclass(frozen=True)
class ZoomIn:
    x: float
    y: float
    w: float
    h: float

    name = "ZOOM-in"


@dataclass(frozen=True)
class Bbox:
    x: float
    y: float
    w: float
    h: float

    name = "BBOX"


@dataclass(frozen=True)
class Mark:
    x: float
    y: float
    id: Optional[str] = None

    name = "MARK"


@dataclass(frozen=True)
class Line:
    x1: float
    y1: float
    x2: float
    y2: float

    name = "LINE"


@dataclass(frozen=True)
class Pred:
    delta: str

    name = "PRED"


Action = Union[ZoomIn, Bbox, Mark, Line, Pred]


def _unit(v, what):
    if not 0.0 <= v <= 1.0:
        raise FormatError(f"{what}={v} outside [0, 1]")
    return v


def _region(cls, x, y, w, h):
    for name, v in (("x", x), ("y", y), ("w", w), ("h", h)):
        _unit(v, name)
    if w <= 0 or h <= 0:
        raise FormatError(f"{cls.name} needs a positive extent, got w={w}, h={h}")
    if x + w > 1.0 + _SLACK or y + h > 1.0 + _SLACK:
        raise FormatError(f"{cls.name} region ({x},{y},{w},{h}) leaves the frame")
    return cls(x, y, w, h)


def make_mark(x, y, id=None):
    _unit(x, "x")
    _unit(y, "y")
    if id is not None and not _MARK_ID_RE.fullmatch(id):
        raise FormatError(f"MARK id {id!r} must be 1-8 characters of [A-Za-z0-9_-]")
    return Mark(x, y, id)


def make_line(x1, y1, x2, y2):
    for name, v in (("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)):
        _unit(v, name)
    if (x1, y1) == (x2, y2):
        raise FormatError(f"LINE endpoints coincide at ({x1},{y1})")
    return Line(x1, y1, x2, y2)


def parse_delta(delta):
    """
    Decode a PRED delta: a JSON list of edits, each either
    {"op": "set_cell", "row", "col", "color", "grid"} or {"op": "draw", "action": "BBOX(...)"}.
    """
    try:
        edits = json.loads(delta)
    except json.JSONDecodeError as e:
        raise BadDelta(f"delta is not valid JSON: {e.msg}") from e
    if not isinstance(edits, list):
        raise BadDelta("delta must be a JSON list of edits")
    for i, edit in enumerate(edits):
        if not isinstance(edit, dict):
            raise BadDelta(f"edit {i} must be an object")
        op = edit.get("op")
        if op == "set_cell":
            extra = set(edit) - {"op", "row", "col", "color", "grid"}
            missing = {"row", "col", "color", "grid"} - set(edit)
            if extra or missing:
                raise BadDelta(f"set_cell edit {i} has fields {sorted(edit)}")
            for key in ("row", "col", "grid"):
                if isinstance(edit[key], bool) or not isinstance(edit[key], int):
                    raise BadDelta(f"set_cell edit {i} needs integer {key}")
            if edit["grid"] < 1:
                raise BadDelta(f"set_cell edit {i} needs a positive grid size")
        elif op == "draw":
            if set(edit) != {"op", "action"} or not isinstance(edit["action"], str):
                raise BadDelta(f"draw edit {i} needs exactly an action string")
            try:
                nested = parse_action(edit["action"])
            except EngineError as e:
                raise BadDelta(f"draw edit {i}: {e}") from e
            if not isinstance(nested, (Bbox, Mark, Line)):
                raise BadDelta(f"draw edit {i} may only nest BBOX, MARK or LINE")
        else:
            raise BadDelta(f"edit {i} has unknown op {op!r}")
    return edits


def _numbers(args, name):
    values = []
    for arg in args:
        if not _DECIMAL_RE.fullmatch(arg):
            raise FormatError(f"{name} argument {arg!r} is not a decimal number")
        values.append(float(arg))
    return values


def _expect(args, name, *counts):
    if len(args) not in counts:
        expected = " or ".join(str(c) for c in counts)
        raise ArityMismatch(f"{name} takes {expected} arguments, got {len(args)}")


def parse_action(s):
    """
    Parse and validate one action call such as "BBOX(0.1,0.2,0.3,0.4)".

    Raises:
        UnknownAction: name is not one of the five actions
        ArityMismatch: wrong number of arguments
        FormatError: non-numeric, out-of-range or degenerate arguments
        BadDelta: malformed PRED delta
    """
    m = _CALL_RE.match(s)
    if not m:
        raise FormatError(f"not an action call: {s!r}")
    name, body = m.group(1), m.group(2).strip()

    if name == "PRED":
        if not body:
            raise ArityMismatch("PRED takes 1 argument, got 0")
        parse_delta(body)
        return Pred(body)

    args = [a.strip() for a in body.split(",")] if body else []
    if name == "ZOOM-in":
        _expect(args, name, 4)
        return _region(ZoomIn, *_numbers(args, name))
    if name == "BBOX":
        _expect(args, name, 4)
        return _region(Bbox, *_numbers(args, name))
    if name == "LINE":
        _expect(args, name, 4)
        return make_line(*_numbers(args, name))
    if name == "MARK":
        _expect(args, name, 2, 3)
        x, y = _numbers(args[:2], name)
        mark_id = args[2].strip("'\"") if len(args) == 3 else None
        return make_mark(x, y, mark_id)
    raise UnknownAction(f"unknown action {name!r}")


def format_action(a):
    """Canonical text for an action; parse_action(format_action(a)) == a."""
    if isinstance(a, (ZoomIn, Bbox)):
        args = [a.x, a.y, a.w, a.h]
    elif isinstance(a, Line):
        args = [a.x1, a.y1, a.x2, a.y2]
    elif isinstance(a, Mark):
        args = [a.x, a.y]
        if a.id is not None:
            return f"MARK({float(a.x)!r},{float(a.y)!r},{a.id})"
    elif isinstance(a, Pred):
        return f"PRED({a.delta})"
    else:
        raise UnknownAction(f"not an action: {a!r}")
    return f"{a.name}(" + ",".join(repr(float(v)) for v in args) + ")"
