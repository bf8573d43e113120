"""
Interleaved text / image-token trajectories and their JSONL wire format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Tuple, Union

import numpy as np

from utils.errors import EngineError, MalformedJson

FINAL_ANSWER_MARKER = "Final Answer:"

_KNOWN_KEYS = ("prompt_text", "prompt_image", "segments", "ground_truth", "meta")


class GridMismatch(EngineError):
    pass


class NegativeIndex(EngineError):
    pass


class InvalidTrajectory(EngineError):
    pass


class EmptyResponse(EngineError):
    pass


@dataclass(frozen=True)
class TextSegment:
    content: str
    token_ids: Optional[Tuple[int, ...]] = None

    tag = "text"


@dataclass(frozen=True)
class ImageTokens:
    """Row-major grid of codebook indices (H_q x W_q)."""

    indices: Tuple[int, ...]
    grid_h: int
    grid_w: int

    tag = "image_tokens"

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise GridMismatch(f"grid must be positive, got {self.grid_h}x{self.grid_w}")
        if len(self.indices) != self.grid_h * self.grid_w:
            raise GridMismatch(
                f"{len(self.indices)} indices do not fill a {self.grid_h}x{self.grid_w} grid"
            )
        if any(i < 0 for i in self.indices):
            raise NegativeIndex(f"negative code index in {list(self.indices)}")


Segment = Union[TextSegment, ImageTokens]


@dataclass(frozen=True)
class Trajectory:
    """
    One reasoning trajectory: prompt (x^T, optional x^M) and the response segments.

    Args:
        prompt_text: Question text
        segments: Ordered response segments (text rationales and image-token steps)
        prompt_image: Optional input image as image tokens
        ground_truth: Optional gold answer
        meta: String-to-string metadata
    """

    prompt_text: str
    segments: Tuple[Segment, ...] = ()
    prompt_image: Optional[ImageTokens] = None
    ground_truth: Optional[str] = None
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        for pos, seg in enumerate(self.segments):
            if isinstance(seg, ImageTokens) and (
                pos == 0 or not isinstance(self.segments[pos - 1], TextSegment)
            ):
                raise InvalidTrajectory(
                    f"image segment {pos} is not preceded by a text rationale"
                )

    @property
    def final_answer_raw(self):
        return extract_final_answer(self)

    @property
    def image_segments(self):
        return tuple(s for s in self.segments if isinstance(s, ImageTokens))

    @property
    def text_segments(self):
        return tuple(s for s in self.segments if isinstance(s, TextSegment))

    @property
    def num_steps(self):
        """L, the number of visual steps."""
        return len(self.image_segments)


@dataclass(frozen=True)
class ResponseMask:
    bits: Tuple[int, ...]

    @property
    def response_length(self):
        return sum(self.bits)

    def as_array(self):
        return np.asarray(self.bits, dtype=np.float64)

    def __len__(self):
        return len(self.bits)


def _parse_int_list(values, what):
    if not isinstance(values, list) or any(
        isinstance(v, bool) or not isinstance(v, int) for v in values
    ):
        raise MalformedJson(f"{what} must be a list of integers")
    return tuple(values)


def _parse_image(obj):
    if not isinstance(obj, dict):
        raise MalformedJson("image segment must be an object")
    extra = set(obj) - {"type", "indices", "grid_h", "grid_w"}
    if extra:
        raise MalformedJson(f"unknown image segment fields: {sorted(extra)}")
    for key in ("grid_h", "grid_w"):
        if isinstance(obj.get(key), bool) or not isinstance(obj.get(key), int):
            raise MalformedJson(f"image segment needs integer {key}")
    return ImageTokens(
        indices=_parse_int_list(obj.get("indices"), "indices"),
        grid_h=obj["grid_h"],
        grid_w=obj["grid_w"],
    )


def _parse_segment(obj):
    if not isinstance(obj, dict):
        raise MalformedJson("segment must be an object")
    kind = obj.get("type")
    if kind == "text":
        extra = set(obj) - {"type", "content", "token_ids"}
        if extra:
            raise MalformedJson(f"unknown text segment fields: {sorted(extra)}")
        if not isinstance(obj.get("content"), str):
            raise MalformedJson("text segment needs string content")
        token_ids = None
        if obj.get("token_ids") is not None:
            token_ids = _parse_int_list(obj["token_ids"], "token_ids")
        return TextSegment(content=obj["content"], token_ids=token_ids)
    if kind == "image_tokens":
        return _parse_image(obj)
    raise MalformedJson(f"unknown segment type: {kind!r}")


def _meta_value(value):
    if isinstance(value, str):
        return value
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def parse_trajectory(line):
    """
    Parse and validate one JSONL trajectory record.

    Unknown top-level fields are folded into meta (non-string values JSON-encoded).

    Args:
        line: One JSON object (str or UTF-8 bytes)

    Returns:
        trajectory: Validated Trajectory
    """
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedJson(f"invalid JSON: {e.msg} at column {e.colno}") from e
    if not isinstance(record, dict):
        raise MalformedJson("record must be a JSON object")
    if not isinstance(record.get("prompt_text"), str):
        raise MalformedJson("record needs string prompt_text")
    if not isinstance(record.get("segments"), list):
        raise MalformedJson("record needs a segments array")

    ground_truth = record.get("ground_truth")
    if ground_truth is not None and not isinstance(ground_truth, str):
        raise MalformedJson("ground_truth must be a string")

    raw_meta = record.get("meta", {})
    if not isinstance(raw_meta, dict):
        raise MalformedJson("meta must be an object")
    meta = {k: _meta_value(v) for k, v in raw_meta.items()}
    for key, value in record.items():
        if key not in _KNOWN_KEYS:
            meta[key] = _meta_value(value)

    prompt_image = None
    if record.get("prompt_image") is not None:
        prompt_image = _parse_image(record["prompt_image"])

    return Trajectory(
        prompt_text=record["prompt_text"],
        segments=tuple(_parse_segment(s) for s in record["segments"]),
        prompt_image=prompt_image,
        ground_truth=ground_truth,
        meta=meta,
    )


def _image_to_dict(seg):
    return {
        "type": "image_tokens",
        "indices": list(seg.indices),
        "grid_h": seg.grid_h,
        "grid_w": seg.grid_w,
    }


def trajectory_to_dict(t):
    segments = []
    for seg in t.segments:
        if isinstance(seg, TextSegment):
            item = {"type": "text", "content": seg.content}
            if seg.token_ids is not None:
                item["token_ids"] = list(seg.token_ids)
            segments.append(item)
        else:
            segments.append(_image_to_dict(seg))

    record = {"prompt_text": t.prompt_text, "segments": segments}
    if t.prompt_image is not None:
        record["prompt_image"] = _image_to_dict(t.prompt_image)
    if t.ground_truth is not None:
        record["ground_truth"] = t.ground_truth
    if t.meta:
        record["meta"] = dict(t.meta)
    return record


def serialize_trajectory(t):
    """Canonical JSONL record: sorted keys, no insignificant whitespace, UTF-8 text."""
    return json.dumps(trajectory_to_dict(t), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def extract_final_answer(t, marker=FINAL_ANSWER_MARKER):
    """
    Return the trimmed text after the last marker in the concatenated Text segments.

    Args:
        t: Trajectory
        marker: Final-answer marker (case-sensitive)

    Returns:
        answer: Tail text, or None when the marker never occurs
    """
    text = "\n".join(s.content for s in t.segments if isinstance(s, TextSegment))
    idx = text.rfind(marker)
    if idx < 0:
        return None
    return text[idx + len(marker):].strip()


def reasoning_text(t, marker=FINAL_ANSWER_MARKER):
    """Text content preceding the last final-answer marker (all text if absent)."""
    text = "\n".join(s.content for s in t.segments if isinstance(s, TextSegment))
    idx = text.rfind(marker)
    return (text if idx < 0 else text[:idx]).strip()


def _text_tokens(seg):
    if seg.token_ids is not None:
        return len(seg.token_ids)
    return len(seg.content.split())


def prompt_token_count(t):
    count = len(t.prompt_text.split())
    if t.prompt_image is not None:
        count += len(t.prompt_image.indices)
    return count


def token_count(t):
    """T_i: prompt tokens plus response tokens."""
    count = prompt_token_count(t)
    for seg in t.segments:
        count += _text_tokens(seg) if isinstance(seg, TextSegment) else len(seg.indices)
    return count


def mask_from_lengths(total, prompt_len):
    if prompt_len < 0 or prompt_len > total:
        raise InvalidTrajectory(f"prompt_len {prompt_len} outside [0, {total}]")
    if total == prompt_len:
        raise EmptyResponse("response has no tokens to optimize")
    return ResponseMask(bits=(0,) * prompt_len + (1,) * (total - prompt_len))


def response_mask(t, prompt_len):
    """
    Response mask m_{i,t}: zeros over the prompt prefix, ones over the response.

    Args:
        t: Trajectory
        prompt_len: Number of prompt tokens

    Returns:
        mask: ResponseMask with sum(bits) == L_i
    """
    return mask_from_lengths(token_count(t), prompt_len)
