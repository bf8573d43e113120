import json
import logging
import os
import sys
from collections import deque
from concurrent.futures import ThreadPoolExecutor

import cv2
import numpy as np

from utils.errors import EngineError, MalformedJson

logger = logging.getLogger(__name__)

THREADS_ENV = "OMNI_ENGINE_THREADS"


def iter_lines(path):
    """
    Stream (line_number, raw) pairs from a file, skipping blank lines.

    Lines stay undecoded so one bad byte only fails its own record; pass each
    through decode_line inside the per-record error handling.

    Args:
        path: File path, or "-" for standard input

    Yields:
        (lineno, raw): 1-based line number and the line's bytes without its newline
    """
    f = sys.stdin.buffer if path == "-" else open(path, "rb")
    try:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.rstrip(b"\n").rstrip(b"\r")
            if raw.strip():
                yield lineno, raw
    finally:
        if f is not sys.stdin.buffer:
            f.close()


def decode_line(raw):
    """
    Decode one input line as UTF-8.

    Raises:
        MalformedJson: the line is not valid UTF-8
    """
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedJson(f"line is not valid UTF-8 (byte {e.start})") from e


def dumps_record(record):
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path, records):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(dumps_record(record) + "\n")


def load_image(path):
    """
    Load an image file as an RGB uint8 array.

    Args:
        path: Image path (PNG or anything OpenCV decodes)

    Returns:
        img: H x W x 3 RGB array
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Image not found: {path}")
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise EngineError(f"Failed to load image: {path}")
    # OpenCV decodes to BGR
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def save_image(img, path):
    """Write an RGB uint8 array as PNG."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    ok = cv2.imwrite(path, cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2BGR))
    if not ok:
        raise EngineError(f"Failed to write image: {path}")


def encode_png(img):
    ok, buf = cv2.imencode(".png", cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2BGR))
    if not ok:
        raise EngineError("PNG encoding failed")
    return buf.tobytes()


def worker_count(requested=None):
    """Worker threads: the request (default CPU count), capped by OMNI_ENGINE_THREADS."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            logger.warning(f"Ignoring non-integer {THREADS_ENV}={cap!r}")
    return max(1, n)


def ordered_map(fn, items, workers=None):
    """
    Apply fn over a stream with a thread pool, yielding results in input order.

    At most 2 * workers items are in flight, so memory stays bounded for long
    streams. Exceptions are re-raised at the position of the failing item.
    """
    workers = worker_count(workers)
    if workers == 1:
        for item in items:
            yield fn(item)
        return

    window = deque()
    with ThreadPoolExecutor(max_workers=workers) as executor:
        for item in items:
            window.append(executor.submit(fn, item))
            if len(window) >= 2 * workers:
                yield window.popleft().result()
        while window:
            yield window.popleft().result()
