"""Double-buffered decode / compute / encode pipeline over an image sequence.

With ``buffers=2`` a decoder thread reads frame ``i+1`` while frame ``i`` is
computed. Stages run in frame order either way, so outputs do not depend on
the buffer count.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from spct.errors import ImageFormatError, SpctError, StageError


def load_sequence_list(path: str | os.PathLike) -> list[Path]:
    """Image paths, one per line; relative paths resolve against the list's directory."""
    base = Path(path).parent
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ImageFormatError(f"cannot read sequence list {path}: {exc}") from exc
    out = []
    for line in lines:
        s = line.strip()
        if s and not s.startswith("#"):
            p = Path(s)
            out.append(p if p.is_absolute() else base / p)
    return out


@dataclass(frozen=True)
class Stages:
    """``decode(item) -> frame``, ``compute(window) -> result``, ``encode(index, result)``.

    ``compute`` receives the last ``window`` decoded frames (oldest first) and
    runs once the window is full; its result is tagged with the newest frame's
    index.
    """

    decode: Callable[[Any], Any]
    compute: Callable[[list], Any]
    encode: Callable[[int, Any], None] | None = None
    window: int = 1


@dataclass
class PipelineReport:
    frames: int
    outputs: int
    seconds: float
    buffers: int

    @property
    def fps(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else 0.0

    def summary(self) -> str:
        return f"frames={self.frames}\noutputs={self.outputs}\nseconds={self.seconds:.6f}\nfps={self.fps:.3f}\nbuffers={self.buffers}\n"


_DONE = object()


class _Failure:
    def __init__(self, exc: BaseException, index: int):
        self.exc, self.index = exc, index


def _stage(fn, index: int, name: str, *args):
    try:
        return fn(*args)
    except SpctError as exc:
        raise StageError(f"{name} failed: {exc}", index) from exc
    except Exception as exc:
        raise StageError(f"{name} failed: {exc!r}", index) from exc


def run_pipeline(items: Sequence | Iterable, stages: Stages, buffers: int = 2) -> PipelineReport:
    """Run every item through decode, compute and encode in frame order."""
    if buffers not in (1, 2):
        raise ValueError("buffers must be 1 or 2")
    if stages.window < 1:
        raise ValueError("window must be >= 1")
    items = list(items)
    win: deque = deque(maxlen=stages.window)
    outputs = 0
    t0 = time.perf_counter()

    def consume(i, frame):
        nonlocal outputs
        win.append(frame)
        if len(win) == stages.window:
            res = _stage(stages.compute, i, "compute", list(win))
            if stages.encode is not None:
                _stage(stages.encode, i, "encode", i, res)
            outputs += 1

    if buffers == 1 or len(items) <= 1:
        for i, it in enumerate(items):
            consume(i, _stage(stages.decode, i, "decode", it))
    else:
        # one frame in flight plus one being decoded: two frame buffers
        q: queue.Queue = queue.Queue(maxsize=1)
        stop = threading.Event()

        def reader():
            for i, it in enumerate(items):
                if stop.is_set():
                    return
                try:
                    q.put((i, stages.decode(it)))
                except BaseException as exc:  # handed to the consumer
                    q.put(_Failure(exc, i))
                    return
            q.put(_DONE)

        th = threading.Thread(target=reader, name="spct-decode", daemon=True)
        th.start()
        try:
            while True:
                msg = q.get()
                if msg is _DONE:
                    break
                if isinstance(msg, _Failure):
                    _stage(_reraise, msg.index, "decode", msg.exc)
                consume(*msg)
        finally:
            stop.set()
            while th.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    th.join(0.01)
    return PipelineReport(len(items), outputs, time.perf_counter() - t0, buffers)


def _reraise(exc):
    raise exc
