"""Online prediction over a skeleton stream.

Fixed-length windows slide over the stream; each frame takes its scores from
the one window that owns it (the stride-long middle part of every window,
with the first and last windows also owning the stream head and tail). Frames
are then assigned a category by threshold + argmax, and a per-category
accumulator turns frame predictions into trigger events.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import ParamStore, forward, skeleton_image
from .synth import CATEGORIES, FPS

logger = logging.getLogger(__name__)

NO_ACTION = -1


@dataclass(frozen=True)
class WindowPlan:
    stream_len: int
    window_len: int
    stride: int
    offsets: tuple
    owned: tuple  # (start, end) absolute frame span per window

    def owner_of(self, frame: int) -> int:
        for i, (s, e) in enumerate(self.owned):
            if s <= frame < e:
                return i
        raise IndexError(frame)


def middle_end(offset: int, T: int, stride: int) -> int:
    """End (exclusive) of the centred stride-long middle of a window."""
    return offset + (T - stride) // 2 + stride


def plan_windows(stream_len: int, T: int = 100, stride: int = 20) -> WindowPlan:
    if not 1 <= stride <= T:
        raise ValueError(f"need 1 <= stride <= T, got stride={stride}, T={T}")
    if stream_len < T:
        raise ValueError(f"stream of {stream_len} frames is shorter than the window ({T})")
    offsets = list(range(0, stream_len - T + 1, stride))
    bounds = [0] + [middle_end(o, T, stride) for o in offsets[:-1]]
    if offsets[-1] + T < stream_len:
        # tail not reached by the stride grid: one extra window flush with the end
        bounds.append(middle_end(offsets[-1], T, stride))
        offsets.append(stream_len - T)
    bounds.append(stream_len)
    owned = tuple((bounds[i], bounds[i + 1]) for i in range(len(offsets)))
    return WindowPlan(stream_len, T, stride, tuple(offsets), owned)


def stitch_scores(per_window_scores, plan: WindowPlan):
    """Stream-length scores, each frame copied from its owning window."""
    if len(per_window_scores) != len(plan.offsets):
        raise ValueError(f"got {len(per_window_scores)} score blocks for "
                         f"{len(plan.offsets)} windows")
    first = np.asarray(per_window_scores[0])
    out = np.empty((plan.stream_len,) + first.shape[1:])
    for off, (s, e), block in zip(plan.offsets, plan.owned, per_window_scores):
        out[s:e] = np.asarray(block)[s - off:e - off]
    return out


def assign_categories(scores, threshold: float = 0.4):
    """Per-frame category index, or ``NO_ACTION`` (-1) when no score exceeds the threshold.

    Ties go to the lowest category index.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    scores = np.asarray(scores)
    best = np.argmax(scores, axis=1)
    top = scores[np.arange(len(scores)), best]
    return np.where(top > threshold, best, NO_ACTION)


@dataclass(frozen=True)
class AccumulatorParams:
    increment: float = 1.0
    decrement: float = 1.0
    lower_limit: float = 0.0
    upper_limit: float = 25.0
    trigger_threshold: float = 15.0

    def __post_init__(self):
        if self.increment <= 0 or self.decrement <= 0:
            raise ValueError("increment and decrement must be positive")
        if not self.lower_limit <= self.trigger_threshold <= self.upper_limit:
            raise ValueError("need lower_limit <= trigger_threshold <= upper_limit")

    @classmethod
    def for_min_duration(cls, frames: int, headroom: float = 10.0):
        thr = math.floor(0.5 * frames + 0.5)
        return cls(trigger_threshold=float(thr), upper_limit=float(thr + headroom))


def default_accumulator_params(min_duration_s: float = 1.0, num_categories=len(CATEGORIES)):
    """Same parameters for every category, derived from the shortest action length."""
    return [AccumulatorParams.for_min_duration(round(min_duration_s * FPS))] * num_categories


@dataclass(frozen=True)
class TriggerEvent:
    category: int
    frame: int

    def to_json(self):
        return {"category": CATEGORIES[self.category], "frame": self.frame,
                "time_s": self.frame / FPS}


class Accumulator:
    """Per-category leaky counters with latched triggers."""

    def __init__(self, params):
        self.params = list(params)
        self.score = [p.lower_limit for p in self.params]
        self.state = [0] * len(self.params)
        self.frame = 0

    def step(self, category) -> list:
        """Feed one frame's prediction; returns the events it fires."""
        events = []
        for c, p in enumerate(self.params):
            if category == c:
                s = self.score[c] + p.increment
            else:
                s = self.score[c] - p.decrement
            s = min(max(s, p.lower_limit), p.upper_limit)
            self.score[c] = s
            if self.state[c] == 0 and s >= p.trigger_threshold:
                self.state[c] = 1
                events.append(TriggerEvent(c, self.frame))
            elif self.state[c] == 1 and s < p.trigger_threshold:
                self.state[c] = 0
        self.frame += 1
        return events


def accumulate(predictions, params, return_trace: bool = False):
    """Run the accumulator over a prediction sequence.

    ``predictions`` holds one category index per frame (``NO_ACTION`` or
    ``None`` for frames without an action). Returns the events, plus
    ``(scores, states)`` arrays of shape (T, C) when ``return_trace``.
    """
    acc = Accumulator(params)
    events = []
    n = len(predictions)
    trace_s = np.empty((n, len(acc.params))) if return_trace else None
    trace_t = np.empty((n, len(acc.params)), dtype=np.int8) if return_trace else None
    for t, cat in enumerate(predictions):
        cat = NO_ACTION if cat is None else int(cat)
        events.extend(acc.step(cat))
        if return_trace:
            trace_s[t] = acc.score
            trace_t[t] = acc.state
    if return_trace:
        return events, (trace_s, trace_t)
    return events


def predict_stream(store: ParamStore, frames, stride: int = 20):
    """Stitched (n, C) frame scores for a whole recorded stream."""
    cfg = store.config
    T = cfg.window_len
    frames = np.asarray(frames, dtype=np.float64)
    plan = plan_windows(len(frames), T, stride)
    windows = np.stack([frames[o:o + T] for o in plan.offsets])
    blocks = []
    for lo in range(0, len(windows), 64):
        imgs = skeleton_image(windows[lo:lo + 64], cfg.normalize_input)
        blocks.extend(forward(store, imgs))
    return stitch_scores(blocks, plan)


class StreamEngine:
    """Frame-by-frame inference with in-order trigger emission.

    Frames owned by a window are released once that window is complete, so
    past the first window the delay is below ``T - (T - stride) // 2``
    frames. Head frames wait for the first full window (up to ``T - 1``) and
    the tail is only resolved by :meth:`finish`.
    """

    def __init__(self, store: ParamStore, stride: int = 20, threshold: float = 0.4,
                 params=None):
        self.store = store
        self.T = store.config.window_len
        if not 1 <= stride <= self.T:
            raise ValueError(f"need 1 <= stride <= T, got {stride}")
        self.stride = stride
        self.threshold = threshold
        self.acc = Accumulator(params or default_accumulator_params(
            num_categories=store.config.num_categories))
        self.frames = []
        self.next_offset = 0
        self.released = 0
        self.last_window = None  # (offset, scores)
        self.finished = False
        self.scores = []  # released per-frame scores, in order

    @property
    def max_delay(self) -> int:
        return self.T - (self.T - self.stride) // 2

    def _infer(self, offset):
        window = np.asarray(self.frames[offset:offset + self.T])
        img = skeleton_image(window, self.store.config.normalize_input)
        return forward(self.store, img)

    def _release(self, offset, scores, upto):
        events = []
        block = scores[self.released - offset:upto - offset]
        for cat, row in zip(assign_categories(block, self.threshold), block):
            self.scores.append(row)
            events.extend(self.acc.step(int(cat)))
        self.released = upto
        return events

    def push(self, frame) -> list:
        if self.finished:
            raise RuntimeError("stream already finished")
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (self.store.config.num_joints, 3):
            raise ValueError(f"frame shape {frame.shape} != ({self.store.config.num_joints}, 3)")
        self.frames.append(frame)
        events = []
        while len(self.frames) >= self.next_offset + self.T:
            off = self.next_offset
            scores = self._infer(off)
            self.last_window = (off, scores)
            events.extend(self._release(off, scores, middle_end(off, self.T, self.stride)))
            self.next_offset += self.stride
        return events

    def finish(self) -> list:
        """Release the stream tail; call once after the last frame."""
        self.finished = True
        n = len(self.frames)
        if n < self.T:
            warnings.warn(f"stream of {n} frames is shorter than the window ({self.T}); "
                          "no events")
            return []
        off, scores = self.last_window
        if off + self.T < n:
            off = n - self.T
            scores = self._infer(off)
        return self._release(off, scores, n)

    def run(self, frames) -> list:
        events = []
        for fr in frames:
            events.extend(self.push(fr))
        events.extend(self.finish())
        return events


def detect_events(scores, threshold: float, params):
    """Events for stitched stream scores at one assignment threshold."""
    return accumulate(assign_categories(scores, threshold), params)
