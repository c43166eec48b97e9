"""Sampling, augmentation, frame-wise loss and Adam training for AGANet."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import AganetConfig, ParamStore, backward, build, forward, skeleton_image
from .synth import CATEGORIES

logger = logging.getLogger(__name__)


@dataclass
class TrainSample:
    skeleton: np.ndarray            # (T, K, 3)
    labels: np.ndarray              # (T, C) in {0, 1}
    annotations: tuple = ()         # (category, start, end) relative to the window
    aug: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AugmentConfig:
    rot_max_deg: float = 5.0
    dist_max_frac: float = 0.05
    gt_max_frac: float = 0.05
    rot: bool = True
    dist: bool = True
    gt: bool = True

    def __post_init__(self):
        if min(self.rot_max_deg, self.dist_max_frac, self.gt_max_frac) < 0:
            raise ValueError("augmentation bounds must be >= 0")

    @classmethod
    def disabled(cls):
        return cls(rot=False, dist=False, gt=False)


@dataclass(frozen=True)
class TrainConfig:
    model: AganetConfig = AganetConfig()
    augment: AugmentConfig = AugmentConfig()
    epochs: int = 60
    batch_size: int = 256
    sample_stride: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    chunk_size: int = 64  # samples per forward/backward pass inside a batch


def rasterize(annotations, T: int, C: int = len(CATEGORIES)):
    """Dense (T, C) labels; on overlap the later instance owns the frame."""
    labels = np.zeros((T, C), dtype=np.float64)
    for cat, start, end in annotations:
        s, e = max(start, 0), min(end, T)
        if s < e:
            labels[s:e] = 0.0
            labels[s:e, cat] = 1.0
    return labels


def sample_subsequences(stream, annotations, T: int = 100, stride: int = 5,
                        num_categories: int = len(CATEGORIES)):
    """Fixed-length training windows at offsets 0, stride, 2*stride, ..."""
    stream = np.asarray(stream, dtype=np.float64)
    if len(stream) < T:
        warnings.warn(f"stream of {len(stream)} frames is shorter than the window ({T})")
        return []
    out = []
    for off in range(0, len(stream) - T + 1, stride):
        rel = tuple((a.category, a.start - off, a.end - off) for a in annotations
                    if a.end > off and a.start < off + T)
        out.append(TrainSample(stream[off:off + T].copy(), rasterize(rel, T, num_categories), rel))
    return out


def rotation_matrix(axis, angle_rad):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle_rad) * k + (1.0 - math.cos(angle_rad)) * (k @ k)


def augment(sample: TrainSample, cfg: AugmentConfig, rng) -> TrainSample:
    """Random rotation about the camera origin, radial rescaling, and label jitter."""
    skel = sample.skeleton
    anns = sample.annotations
    aug = {}
    if cfg.rot:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg)
        skel = skel @ rotation_matrix(axis, math.radians(angle)).T
        aug.update(rot_axis=axis, rot_deg=angle)
    if cfg.dist:
        factor = rng.uniform(1.0 - cfg.dist_max_frac, 1.0 + cfg.dist_max_frac)
        skel = skel * factor
        aug["dist_factor"] = factor
    labels = sample.labels
    if cfg.gt and anns:
        shifted = []
        for cat, start, end in anns:
            # whole frames, so the bound is floor(frac * length)
            m = int(math.floor(cfg.gt_max_frac * (end - start)))
            shifted.append((cat, start + int(rng.integers(-m, m + 1)),
                            end + int(rng.integers(-m, m + 1))))
        anns = tuple(shifted)
        labels = rasterize(anns, labels.shape[0], labels.shape[1])
        aug["gt_annotations"] = anns
    if skel is sample.skeleton:
        skel = skel.copy()
    return TrainSample(skel, labels, anns, aug)


def frame_ce_loss(scores, labels):
    """Frame-wise binary cross entropy summed over categories, averaged over frames.

    Accepts ``(T, C)`` or a batch ``(N, T, C)`` (mean over the batch). Returns
    ``(loss, dloss/dscores)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    if not np.all((s > 0.0) & (s < 1.0)):
        raise ValueError("scores must lie strictly inside (0, 1)")
    T = s.shape[-2]
    n = s.shape[0] if s.ndim == 3 else 1
    per_elem = -(y * np.log(s) + (1.0 - y) * np.log1p(-s))
    loss = per_elem.sum() / (T * n)
    grad = (-y / s + (1.0 - y) / (1.0 - s)) / (T * n)
    return float(loss), grad


def frame_ce_loss_logits(logits, labels):
    """Same loss as :func:`frame_ce_loss` evaluated on pre-sigmoid logits.

    Stable for saturated scores; returns ``(loss, dloss/dlogits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} differ in shape")
    T = z.shape[-2]
    n = z.shape[0] if z.ndim == 3 else 1
    per_elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(per_elem.sum() / (T * n)), (s - y) / (T * n)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    epochs_done: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def copy(self):
        return dataclasses.replace(self, m={k: a.copy() for k, a in self.m.items()},
                                   v={k: a.copy() for k, a in self.v.items()})

    def hyper_dict(self):
        return {k: getattr(self, k) for k in
                ("lr", "beta1", "beta2", "eps", "step_count", "epochs_done")}

    @classmethod
    def from_hyper_dict(cls, d):
        return cls(**d)


def adam_step(params: ParamStore, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if name not in params.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params.params[name].shape:
            raise ValueError(f"gradient {name}: shape {g.shape} != {params.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params.params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def batch_loss_and_grads(store: ParamStore, images, labels, chunk_size: int = 64):
    """Mean frame-wise CE over a batch, with parameter gradients.

    The batch is processed in chunks; chunk gradients are summed with weights
    so the result equals a single pass over the whole batch.
    """
    n = len(images)
    total = 0.0
    grads = None
    for lo in range(0, n, chunk_size):
        hi = min(lo + chunk_size, n)
        _, cache = forward(store, images[lo:hi], return_cache=True)
        loss, g_logits = frame_ce_loss_logits(cache["logits"], labels[lo:hi])
        w = (hi - lo) / n
        g = backward(store, cache, g_logits * w)
        total += loss * w
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    return total, grads


def train(dataset, config: TrainConfig = TrainConfig(), seed: int = 0, store=None,
          log_path=None, progress=None):
    """Train on a list of :class:`TrainSample`; returns ``(store, epoch_log)``.

    ``epoch_log`` rows are dicts with ``epoch``, ``mean_loss``, ``wallclock_s``
    and the per-step ``step_losses``. Passing ``store`` with Adam state resumes
    training from where it stopped.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if store is None:
        store = build(config.model, seed)
    if store.adam is None:
        store.adam = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    norm = config.model.normalize_input
    log = []
    t0 = time.perf_counter()
    first = store.adam.epochs_done
    for epoch in range(first, first + config.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
        step_losses = []
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            samples = [augment(dataset[i], config.augment,
                               np.random.default_rng([seed, epoch, int(i)])) for i in idx]
            images = skeleton_image(np.stack([s.skeleton for s in samples]), norm)
            labels = np.stack([s.labels for s in samples])
            loss, grads = batch_loss_and_grads(store, images, labels, config.chunk_size)
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss became {loss} at epoch {epoch}")
            adam_step(store, grads, store.adam)
            step_losses.append(loss)
        store.adam.epochs_done = epoch + 1
        sizes = [min(config.batch_size, len(order) - b) for b in range(0, len(order), config.batch_size)]
        row = {"epoch": epoch + 1,
               "mean_loss": float(np.dot(step_losses, sizes) / len(order)),
               "wallclock_s": time.perf_counter() - t0,
               "step_losses": step_losses}
        log.append(row)
        logger.info("epoch %d  loss %.5f  %.1fs", row["epoch"], row["mean_loss"], row["wallclock_s"])
        if progress is not None:
            progress(row)
        if log_path is not None:
            write_loss_log(log, log_path)
    return store, log


def write_loss_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "wallclock_s"])
        for row in log:
            w.writerow([row["epoch"], repr(row["mean_loss"]), f"{row['wallclock_s']:.3f}"])


def build_training_set(records, T: int = 100, stride: int = 5):
    samples = []
    for rec in records:
        samples.extend(sample_subsequences(rec.frames, rec.annotations, T, stride))
    return samples
