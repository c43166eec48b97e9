"""Synthetic upper-body skeleton streams with exact action annotations.

Coordinates are metres in a camera-centred frame with x to the right, y up
and z pointing away from the camera. A rest pose with idle sway is generated
for the whole stream and motion primitives are spliced in for each action
instance, separated by idle gaps. Slow camera yaw and translation drift is
applied on top, plus small per-joint sensor noise.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FPS = 30
JOINTS = ("HD", "NK", "LS", "RS", "LE", "RE", "LW", "RW", "LH", "RH")
CATEGORIES = ("RL", "RR", "MP", "SL", "SR", "PL", "PR", "CL", "CR", "CH")
J = {name: i for i, name in enumerate(JOINTS)}
CAT = {name: i for i, name in enumerate(CATEGORIES)}

SHOULDER_WIDTH = 0.35
TORSO_HEIGHT = 0.5
NECK_TO_HEAD = 0.22
HIP_WIDTH = 0.24
ARM_SEGMENT = 0.3

INSTANCE_SECONDS = (1.0, 3.0)
GAP_SECONDS = (1.0, 4.0)
DATASET_FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed stream or annotation file."""


@dataclass(frozen=True)
class ActionAnnotation:
    category: int
    start: int
    end: int  # exclusive

    def __post_init__(self):
        if not 0 <= self.category < len(CATEGORIES):
            raise ValueError(f"unknown category index {self.category}")
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    @property
    def name(self) -> str:
        return CATEGORIES[self.category]

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SubjectProfile:
    limb_scale: float = 1.0
    tempo_scale: float = 1.0
    base_position: tuple = (0.0, -0.35, 2.5)
    seed: int = 0

    def __post_init__(self):
        for name in ("limb_scale", "tempo_scale"):
            v = getattr(self, name)
            if not 0.8 <= v <= 1.2:
                raise ValueError(f"{name} must lie in [0.8, 1.2], got {v}")

    @classmethod
    def random(cls, seed: int) -> "SubjectProfile":
        rng = np.random.default_rng([seed, 0x5B1])
        return cls(
            limb_scale=float(rng.uniform(0.85, 1.15)),
            tempo_scale=float(rng.uniform(0.8, 1.2)),
            base_position=(float(rng.uniform(-0.3, 0.3)), float(rng.uniform(-0.5, -0.2)),
                           float(rng.uniform(2.0, 3.0))),
            seed=int(seed),
        )


@dataclass
class StreamRecord:
    name: str
    subject: int
    frames: np.ndarray  # (T, K, 3)
    annotations: list = field(default_factory=list)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _slerp(a, b, e):
    """Per-frame spherical interpolation between unit vectors ``a`` and ``b``."""
    a = np.broadcast_to(a, np.broadcast_shapes(np.shape(a), np.shape(b)))
    b = np.broadcast_to(b, a.shape)
    e = np.asarray(e)[..., None]
    dot = np.clip(np.sum(a * b, axis=-1, keepdims=True), -1.0, 1.0)
    omega = np.arccos(dot)
    so = np.sin(omega)
    small = so < 1e-6
    safe = np.where(small, 1.0, so)
    wa = np.where(small, 1.0 - e, np.sin((1.0 - e) * omega) / safe)
    wb = np.where(small, e, np.sin(e * omega) / safe)
    return _unit(wa * a + wb * b)


def _envelope(phase, rise=0.25, fall=0.25):
    """0 -> 1 -> 0 smooth envelope over phase in [0, 1]."""
    up = np.clip(phase / rise, 0.0, 1.0)
    down = np.clip((1.0 - phase) / fall, 0.0, 1.0)
    s = np.minimum(up, down)
    return s * s * (3.0 - 2.0 * s)


def _mirror(v):
    v = np.array(v, dtype=np.float64)
    v[..., 0] *= -1.0
    return v


REST_UPPER = _unit([0.15, -1.0, -0.1])
REST_FORE = _unit([0.05, -1.0, -0.35])


def _jitter(rng, v, deg):
    """Rotate direction(s) ``v`` by a random small angle."""
    axis = _unit(rng.normal(size=3))
    ang = math.radians(rng.uniform(-deg, deg))
    return _unit(_rotate(np.asarray(v), axis, ang))


def _rotate(v, axis, angle):
    axis = _unit(axis)
    c, s = math.cos(angle), math.sin(angle)
    return v * c + np.cross(axis, v) * s + np.outer(v @ axis, axis).reshape(v.shape) * (1 - c)


def _left_arm_targets(category: str, tau, phase, style):
    """Upper-arm and forearm target directions for a left-side primitive.

    ``tau`` is time in seconds since onset, ``phase`` the normalised time.
    Returns ``(upper, fore, envelope)``.
    """
    n = len(tau)
    f = style["freq"]
    if category == "RL":
        upper = np.tile(_unit([0.25, 1.0, -0.15]), (n, 1))
        fore = np.tile(_unit([0.1, 1.0, 0.0]), (n, 1))
        env = _envelope(phase)
    elif category == "SL":
        sw = np.sin(2 * np.pi * f * tau)
        upper = _unit(np.stack([0.25 + 0.45 * sw, -np.ones(n), -0.5 * np.ones(n)], -1))
        fore = _unit(np.stack([0.2 + 1.0 * sw, -0.1 * np.ones(n), -0.8 * np.ones(n)], -1))
        env = _envelope(phase, 0.15, 0.15)
    elif category == "PL":
        push = 0.5 * (1.0 - np.cos(2 * np.pi * 0.5 * f * tau))
        upper = _unit(np.stack([0.1 * np.ones(n), -0.6 + 0.45 * push, -np.ones(n)], -1))
        fore = _unit(np.stack([0.0 * np.ones(n), 0.6 - 0.6 * push, -np.ones(n)], -1))
        env = _envelope(phase, 0.2, 0.2)
    elif category == "CL":
        th = 2 * np.pi * f * tau
        upper = np.tile(_unit([0.15, -0.35, -1.0]), (n, 1))
        fore = _unit(np.stack([0.8 * np.cos(th), 0.8 * np.sin(th), -0.7 * np.ones(n)], -1))
        env = _envelope(phase, 0.15, 0.15)
    elif category == "CH":
        upper = np.tile(_unit([-0.3, -0.5, -0.8]), (n, 1))
        fore = np.tile(_unit([-1.0, 0.35, -0.3]), (n, 1))
        env = _envelope(phase, 0.3, 0.3)
    elif category == "MP":
        upper = np.tile(_unit([0.3, -0.8, -0.6]), (n, 1))
        fore = np.tile(_unit([0.1, 1.0, -0.3]), (n, 1))
        env = _envelope(phase, 0.3, 0.3)
    else:
        raise ValueError(category)
    return upper, fore, env


def _arm_targets(category: str, tau, phase, style):
    """Targets for both arms: ``((upper_l, fore_l, env_l), (upper_r, fore_r, env_r))``.

    An arm not involved in the action gets a zero envelope.
    """
    rest = (np.tile(REST_UPPER, (len(tau), 1)), np.tile(REST_FORE, (len(tau), 1)),
            np.zeros(len(tau)))
    if category in ("RL", "SL", "PL", "CL"):
        return _left_arm_targets(category, tau, phase, style), rest
    if category in ("RR", "SR", "PR", "CR"):
        u, fo, env = _left_arm_targets(category[0] + "L", tau, phase, style)
        return rest, (_mirror(u), _mirror(fo), env)
    # two-handed actions
    u, fo, env = _left_arm_targets(category, tau, phase, style)
    return (u, fo, env), (_mirror(u), _mirror(fo), env)


def _build_skeleton(n, profile: SubjectProfile, arms, sway):
    """Joint positions (n, K, 3) from per-frame arm directions."""
    s = profile.limb_scale
    hip = np.asarray(profile.base_position) + sway
    out = np.empty((n, len(JOINTS), 3))
    neck = hip + np.array([0.0, TORSO_HEIGHT * s, 0.0])
    out[:, J["NK"]] = neck
    out[:, J["HD"]] = neck + np.array([0.0, NECK_TO_HEAD * s, 0.0])
    out[:, J["LH"]] = hip + np.array([HIP_WIDTH / 2 * s, 0.0, 0.0])
    out[:, J["RH"]] = hip + np.array([-HIP_WIDTH / 2 * s, 0.0, 0.0])
    for side, sign in (("L", 1.0), ("R", -1.0)):
        upper, fore = arms[side]
        shoulder = neck + np.array([sign * SHOULDER_WIDTH / 2 * s, -0.04 * s, 0.0])
        elbow = shoulder + ARM_SEGMENT * s * upper
        out[:, J[side + "S"]] = shoulder
        out[:, J[side + "E"]] = elbow
        out[:, J[side + "W"]] = elbow + ARM_SEGMENT * s * fore
    return out


def _plan_timeline(num_instances, profile, rng):
    if num_instances == len(CATEGORIES):
        cats = list(rng.permutation(len(CATEGORIES)))
    else:
        cats = [int(c) for c in rng.integers(0, len(CATEGORIES), size=num_instances)]
    t = int(round(rng.uniform(*GAP_SECONDS) * FPS))
    spans = []
    for c in cats:
        secs = np.clip(rng.uniform(*INSTANCE_SECONDS) * profile.tempo_scale, *INSTANCE_SECONDS)
        length = int(round(secs * FPS))
        spans.append(ActionAnnotation(int(c), t, t + length))
        t += length + int(round(rng.uniform(*GAP_SECONDS) * FPS))
    return spans, t


def instance_style(profile: SubjectProfile, salt: int, index: int) -> dict:
    """Per-instance motion style, a pure function of (subject seed, salt, index)."""
    rng = np.random.default_rng([profile.seed, salt, index, 0x57])
    return {
        "freq": float(rng.uniform(0.9, 1.3) / profile.tempo_scale),
        "jitter_seed": int(rng.integers(2**31)),
    }


def generate_stream(subject: SubjectProfile, num_instances: int, rng, drift: bool = True,
                    noise: float = 0.004):
    """One labelled stream: ``(frames (T, K, 3), [ActionAnnotation])``."""
    if num_instances < 0:
        raise ValueError("num_instances must be >= 0")
    spans, length = _plan_timeline(num_instances, subject, rng)
    salt = int(rng.integers(2**31))
    t = np.arange(length) / FPS

    sway_phase = rng.uniform(0, 2 * np.pi, size=3)
    sway = np.stack([0.02 * np.sin(2 * np.pi * 0.15 * t + sway_phase[0]),
                     0.005 * np.sin(2 * np.pi * 0.3 * t + sway_phase[1]),
                     0.02 * np.sin(2 * np.pi * 0.1 * t + sway_phase[2])], -1)
    # idle arms drift a little around the rest directions
    idle_amp = math.radians(6.0)
    arms = {}
    for side, sign in (("L", 1.0), ("R", -1.0)):
        ph = rng.uniform(0, 2 * np.pi, size=2)
        wobble = idle_amp * np.sin(2 * np.pi * 0.2 * t[:, None] + ph[None, :])
        up = np.array(REST_UPPER) * [sign, 1, 1]
        fo = np.array(REST_FORE) * [sign, 1, 1]
        arms[side] = [
            _unit(up + np.stack([wobble[:, 0], np.zeros(length), wobble[:, 1]], -1)),
            _unit(fo + np.stack([wobble[:, 1], np.zeros(length), wobble[:, 0]], -1)),
        ]

    for idx, ann in enumerate(spans):
        style = instance_style(subject, salt, idx)
        jr = np.random.default_rng(style["jitter_seed"])
        sl = slice(ann.start, ann.end)
        tau = np.arange(ann.length) / FPS
        phase = (np.arange(ann.length) + 0.5) / ann.length
        targets = _arm_targets(CATEGORIES[ann.category], tau, phase, style)
        for side, (upper, fore, env) in zip(("L", "R"), targets):
            upper = _jitter(jr, upper, 8.0)
            fore = _jitter(jr, fore, 8.0)
            arms[side][0][sl] = _slerp(arms[side][0][sl], upper, env)
            arms[side][1][sl] = _slerp(arms[side][1][sl], fore, env)

    frames = _build_skeleton(length, subject, {k: tuple(v) for k, v in arms.items()}, sway)
    if drift:
        frames = _apply_drift(frames, t, rng)
    if noise > 0:
        frames = frames + rng.normal(0.0, noise, size=frames.shape)
    return frames, spans


def _apply_drift(frames, t, rng):
    """Slow camera yaw and translation, the same rigid motion for all joints."""
    amp = math.radians(rng.uniform(0.0, 5.0))
    period = rng.uniform(20.0, 40.0)
    yaw = amp * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    x, y, z = frames[..., 0], frames[..., 1], frames[..., 2]
    shift = rng.uniform(-0.1, 0.1, size=3) * np.sin(2 * np.pi * t / (period * 1.3))[:, None]
    out = np.stack([c * x + s * z, y, -s * x + c * z], -1)
    return out + shift[:, None, :] * [1.0, 0.2, 1.0]


# ---------------------------------------------------------------------------
# file I/O

def _header():
    return ["frame"] + [f"{j}_{a}" for j in JOINTS for a in "xyz"]


def write_stream(csv_path, frames, annotations) -> None:
    """Write a stream CSV and its annotation sidecar (same stem, ``.json``)."""
    csv_path = Path(csv_path)
    frames = np.asarray(frames, dtype=np.float64)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header())
        for i, fr in enumerate(frames.reshape(len(frames), -1)):
            w.writerow([i] + [repr(float(v)) for v in fr])
    with open(csv_path.with_suffix(".json"), "w") as fh:
        json.dump([{"category": a.name, "start": a.start, "end": a.end} for a in annotations],
                  fh, indent=1)


def parse_frame_row(row, line_no=None, source="<stream>"):
    """Parse one CSV row (frame index + 30 coordinates) into a (K, 3) array."""
    where = f"{source}:{line_no}" if line_no is not None else source
    if len(row) != 1 + 3 * len(JOINTS):
        raise DatasetFormatError(f"{where}: expected {1 + 3 * len(JOINTS)} fields, got {len(row)}")
    try:
        vals = np.array([float(v) for v in row[1:]])
    except ValueError as exc:
        raise DatasetFormatError(f"{where}: {exc}") from None
    if not np.all(np.isfinite(vals)):
        raise DatasetFormatError(f"{where}: non-finite coordinate")
    return vals.reshape(len(JOINTS), 3)


def read_frames(csv_path) -> np.ndarray:
    csv_path = Path(csv_path)
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _header():
            raise DatasetFormatError(f"{csv_path}:1: bad or missing header")
        for line_no, row in enumerate(reader, start=2):
            try:
                idx = int(row[0])
            except (ValueError, IndexError):
                raise DatasetFormatError(f"{csv_path}:{line_no}: bad frame index") from None
            if idx != line_no - 2:
                raise DatasetFormatError(f"{csv_path}:{line_no}: frame {idx} out of order")
            rows.append(parse_frame_row(row, line_no, csv_path))
    if not rows:
        return np.zeros((0, len(JOINTS), 3))
    return np.stack(rows)


def read_annotations(json_path, stream_len=None) -> list:
    json_path = Path(json_path)
    try:
        items = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{json_path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(items, list):
        raise DatasetFormatError(f"{json_path}:1: expected a JSON array")
    out = []
    for i, it in enumerate(items):
        try:
            ann = ActionAnnotation(CAT[it["category"]], int(it["start"]), int(it["end"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{json_path}: entry {i}: {exc!r}") from None
        if stream_len is not None and ann.end > stream_len:
            raise DatasetFormatError(f"{json_path}: entry {i} ends past the stream ({stream_len})")
        out.append(ann)
    return out


def read_stream(csv_path):
    frames = read_frames(csv_path)
    return frames, read_annotations(Path(csv_path).with_suffix(".json"), len(frames))


def write_dataset(root, records, splits=None, subjects=None) -> Path:
    """Write streams plus ``manifest.json`` under ``root``."""
    root = Path(root)
    (root / "streams").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        rel = f"streams/{rec.name}.csv"
        write_stream(root / rel, rec.frames, rec.annotations)
        entries.append({"name": rec.name, "subject": rec.subject, "csv": rel,
                        "frames": int(len(rec.frames)),
                        "annotations": f"streams/{rec.name}.json"})
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "fps": FPS,
        "joints": list(JOINTS),
        "categories": list(CATEGORIES),
        "subjects": subjects or {},
        "splits": splits or {},
        "streams": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}:{exc.lineno}: {exc.msg}") from None


def read_dataset(root, split=None) -> list:
    """Load the streams of ``split`` (all streams when ``None``)."""
    root = Path(root)
    manifest = read_manifest(root)
    keep = None
    if split is not None:
        if split not in manifest.get("splits", {}):
            raise DatasetFormatError(f"{root}/manifest.json: no split named {split!r}")
        keep = set(manifest["splits"][split])
    out = []
    for e in manifest["streams"]:
        if keep is not None and e["subject"] not in keep:
            continue
        frames, anns = read_stream(root / e["csv"])
        out.append(StreamRecord(e["name"], e["subject"], frames, anns))
    return out


def generate_dataset(num_subjects: int, streams_per_subject: int, seed: int,
                     num_instances: int = len(CATEGORIES), test_subjects=None):
    """Records for ``num_subjects`` subjects plus a cross-subject split.

    Returns ``(records, splits, subjects)``. ``test_subjects`` defaults to 30%
    of the subjects (6 of 20), taken from a seeded permutation.
    """
    if num_subjects == 0:
        return [], {"train": [], "test": []}, {}
    rng = np.random.default_rng([seed, 0xDA7A])
    n_test = round(0.3 * num_subjects) if test_subjects is None else int(test_subjects)
    order = [int(s) for s in rng.permutation(num_subjects)]
    splits = {"train": sorted(order[n_test:]), "test": sorted(order[:n_test])}
    records, subjects = [], {}
    for sid in range(num_subjects):
        prof = SubjectProfile.random(seed * 1000 + sid)
        subjects[str(sid)] = {"limb_scale": prof.limb_scale, "tempo_scale": prof.tempo_scale,
                              "base_position": list(prof.base_position), "seed": prof.seed}
        for k in range(streams_per_subject):
            srng = np.random.default_rng([seed, sid, k])
            frames, anns = generate_stream(prof, num_instances, srng)
            records.append(StreamRecord(f"s{sid:02d}_v{k:02d}", sid, frames, anns))
    return records, splits, subjects
