"""Run configuration: an INI-style key/value file plus command-line overrides.

See ``docs/config.md`` for every section and key. Unknown keys are an error,
so typos surface at startup instead of silently using defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .geometry import CameraIntrinsics
from .metrics import DEFAULT_THRESHOLDS, EXTEND_FRAC
from .model import AganetConfig
from .stream import AccumulatorParams
from .synth import CATEGORIES, FPS
from .training import AugmentConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    stride: int = 20
    threshold: float = 0.4
    min_duration_s: float = 1.0
    increment: float = 1.0
    decrement: float = 1.0
    lower_limit: float = 0.0
    trigger_threshold: dict = field(default_factory=dict)  # category name -> value
    upper_limit: dict = field(default_factory=dict)

    def accumulator_params(self, num_categories: int = len(CATEGORIES)):
        base = AccumulatorParams.for_min_duration(round(self.min_duration_s * FPS))
        out = []
        for c in range(num_categories):
            name = CATEGORIES[c] if c < len(CATEGORIES) else str(c)
            thr = self.trigger_threshold.get(name, self.trigger_threshold.get("*",
                                                                            base.trigger_threshold))
            upper = self.upper_limit.get(name, self.upper_limit.get("*", thr + 10.0))
            out.append(AccumulatorParams(self.increment, self.decrement, self.lower_limit,
                                         float(upper), float(thr)))
        return out


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    extend_frac: float = EXTEND_FRAC
    headline_threshold: float = 0.4
    split: str = "test"


@dataclass(frozen=True)
class GenConfig:
    subjects: int = 20
    streams_per_subject: int = 5
    test_subjects: int = -1  # -1: 30% of the subjects
    instances: int = 10
    seed: int = 0


@dataclass(frozen=True)
class RoiConfig:
    bin_threshold: float = 0.5
    src_width: int = 640
    src_height: int = 480


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "data"
    weights: str = "aganet.weights"
    reports: str = "reports"
    seed: int = 0
    train: TrainConfig = TrainConfig()
    stream: StreamConfig = StreamConfig()
    eval: EvalConfig = EvalConfig()
    gen: GenConfig = GenConfig()
    camera: CameraIntrinsics = CameraIntrinsics(615.0, 615.0, 320.0, 240.0)
    roi: RoiConfig = RoiConfig()

    @property
    def model(self) -> AganetConfig:
        return self.train.model


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_floats(v: str) -> tuple:
    v = v.strip()
    if ":" in v:
        lo, hi, step = (float(x) for x in v.split(":"))
        n = int(round((hi - lo) / step)) + 1
        return tuple(round(lo + i * step, 10) for i in range(n))
    return tuple(float(x) for x in v.split(",") if x.strip())


def _parse_ints(v: str) -> tuple:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _coerce(cls, section: str, items: dict):
    """Build dataclass ``cls`` from string items, typed by its defaults."""
    defaults = cls()
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        current = getattr(defaults, key)
        try:
            if isinstance(current, bool):
                kwargs[key] = _parse_bool(raw)
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            elif isinstance(current, tuple):
                kwargs[key] = (_parse_floats(raw) if current and isinstance(current[0], float)
                               else _parse_ints(raw))
            else:
                kwargs[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return kwargs


def _stream_config(items: dict) -> StreamConfig:
    thr, upper, plain = {}, {}, {}
    for key, raw in items.items():
        for prefix, target in (("trigger_threshold", thr), ("upper_limit", upper)):
            if key == prefix or key.startswith(prefix + "."):
                cat = key[len(prefix) + 1:].upper() or "*"
                if cat != "*" and cat not in CATEGORIES:
                    raise ConfigError(f"[stream] {key}: unknown category {cat!r}")
                try:
                    target[cat] = float(raw)
                except ValueError as exc:
                    raise ConfigError(f"[stream] {key}: {exc}") from None
                break
        else:
            plain[key] = raw
    return StreamConfig(**_coerce(StreamConfig, "stream", plain), trigger_threshold=thr,
                        upper_limit=upper)


SECTIONS = ("paths", "model", "augment", "train", "stream", "eval", "gen", "camera", "roi")


def load_config(path=None, overrides=None) -> RunConfig:
    """Read ``path`` (optional) and apply ``overrides``: {"section.key": "value"}."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")

    def sect(name):
        return dict(parser.items(name)) if parser.has_section(name) else {}

    paths = sect("paths")
    unknown = set(paths) - {"dataset", "weights", "reports"}
    if unknown:
        raise ConfigError(f"[paths] unknown key(s) {sorted(unknown)}")
    train_items = sect("train")
    seed = train_items.pop("seed", None)
    try:
        model = AganetConfig(**_coerce(AganetConfig, "model", sect("model")))
        augment = AugmentConfig(**_coerce(AugmentConfig, "augment", sect("augment")))
        train_kwargs = _coerce(TrainConfig, "train", {k: v for k, v in train_items.items()
                                                      if k not in ("model", "augment")})
        cfg = RunConfig(
            dataset=paths.get("dataset", RunConfig.dataset),
            weights=paths.get("weights", RunConfig.weights),
            reports=paths.get("reports", RunConfig.reports),
            seed=int(seed) if seed is not None else 0,
            train=TrainConfig(model=model, augment=augment, **train_kwargs),
            stream=_stream_config(sect("stream")),
            eval=EvalConfig(**_coerce(EvalConfig, "eval", sect("eval"))),
            gen=GenConfig(**_coerce(GenConfig, "gen", sect("gen"))),
            camera=CameraIntrinsics(**{k: float(v) for k, v in sect("camera").items()}
                                    ) if sect("camera") else RunConfig().camera,
            roi=RoiConfig(**_coerce(RoiConfig, "roi", sect("roi"))),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    t = cfg.train
    if t.epochs < 0 or t.batch_size < 1 or t.sample_stride < 1 or t.chunk_size < 1:
        raise ConfigError("train: epochs >= 0, batch_size/sample_stride/chunk_size >= 1")
    if not 1 <= cfg.stream.stride <= cfg.model.window_len:
        raise ConfigError("stream.stride must lie in [1, window_len]")
    if not 0 < cfg.stream.threshold < 1:
        raise ConfigError("stream.threshold must lie in (0, 1)")
    if not all(0 < th < 1 for th in cfg.eval.thresholds):
        raise ConfigError("eval.thresholds must lie in (0, 1)")
    if cfg.gen.subjects < 0 or cfg.gen.streams_per_subject < 0 or cfg.gen.instances < 0:
        raise ConfigError("gen: subjects, streams_per_subject and instances must be >= 0")
    if cfg.gen.test_subjects > cfg.gen.subjects:
        raise ConfigError("gen.test_subjects exceeds gen.subjects")
    try:
        cfg.stream.accumulator_params(cfg.model.num_categories)
    except ValueError as exc:
        raise ConfigError(f"stream: {exc}") from None
