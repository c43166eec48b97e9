"""AGANet: a compact fully convolutional network for frame-wise action scores.

Topology (channels-first, input ``(3, T, K)``)::

    sd1   3x5 conv                       -> relu          (c1, T, K)
    lsta  5x1 conv on sd1 -> sigmoid mask M; trunk F*(1+M)
    sd2   3x5 conv                       -> relu          (c2, T, K)   low-level
    td1   5x1 conv, stride 2 on T        -> relu          (c3, T/2, K)
    td2   5x1 conv, stride 2 on T        -> relu          (c4, T/4, K)
    td3   5x1 conv                       -> relu
    td4   5x1 conv                       -> relu          (c4, T/4, K) high-level
    gsa   5x1 s2 conv -> 5x1 conv -> [max_T, avg_T] -> 1x1 conv -> sigmoid w
          low-level modulated as F_l*(1+w)
    head  concat(F_l*(1+w), upsample4(td4)) -> mean over K -> 1x1 conv -> sigmoid

Batched inputs are ``(N, C, T, K)``; internally activations are kept channel-major
``(C, N, T, K)``. Frame scores come out as ``(N, T, C)``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import ConvSpec, ShapeError

NECK = 1
WEIGHTS_MAGIC = b"AGAN"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class AganetConfig:
    num_joints: int = 10
    num_categories: int = 10
    window_len: int = 100
    sd_channels: tuple = (16, 32)
    td_channels: tuple = (56, 72, 72, 72)
    gsa_channels: int = 32
    enable_lsta: bool = True
    enable_gsa: bool = True
    normalize_input: bool = True

    def __post_init__(self):
        if self.window_len % 4:
            raise ValueError(f"window_len must be divisible by 4, got {self.window_len}")
        if self.window_len < 4 or self.num_joints < 1 or self.num_categories < 1:
            raise ValueError("window_len, num_joints and num_categories must be positive")
        object.__setattr__(self, "sd_channels", tuple(int(c) for c in self.sd_channels))
        object.__setattr__(self, "td_channels", tuple(int(c) for c in self.td_channels))
        if len(self.sd_channels) != 2 or len(self.td_channels) != 4:
            raise ValueError("need 2 SD and 4 TD channel widths")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def layer_specs(cfg: AganetConfig) -> dict:
    """Conv specs of every layer present under ``cfg``, in forward order."""
    c1, c2 = cfg.sd_channels
    c3, c4, c5, c6 = cfg.td_channels
    g = cfg.gsa_channels
    specs = {"sd1": ConvSpec.same(3, 5, 3, c1)}
    if cfg.enable_lsta:
        specs["lsta"] = ConvSpec.same(5, 1, c1, c1)
    specs["sd2"] = ConvSpec.same(3, 5, c1, c2)
    specs["td1"] = ConvSpec.same(5, 1, c2, c3, stride_h=2)
    specs["td2"] = ConvSpec.same(5, 1, c3, c4, stride_h=2)
    specs["td3"] = ConvSpec.same(5, 1, c4, c5)
    specs["td4"] = ConvSpec.same(5, 1, c5, c6)
    if cfg.enable_gsa:
        specs["gsa1"] = ConvSpec.same(5, 1, c6, g, stride_h=2)
        specs["gsa2"] = ConvSpec.same(5, 1, g, g)
        specs["gsa_fc"] = ConvSpec(1, 1, in_channels=2 * g, out_channels=c2)
    specs["head"] = ConvSpec(1, 1, in_channels=c2 + c6, out_channels=cfg.num_categories)
    return specs


@dataclass
class ParamStore:
    """Named weights plus the optimizer state that travels with them."""

    config: AganetConfig
    params: dict = field(default_factory=dict)
    adam: object = None  # training.AdamState, attached by the trainer

    @property
    def num_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def copy(self) -> "ParamStore":
        adam = self.adam.copy() if self.adam is not None else None
        return ParamStore(self.config, {k: v.copy() for k, v in self.params.items()}, adam)

    def __getitem__(self, name):
        return self.params[name]


def build(config: AganetConfig, seed: int = 0) -> ParamStore:
    """He-normal conv weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, spec in layer_specs(config).items():
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        params[f"{name}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), spec.weight_shape)
        params[f"{name}.bias"] = np.zeros(spec.out_channels)
    # start from a low action prior: most frames carry no action
    params["head.bias"][:] = -2.0
    return ParamStore(config, params)


def count_params(config: AganetConfig) -> int:
    return sum(s.num_params for s in layer_specs(config).values())


def skeleton_image(frames, normalize: bool = True):
    """Arrange ``(T, K, 3)`` joint coordinates as a ``(3, T, K)`` image.

    With ``normalize`` the window's mean neck position is subtracted
    (scale 1 m). Also accepts a batch ``(N, T, K, 3)``.
    """
    x = np.asarray(frames, dtype=np.float64)
    if normalize:
        x = x - x[..., :, NECK:NECK + 1, :].mean(axis=-3, keepdims=True)
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


def _conv(params, name, spec, x):
    return tn.conv2d_cnhw(x, spec, params[f"{name}.weight"], params[f"{name}.bias"])


def _to_cnhw(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[:, None]
    if x.ndim == 4:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    return x  # scalar masks broadcast as-is


def _from_cnhw(x, squeeze):
    return x[:, 0] if squeeze else np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _lsta(params, a1, cache=None):
    spec = layer_specs(params.config)["lsta"]
    z, conv_cache = _conv(params.params, "lsta", spec, a1)
    m = tn.sigmoid(z)
    if cache is not None:
        cache["lsta"] = conv_cache
    return m


def _gsa(params, high, cache=None):
    specs = layer_specs(params.config)
    p = params.params
    z1, c1 = _conv(p, "gsa1", specs["gsa1"], high)
    g1 = tn.relu(z1)
    z2, c2 = _conv(p, "gsa2", specs["gsa2"], g1)
    g2 = tn.relu(z2)
    mx, mx_cache = tn.pool_time(g2, "max")
    av, av_cache = tn.pool_time(g2, "avg")
    zf, cf = _conv(p, "gsa_fc", specs["gsa_fc"], np.concatenate([mx, av], axis=0))
    w = tn.sigmoid(zf)
    if cache is not None:
        cache.update(gsa1=c1, gsa1_z=z1, gsa2=c2, gsa2_z=z2, gsa_max=mx_cache,
                     gsa_avg=av_cache, gsa_fc=cf)
    return w


def lsta_mask(params: ParamStore, features_after_sd1):
    """Soft mask in (0, 1) over the first SD layer's features, same shape."""
    x = np.asarray(features_after_sd1, dtype=np.float64)
    return _from_cnhw(_lsta(params, _to_cnhw(x)), x.ndim == 3)


def gsa_weights(params: ParamStore, high_level):
    """Channel weights in (0, 1) for the low-level features.

    For ``high_level`` of shape ``(C_h, T', W)`` the result is
    ``(C_low, 1, W)``: the T axis is squeezed by concatenated max and average
    pooling, so the weights broadcast over every frame of the low-level map.
    Batched input ``(N, C_h, T', W)`` gives ``(N, C_low, 1, W)``.
    """
    x = np.asarray(high_level, dtype=np.float64)
    return _from_cnhw(_gsa(params, _to_cnhw(x)), x.ndim == 3)


def forward(params: ParamStore, x, return_cache: bool = False, lsta_override=None,
            gsa_override=None):
    """Frame scores ``(T, C)`` for one image ``(3, T, K)``, or ``(N, T, C)``.

    ``lsta_override`` / ``gsa_override`` replace the computed masks (same
    layout as :func:`lsta_mask` / :func:`gsa_weights` output, or a scalar);
    they exist to probe the residual-attention wiring.
    """
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (3, cfg.window_len, cfg.num_joints):
        raise ShapeError(f"expected input (3, {cfg.window_len}, {cfg.num_joints}), got "
                         f"{x.shape[1:] if x.ndim == 4 else x.shape}")
    x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    specs = layer_specs(cfg)
    p = params.params
    cache = {"squeeze": squeeze}

    z, cache["sd1"] = _conv(p, "sd1", specs["sd1"], x)
    a1 = tn.relu(z)
    cache["sd1_z"] = z
    if cfg.enable_lsta:
        m = _lsta(params, a1, cache) if lsta_override is None else _to_cnhw(lsta_override)
        cache["lsta_mask"] = m
        cache["a1"] = a1
        a1 = a1 * (1.0 + m)
    z, cache["sd2"] = _conv(p, "sd2", specs["sd2"], a1)
    low = tn.relu(z)
    cache["sd2_z"] = z

    h = low
    for name in ("td1", "td2", "td3", "td4"):
        z, cache[name] = _conv(p, name, specs[name], h)
        cache[f"{name}_z"] = z
        h = tn.relu(z)
    high = h

    if cfg.enable_gsa:
        w = _gsa(params, high, cache) if gsa_override is None else _to_cnhw(gsa_override)
        cache["gsa_w"] = w
        low_mod = low * (1.0 + w)
    else:
        low_mod = low
    cache["low"] = low
    fused = np.concatenate([low_mod, tn.upsample_time(high, 4)], axis=0)
    pooled = fused.mean(axis=3, keepdims=True)
    logits, cache["head"] = _conv(p, "head", specs["head"], pooled)
    logits = logits[:, :, :, 0].transpose(1, 2, 0)  # (N, T, C)
    scores = tn.sigmoid(logits)
    cache["logits"] = logits
    cache["fused_shape"] = fused.shape
    out = scores[0] if squeeze else scores
    if return_cache:
        return out, cache
    return out


def backward(params: ParamStore, cache, grad_logits):
    """Parameter gradients given dL/d(logits), shaped like the scores.

    Working on logits rather than scores keeps the loss gradient exact when a
    sigmoid saturates.
    """
    cfg = params.config
    specs = layer_specs(cfg)
    p = params.params
    grads = {}

    def conv_back(name, upstream):
        gx, gw, gb = tn.conv2d_cnhw_backward(cache[name], specs[name],
                                             p[f"{name}.weight"], upstream)
        grads[f"{name}.weight"] = gw
        grads[f"{name}.bias"] = gb
        return gx

    g = np.asarray(grad_logits, dtype=np.float64)
    if cache["squeeze"]:
        g = g[None]
    g = np.ascontiguousarray(g.transpose(2, 0, 1)[:, :, :, None])
    g_pooled = conv_back("head", g)
    cf, n, t, k = cache["fused_shape"]
    g_fused = np.broadcast_to(g_pooled / k, (cf, n, t, k))
    c2 = cfg.sd_channels[1]
    g_low_mod = g_fused[:c2]
    g_high = tn.upsample_time_backward(np.ascontiguousarray(g_fused[c2:]), 4)

    low = cache["low"]
    if cfg.enable_gsa:
        w = cache["gsa_w"]
        g_low = g_low_mod * (1.0 + w)
        if "gsa_fc" in cache:
            g_w = (g_low_mod * low).sum(axis=2, keepdims=True)
            g_zf = tn.sigmoid_backward(w, g_w)
            g_pooled_gsa = conv_back("gsa_fc", g_zf)
            g_ch = cfg.gsa_channels
            g_g2 = (tn.pool_time_backward(cache["gsa_max"], g_pooled_gsa[:g_ch])
                    + tn.pool_time_backward(cache["gsa_avg"], g_pooled_gsa[g_ch:]))
            g_g1 = conv_back("gsa2", tn.relu_backward(cache["gsa2_z"], g_g2))
            g_high = g_high + conv_back("gsa1", tn.relu_backward(cache["gsa1_z"], g_g1))
    else:
        g_low = np.array(g_low_mod)

    h = g_high
    for name in ("td4", "td3", "td2", "td1"):
        h = conv_back(name, tn.relu_backward(cache[f"{name}_z"], h))
    g_low = g_low + h

    g_a1 = conv_back("sd2", tn.relu_backward(cache["sd2_z"], g_low))
    if cfg.enable_lsta:
        a1 = cache["a1"]
        m = cache["lsta_mask"]
        g_m = g_a1 * a1
        g_a1 = g_a1 * (1.0 + m)
        if "lsta" in cache:
            g_a1 = g_a1 + conv_back("lsta", tn.sigmoid_backward(m, g_m))
    conv_back("sd1", tn.relu_backward(cache["sd1_z"], g_a1))
    return grads


def temporal_support(config: AganetConfig, frame: int):
    """Inclusive output-frame range whose scores can depend on input ``frame``.

    Global operations (GSA pooling, window-mean normalisation) make every
    output depend on every input, in which case the whole window is returned.
    """
    T = config.window_len
    if config.enable_gsa or config.normalize_input:
        return 0, T - 1
    specs = layer_specs(config)

    def through(spec, lo, hi, n_in):
        n_out = (n_in + 2 * spec.pad_h - spec.kernel_h) // spec.stride_h + 1
        lo = -((spec.kernel_h - 1 - lo - spec.pad_h) // spec.stride_h)  # ceil division
        hi = (hi + spec.pad_h) // spec.stride_h
        return max(lo, 0), min(hi, n_out - 1), n_out

    lo, hi, n = through(specs["sd1"], frame, frame, T)
    if config.enable_lsta:
        mlo, mhi, _ = through(specs["lsta"], lo, hi, n)
        lo, hi = min(lo, mlo), max(hi, mhi)
    lo, hi, n = through(specs["sd2"], lo, hi, n)
    low = (lo, hi)
    for name in ("td1", "td2", "td3", "td4"):
        lo, hi, n = through(specs[name], lo, hi, n)
    return min(low[0], 4 * lo), max(low[1], 4 * hi + 3)


# ---------------------------------------------------------------------------
# persistence

def save_weights(store: ParamStore, path) -> None:
    """Write the binary weight container (layout in docs/weights_format.md)."""
    header = {"config": store.config.to_dict()}
    tensors = dict(store.params)
    if store.adam is not None:
        header["adam"] = store.adam.hyper_dict()
        for name, arr in store.adam.m.items():
            tensors[f"adam.m/{name}"] = arr
        for name, arr in store.adam.v.items():
            tensors[f"adam.v/{name}"] = arr
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<II", WEIGHTS_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class WeightsFormatError(ValueError):
    pass


def load_weights(path) -> ParamStore:
    from .training import AdamState

    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightsFormatError(f"{path}: truncated at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: not an AGAN weights file")
    version, hlen = struct.unpack("<II", take(8))
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"{path}: unsupported format version {version}")
    header = json.loads(bytes(take(hlen)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(data):
        raise WeightsFormatError(f"{path}: {len(data) - pos} trailing bytes")

    config = AganetConfig.from_dict(header["config"])
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    expected = {f"{n}.{s}" for n in layer_specs(config) for s in ("weight", "bias")}
    if set(params) != expected:
        raise WeightsFormatError(f"{path}: parameter names do not match the stored config")
    for name, spec in layer_specs(config).items():
        if (params[f"{name}.weight"].shape != spec.weight_shape
                or params[f"{name}.bias"].shape != (spec.out_channels,)):
            raise WeightsFormatError(f"{path}: tensor shapes of {name!r} do not match the config")
    store = ParamStore(config, params)
    if "adam" in header:
        store.adam = AdamState.from_hyper_dict(header["adam"])
        store.adam.m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        store.adam.v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    return store
