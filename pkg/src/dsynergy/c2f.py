"""C2F block with optional DSG / MSG gating, plus a plain baseline C2F.

Wiring (all convolutions stride 1, spatial size preserved)::

    t      = act(conv1x1(x))                 C = 2h channels
    y      = stat(t)                         phi by default, (B, C, 1, 1)
    p0, p1 = split(t)                        h channels each
    p_{k+2} = bottleneck_k(p_{k+1})          k = 0 .. n-1
    paths  *= MSG group weights              if use_msg
    x_cat  = concat(p0 .. p_{n+1})           h(2+n) channels
    x_cat  = DSG(y, x_cat)                   if use_dsg
    out    = act(conv1x1(x_cat))

Parameters live in a flat ``dict`` whose key order is fixed by
:func:`param_shapes`; that order doubles as the bundle manifest order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .dso import channel_stats, channel_stats_backward
from .gating import (
    ConfigError,
    DsgParams,
    MsgParams,
    NoiseSource,
    added_param_count,
    dsg_backward,
    dsg_channels,
    dsg_forward,
    group_assign,
    msg_backward,
    msg_forward,
)

OPERATORS = ("dso", "mean", "max")


@dataclass(frozen=True)
class C2fConfig:
    c_in: int
    c_out: int
    n: int = 1
    e: float = 0.5
    use_dsg: bool = True
    use_msg: bool = True
    groups: int = 3
    shortcut: bool = True
    activation: str = "silu"
    alpha: float = 1.9
    beta: float = 0.1
    operator: str = "dso"  # statistic feeding the gates
    logit_source: str = "noise"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.hidden < 1:
            raise ConfigError(f"hidden width floor({self.c_out}*{self.e}) must be >= 1")
        if self.operator not in OPERATORS:
            raise ConfigError(f"operator must be one of {OPERATORS}, got {self.operator!r}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.use_msg:
            group_assign(self.n, self.groups)

    @property
    def hidden(self) -> int:
        return int(self.c_out * self.e)

    @property
    def channels(self) -> int:
        return 2 * self.hidden

    @property
    def cat_channels(self) -> int:
        return dsg_channels(self.channels, self.n)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: C2fConfig) -> dict[str, tuple]:
    h, C, Cp = cfg.hidden, cfg.channels, cfg.cat_channels
    shapes = {"conv1.w": (C, cfg.c_in, 1, 1), "conv1.b": (C,)}
    for k in range(cfg.n):
        shapes[f"m.{k}.cv1.w"] = (h, h, 3, 3)
        shapes[f"m.{k}.cv1.b"] = (h,)
        shapes[f"m.{k}.cv2.w"] = (h, h, 3, 3)
        shapes[f"m.{k}.cv2.b"] = (h,)
    shapes["conv2.w"] = (cfg.c_out, Cp, 1, 1)
    shapes["conv2.b"] = (cfg.c_out,)
    if cfg.use_dsg:
        shapes["dsg.w"] = (Cp, C, 1, 1)
        shapes["dsg.b"] = (Cp,)
    if cfg.use_msg:
        G = cfg.groups
        for name in ("w_msg", "b_msg", "w_scale", "b_scale", "w_t", "b_t"):
            shapes[f"msg.{name}"] = (G, C, 1, 1) if name.startswith("w") else (G,)
    return shapes


def _fan_in(name: str, shapes: dict) -> int:
    # biases share the fan-in of their weight: "conv1.b" -> "conv1.w", "msg.b_t" -> "msg.w_t"
    head, _, leaf = name.rpartition(".")
    if leaf.startswith("b"):
        name = f"{head}.w{leaf[1:]}"
    return int(np.prod(shapes[name][1:]))


def init_params(cfg: C2fConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-k, k), k = 1/sqrt(fan_in), drawn in manifest order."""
    shapes = param_shapes(cfg)
    out = {}
    for name, shape in shapes.items():
        k = 1.0 / np.sqrt(_fan_in(name, shapes))
        out[name] = rng.uniform(-k, k, size=shape)
    return out


def zero_params(cfg: C2fConfig) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in param_shapes(cfg).items()}


def block_param_count(cfg: C2fConfig) -> dict[str, int]:
    h, C, Cp = cfg.hidden, cfg.channels, cfg.cat_channels
    added = added_param_count(C, cfg.n, cfg.groups)
    counts = {
        "conv1": C * cfg.c_in + C,
        "bottlenecks": cfg.n * 2 * (h * h * 9 + h),
        "conv2": cfg.c_out * Cp + cfg.c_out,
        "dsg": added["dsg"] if cfg.use_dsg else 0,
        "msg": added["msg"] if cfg.use_msg else 0,
    }
    counts["total"] = sum(counts.values())
    return counts


def dsg_params(params, cfg: C2fConfig) -> DsgParams:
    return DsgParams(params["dsg.w"], params["dsg.b"], cfg.n)


def msg_params(params, cfg: C2fConfig) -> MsgParams:
    return MsgParams(
        params["msg.w_msg"], params["msg.b_msg"],
        params["msg.w_scale"], params["msg.b_scale"],
        params["msg.w_t"], params["msg.b_t"],
        alpha=cfg.alpha, beta=cfg.beta, logit_source=cfg.logit_source,
    )


# ------------------------------------------------------------- bottleneck


class BottleneckCache(NamedTuple):
    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray


def bottleneck_forward(x, p, shortcut: bool = True, act: str = "silu"):
    """x + act(conv3(act(conv3(x)))), or without the residual.

    ``p`` holds ``cv1.w, cv1.b, cv2.w, cv2.b``. Returns (out, cache).
    """
    if x.shape[1] != p["cv1.w"].shape[1] or p["cv2.w"].shape[0] != x.shape[1]:
        raise T.ShapeError(f"bottleneck kernels {p['cv1.w'].shape} do not fit input {x.shape}")
    a1 = T.conv3x3(x, p["cv1.w"], p["cv1.b"])
    h1 = T.activation(act, a1)
    a2 = T.conv3x3(h1, p["cv2.w"], p["cv2.b"])
    f = T.activation(act, a2)
    out = x + f if shortcut else f
    return out, BottleneckCache(x, a1, h1, a2)


def bottleneck_backward(dout, p, cache: BottleneckCache, shortcut: bool = True, act: str = "silu"):
    da2 = T.activation_backward(act, cache.a2, dout)
    dh1, dw2, db2 = T.conv3x3_backward(da2, cache.h1, p["cv2.w"])
    da1 = T.activation_backward(act, cache.a1, dh1)
    dx, dw1, db1 = T.conv3x3_backward(da1, cache.x, p["cv1.w"])
    if shortcut:
        dx = dx + dout
    return dx, {"cv1.w": dw1, "cv1.b": db1, "cv2.w": dw2, "cv2.b": db2}


def _bottleneck_params(params, k):
    pre = f"m.{k}."
    return {name[len(pre):]: v for name, v in params.items() if name.startswith(pre)}


# -------------------------------------------------------------- statistic


def gate_statistic(t: np.ndarray, operator: str):
    """Per-channel statistic feeding the gates: phi, the mean, or the max."""
    if operator == "dso":
        stats = channel_stats(t)
        return stats.phi, stats
    if operator == "mean":
        return T.reduce_spatial("mean", t), None
    if operator == "max":
        return T.reduce_spatial("max", t), None
    raise ConfigError(f"unknown operator {operator!r}")


def gate_statistic_backward(t, operator, stats, dy):
    if operator == "dso":
        return channel_stats_backward(t, stats, dy)
    return T.reduce_spatial_backward(operator, t, dy)


# ---------------------------------------------------------------- block


class C2fCache(NamedTuple):
    x: np.ndarray
    a1: np.ndarray
    t: np.ndarray
    y: np.ndarray
    stats: object
    paths: list
    bn_caches: list
    msg: object
    x_cat: np.ndarray
    dsg: object
    g: np.ndarray
    a2: np.ndarray


def c2f_forward(x, params, cfg: C2fConfig, noise: NoiseSource | None = None):
    """Forward pass of the gated block. Returns (out, cache).

    ``noise`` defaults to an eval-mode (noise-free) source.
    """
    T.check_tensor4(x)
    if x.shape[1] != cfg.c_in:
        raise T.ShapeError(f"input has {x.shape[1]} channels, block expects {cfg.c_in}")
    missing = set(param_shapes(cfg)) - set(params)
    if missing:
        raise ConfigError(f"missing parameters: {sorted(missing)}")
    if noise is None:
        noise = NoiseSource(mode="eval")
    act, h = cfg.activation, cfg.hidden

    a1 = T.pointwise_conv(x, params["conv1.w"], params["conv1.b"])
    t = T.activation(act, a1)
    y, stats = gate_statistic(t, cfg.operator) if (cfg.use_dsg or cfg.use_msg) else (None, None)

    paths = T.split_channels(t, [h, h])
    bn_caches = []
    for k in range(cfg.n):
        out, bc = bottleneck_forward(paths[-1], _bottleneck_params(params, k), cfg.shortcut, act)
        paths.append(out)
        bn_caches.append(bc)

    msg_res = None
    cat_in = paths
    if cfg.use_msg:
        msg_res = msg_forward(y, paths, msg_params(params, cfg), group_assign(cfg.n, cfg.groups), noise)
        cat_in = msg_res.paths
    x_cat = T.concat_channels(cat_in)

    dsg_res = None
    g = x_cat
    if cfg.use_dsg:
        dsg_res = dsg_forward(y, x_cat, dsg_params(params, cfg))
        g = dsg_res.x_out

    a2 = T.pointwise_conv(g, params["conv2.w"], params["conv2.b"])
    out = T.activation(act, a2)
    return out, C2fCache(x, a1, t, y, stats, paths, bn_caches, msg_res, x_cat, dsg_res, g, a2)


def c2f_backward(dout, params, cfg: C2fConfig, cache: C2fCache):
    """Returns (dx, grads) with ``grads`` keyed like ``params``."""
    act, h = cfg.activation, cfg.hidden
    grads: dict[str, np.ndarray] = {}

    da2 = T.activation_backward(act, cache.a2, dout)
    dg, grads["conv2.w"], grads["conv2.b"] = T.pointwise_conv_backward(da2, cache.g, params["conv2.w"])

    dy = None
    if cfg.use_dsg:
        dy, dx_cat, dg_dsg = dsg_backward(dg, cache.y, cache.x_cat, dsg_params(params, cfg), cache.dsg)
        grads["dsg.w"], grads["dsg.b"] = dg_dsg["w"], dg_dsg["b"]
    else:
        dx_cat = dg

    dpaths = T.split_channels(dx_cat, [h] * (2 + cfg.n))
    if cfg.use_msg:
        dy_msg, dpaths, dg_msg = msg_backward(dpaths, cache.y, cache.paths, msg_params(params, cfg), cache.msg)
        for k, v in dg_msg.items():
            grads[f"msg.{k}"] = v
        dy = dy_msg if dy is None else dy + dy_msg

    for k in reversed(range(cfg.n)):
        dxk, gk = bottleneck_backward(
            dpaths[k + 2], _bottleneck_params(params, k), cache.bn_caches[k], cfg.shortcut, act
        )
        dpaths[k + 1] = dpaths[k + 1] + dxk
        for name, v in gk.items():
            grads[f"m.{k}.{name}"] = v

    dt = T.concat_channels(dpaths[:2])
    if dy is not None:
        dt = dt + gate_statistic_backward(cache.t, cfg.operator, cache.stats, dy)
    da1 = T.activation_backward(act, cache.a1, dt)
    dx, grads["conv1.w"], grads["conv1.b"] = T.pointwise_conv_backward(da1, cache.x, params["conv1.w"])
    return dx, {k: grads[k] for k in params if k in grads}


def c2f_baseline_forward(x, params, cfg: C2fConfig):
    """Ungated C2F written the usual way: chunk, extend with bottlenecks, fuse."""
    act = cfg.activation
    y = T.split_channels(T.activation(act, T.pointwise_conv(x, params["conv1.w"], params["conv1.b"])), [cfg.hidden] * 2)
    y.extend(
        bottleneck_forward(y[-1], _bottleneck_params(params, k), cfg.shortcut, act)[0]
        for k in range(cfg.n)
    )
    return T.activation(act, T.pointwise_conv(T.concat_channels(y), params["conv2.w"], params["conv2.b"]))
