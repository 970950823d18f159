"""Channel gate (DSG) and depth-group gate (MSG) driven by per-channel statistics.

Both gates read a (B, C, 1, 1) statistic map ``y`` through 1x1 projections.

DSG:  w = sigmoid(W y + b),  x_out = w * x_cat            (channel-wise)
MSG:  z = W_g y + b_g,  s = W_s y + b_s,  noise = softplus(s) * eps,
      T = alpha * sigmoid(W_t y + b_t) + beta,
      w = softmax((z + noise) / T)                          (one weight per group)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import (
    ShapeError,
    pointwise_conv,
    pointwise_conv_backward,
    sigmoid,
    softmax_backward,
    softmax_over_channels,
    softplus,
)


class ConfigError(ValueError):
    pass


_TINY = np.finfo(np.float64).tiny
_BELOW_ONE = np.nextafter(1.0, 0.0)


def dsg_channels(C: int, n: int) -> int:
    """Width of the concatenation point: floor(C/2) * (2 + n)."""
    return (C // 2) * (2 + n)


def _uniform(rng, shape, fan_in):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


# ------------------------------------------------------------------- DSG


@dataclass
class DsgParams:
    w: np.ndarray  # (C', C, 1, 1)
    b: np.ndarray  # (C',)
    n: int

    def __post_init__(self):
        cp, C = self.w.shape[:2]
        if self.w.shape[2:] != (1, 1):
            raise ShapeError(f"DSG kernel must be 1x1, got {self.w.shape}")
        if cp != dsg_channels(C, self.n):
            raise ConfigError(
                f"DSG output width {cp} != floor({C}/2)*(2+{self.n}) = {dsg_channels(C, self.n)}"
            )
        if self.b.shape != (cp,):
            raise ShapeError(f"DSG bias {self.b.shape} does not match {cp} outputs")

    @property
    def channels(self) -> tuple[int, int]:
        return self.w.shape[1], self.w.shape[0]

    @classmethod
    def zeros(cls, C: int, n: int) -> "DsgParams":
        cp = dsg_channels(C, n)
        return cls(np.zeros((cp, C, 1, 1)), np.zeros(cp), n)

    @classmethod
    def init(cls, C: int, n: int, rng: np.random.Generator) -> "DsgParams":
        cp = dsg_channels(C, n)
        return cls(_uniform(rng, (cp, C, 1, 1), C), _uniform(rng, cp, C), n)

    def named(self, prefix: str = "dsg") -> dict[str, np.ndarray]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class DsgResult(NamedTuple):
    x_out: np.ndarray
    w: np.ndarray


def dsg_forward(y: np.ndarray, x_cat: np.ndarray, p: DsgParams) -> DsgResult:
    if x_cat.shape[1] != p.w.shape[0]:
        raise ShapeError(f"x_cat has {x_cat.shape[1]} channels, DSG gates {p.w.shape[0]}")
    # saturated logits would round the gate to exactly 0 or 1; keep it open
    w = np.clip(sigmoid(pointwise_conv(y, p.w, p.b)), _TINY, _BELOW_ONE)
    return DsgResult(w * x_cat, w)


def dsg_backward(dx_out, y, x_cat, p: DsgParams, res: DsgResult):
    """Returns (dy, dx_cat, {"w": ..., "b": ...})."""
    dw_gate = (dx_out * x_cat).sum(axis=(2, 3), keepdims=True)
    dz = dw_gate * res.w * (1.0 - res.w)
    dy, dW, db = pointwise_conv_backward(dz, y, p.w)
    return dy, dx_out * res.w, {"w": dW, "b": db}


# ------------------------------------------------------------------- MSG

MSG_WEIGHTS = ("w_msg", "b_msg", "w_scale", "b_scale", "w_t", "b_t")


@dataclass
class MsgParams:
    w_msg: np.ndarray  # (G, C, 1, 1) gate logits
    b_msg: np.ndarray
    w_scale: np.ndarray  # noise scale
    b_scale: np.ndarray
    w_t: np.ndarray  # temperature
    b_t: np.ndarray
    alpha: float = 1.9
    beta: float = 0.1
    # "noise" adds softplus(z_scale) * eps to the logits; "scale" adds the
    # raw z_scale as the combined-logit formula reads literally
    logit_source: str = "noise"

    def __post_init__(self):
        G, C = self.w_msg.shape[:2]
        if G < 2:
            raise ConfigError(f"MSG needs at least 2 groups, got {G}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if self.logit_source not in ("noise", "scale"):
            raise ConfigError(f"unknown logit_source {self.logit_source!r}")
        for name in ("w_msg", "w_scale", "w_t"):
            if getattr(self, name).shape != (G, C, 1, 1):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(G, C, 1, 1)}")
        for name in ("b_msg", "b_scale", "b_t"):
            if getattr(self, name).shape != (G,):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(G,)}")

    @property
    def groups(self) -> int:
        return self.w_msg.shape[0]

    @classmethod
    def zeros(cls, C: int, G: int = 3, **kw) -> "MsgParams":
        arrs = [np.zeros((G, C, 1, 1)) if n.startswith("w") else np.zeros(G) for n in MSG_WEIGHTS]
        return cls(*arrs, **kw)

    @classmethod
    def init(cls, C: int, G: int, rng: np.random.Generator, **kw) -> "MsgParams":
        arrs = [_uniform(rng, (G, C, 1, 1) if n.startswith("w") else G, C) for n in MSG_WEIGHTS]
        return cls(*arrs, **kw)

    def named(self, prefix: str = "msg") -> dict[str, np.ndarray]:
        return {f"{prefix}.{n}": getattr(self, n) for n in MSG_WEIGHTS}


class NoiseSource:
    """Seeded standard-normal draws; all zeros in eval mode.

    Not thread-safe: give each worker its own source.
    """

    def __init__(self, seed=None, mode: str = "train"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.rng = np.random.default_rng(seed)
        self.mode = mode

    def draw(self, shape) -> np.ndarray:
        if self.mode == "eval":
            return np.zeros(shape)
        return self.rng.standard_normal(shape)


def group_assign(n: int, G: int) -> list[list[int]]:
    """Split the 2+n depth-ordered paths into G contiguous groups.

    Group sizes differ by at most one and the larger groups sit at the
    shallow end, so the two split halves share a group whenever possible.
    """
    paths = n + 2
    if n < 1:
        raise ConfigError(f"need at least one bottleneck, got n={n}")
    if not 1 <= G <= paths:
        raise ConfigError(f"cannot split {paths} paths into {G} groups")
    base, extra = divmod(paths, G)
    out, start = [], 0
    for g in range(G):
        size = base + (1 if g < extra else 0)
        out.append(list(range(start, start + size)))
        start += size
    return out


def _path_to_group(groups: Sequence[Sequence[int]], npaths: int) -> list[int]:
    owner = [-1] * npaths
    for g, members in enumerate(groups):
        for i in members:
            if not 0 <= i < npaths:
                raise ConfigError(f"group {g} names path {i}, only {npaths} paths exist")
            if owner[i] != -1:
                raise ConfigError(f"path {i} appears in groups {owner[i]} and {g}")
            owner[i] = g
    missing = [i for i, g in enumerate(owner) if g == -1]
    if missing:
        raise ConfigError(f"paths {missing} are not assigned to any group")
    return owner


class MsgResult(NamedTuple):
    paths: list
    w: np.ndarray  # (B, G, 1, 1)
    T: np.ndarray
    z_msg: np.ndarray
    z_scale: np.ndarray
    eps: np.ndarray
    a_t: np.ndarray  # pre-sigmoid temperature logits
    owner: list


def msg_forward(y, paths, p: MsgParams, groups, noise: NoiseSource) -> MsgResult:
    owner = _path_to_group(groups, len(paths))
    if len(groups) != p.groups:
        raise ConfigError(f"{len(groups)} groups given, parameters define {p.groups}")
    z_msg = pointwise_conv(y, p.w_msg, p.b_msg)
    z_scale = pointwise_conv(y, p.w_scale, p.b_scale)
    eps = noise.draw(z_msg.shape)
    a_t = pointwise_conv(y, p.w_t, p.b_t)
    T = p.alpha * sigmoid(a_t) + p.beta
    # a saturated sigmoid would put T exactly on a bound; keep it strictly
    # inside (the true gradient there is already ~0)
    hi = p.alpha + p.beta
    T = np.clip(T, np.nextafter(p.beta, hi), np.nextafter(hi, p.beta))
    if p.logit_source == "noise":
        combined = z_msg + softplus(z_scale) * eps
    else:
        combined = z_msg + z_scale
    w = softmax_over_channels(combined, T)
    scaled = [x * w[:, owner[i] : owner[i] + 1] for i, x in enumerate(paths)]
    return MsgResult(scaled, w, T, z_msg, z_scale, eps, a_t, owner)


def msg_backward(dpaths_out, y, paths, p: MsgParams, res: MsgResult):
    """Returns (dy, [dpath ...], {param name: grad})."""
    dw = np.zeros_like(res.w)
    dpaths = []
    for i, (g_out, x) in enumerate(zip(dpaths_out, paths)):
        g = res.owner[i]
        dpaths.append(g_out * res.w[:, g : g + 1])
        dw[:, g, 0, 0] += (g_out * x).sum(axis=(1, 2, 3))
    if p.logit_source == "noise":
        combined = res.z_msg + softplus(res.z_scale) * res.eps
    else:
        combined = res.z_msg + res.z_scale
    dcomb, dT = softmax_backward(dw, res.w, combined, res.T)
    if p.logit_source == "noise":
        dz_scale = dcomb * res.eps * sigmoid(res.z_scale)
    else:
        dz_scale = dcomb
    s = sigmoid(res.a_t)
    da_t = dT * p.alpha * s * (1.0 - s)

    grads = {}
    dy = np.zeros_like(y)
    for tag, dz, W in (("msg", dcomb, p.w_msg), ("scale", dz_scale, p.w_scale), ("t", da_t, p.w_t)):
        dyi, dW, db = pointwise_conv_backward(dz, y, W)
        dy += dyi
        grads[f"w_{tag}"] = dW
        grads[f"b_{tag}"] = db
    return dy, dpaths, grads


# ---------------------------------------------------------- accounting


def added_param_count(C: int, n: int, G: int = 3) -> dict[str, int]:
    cp = dsg_channels(C, n)
    return {"dsg": cp * C + cp, "msg": 3 * (G * C + G)}
