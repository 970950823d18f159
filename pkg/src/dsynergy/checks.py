"""Finite-difference checks for every differentiable piece of the library.

Each case draws inputs uniformly from [0.1, 2.0], projects the output onto a
fixed random tensor ``R`` so the loss sum(out * R) has O(1) gradients
everywhere, and compares the hand-written backward pass with central
differences. Draws that put two candidates for a spatial max within
``MAX_GAP`` of each other are redrawn: the max is not differentiable there
and a finite difference straddling the kink is meaningless.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .c2f import C2fConfig, bottleneck_backward, bottleneck_forward, c2f_backward, c2f_forward, init_params
from .dso import channel_stats, channel_stats_backward
from .gating import (
    DsgParams,
    MsgParams,
    NoiseSource,
    dsg_backward,
    dsg_forward,
    group_assign,
    msg_backward,
    msg_forward,
)
from .gradcheck import GradCheckReport, grad_check

LOW, HIGH = 0.1, 2.0
MAX_GAP = 1e-2
# A whole block has parameter gradients down to ~1e-8 against an O(1) loss;
# at step 1e-4 round-off in f alone is ~1e-5 relative there, so the block
# case uses a larger step (the fourth-order stencil keeps truncation tiny).
# The wider block gap keeps those larger perturbations of conv1 off the max kink.
CASE_STEP = {"c2f_block": 3e-3}
BLOCK_MAX_GAP = 5e-2
DEFAULT_STEP = 1e-4


def _u(rng, *shape):
    return rng.uniform(LOW, HIGH, size=shape)


def _max_gap(x: np.ndarray) -> float:
    B, C, H, W = x.shape
    if H * W < 2:
        return np.inf
    s = np.sort(x.reshape(B, C, H * W), axis=2)
    return float((s[..., -1] - s[..., -2]).min())


def _check(forward: Callable, backward: Callable, point: dict, rng, step, tol, order) -> GradCheckReport:
    R = rng.standard_normal(np.shape(forward(point)))

    def f(p):
        return float((forward(p) * R).sum())

    return grad_check(f, lambda p: backward(p, R), point, step, tol, order)


# Each case builder returns (forward(point) -> out, backward(point, R) -> grads, point)


def case_pointwise_conv(rng):
    pt = {"x": _u(rng, 2, 3, 2, 3), "w": _u(rng, 4, 3, 1, 1), "b": _u(rng, 4)}
    fwd = lambda p: T.pointwise_conv(p["x"], p["w"], p["b"])  # noqa: E731

    def bwd(p, R):
        dx, dw, db = T.pointwise_conv_backward(R, p["x"], p["w"])
        return {"x": dx, "w": dw, "b": db}

    return fwd, bwd, pt


def case_conv3x3(rng):
    pt = {"x": _u(rng, 2, 2, 3, 4), "w": _u(rng, 3, 2, 3, 3), "b": _u(rng, 3)}
    fwd = lambda p: T.conv3x3(p["x"], p["w"], p["b"])  # noqa: E731

    def bwd(p, R):
        dx, dw, db = T.conv3x3_backward(R, p["x"], p["w"])
        return {"x": dx, "w": dw, "b": db}

    return fwd, bwd, pt


def _case_activation(kind):
    def build(rng):
        pt = {"x": _u(rng, 2, 3, 2, 2)}
        return (
            lambda p: T.activation(kind, p["x"]),
            lambda p, R: {"x": T.activation_backward(kind, p["x"], R)},
            pt,
        )

    return build


def _case_reduce(kind):
    def build(rng):
        x = _u(rng, 2, 3, 2, 3)
        while kind == "max" and _max_gap(x) < MAX_GAP:
            x = _u(rng, 2, 3, 2, 3)
        return (
            lambda p: T.reduce_spatial(kind, p["x"]),
            lambda p, R: {"x": T.reduce_spatial_backward(kind, p["x"], R)},
            {"x": x},
        )

    return build


def case_softmax(rng):
    # checked through log w: a saturated softmax has weights (and gradients)
    # near 1e-9, below what a float64 central difference on an O(1) loss can
    # resolve; log w keeps every gradient O(1) and exercises the same backward
    pt = {"z": _u(rng, 2, 3, 1, 1), "T": _u(rng, 2, 3, 1, 1)}

    def fwd(p):
        return np.log(T.softmax_over_channels(p["z"], p["T"]))

    def bwd(p, R):
        w = T.softmax_over_channels(p["z"], p["T"])
        dz, dT = T.softmax_backward(R / w, w, p["z"], p["T"])
        return {"z": dz, "T": dT}

    return fwd, bwd, pt


def case_concat(rng):
    pt = {"a": _u(rng, 2, 1, 2, 2), "b": _u(rng, 2, 3, 2, 2)}
    fwd = lambda p: T.concat_channels([p["a"], p["b"]])  # noqa: E731

    def bwd(p, R):
        da, db = T.split_channels(R, [1, 3])
        return {"a": da, "b": db}

    return fwd, bwd, pt


def case_channel_stats(rng):
    x = _u(rng, 2, 3, 2, 3)
    while _max_gap(x) < MAX_GAP:
        x = _u(rng, 2, 3, 2, 3)
    fwd = lambda p: channel_stats(p["x"]).phi  # noqa: E731

    def bwd(p, R):
        return {"x": channel_stats_backward(p["x"], channel_stats(p["x"]), R)}

    return fwd, bwd, {"x": x}


def case_dsg(rng):
    C, n = 4, 2
    Cp = (C // 2) * (2 + n)
    pt = {"y": _u(rng, 2, C, 1, 1), "x_cat": _u(rng, 2, Cp, 2, 2),
          "w": rng.uniform(-1, 1, (Cp, C, 1, 1)), "b": rng.uniform(-1, 1, Cp)}

    def fwd(p):
        return dsg_forward(p["y"], p["x_cat"], DsgParams(p["w"], p["b"], n)).x_out

    def bwd(p, R):
        params = DsgParams(p["w"], p["b"], n)
        res = dsg_forward(p["y"], p["x_cat"], params)
        dy, dx, g = dsg_backward(R, p["y"], p["x_cat"], params, res)
        return {"y": dy, "x_cat": dx, "w": g["w"], "b": g["b"]}

    return fwd, bwd, pt


def case_msg(rng, logit_source="noise"):
    C, n, G, h = 4, 2, 3, 2
    groups = group_assign(n, G)
    pt = {"y": _u(rng, 2, C, 1, 1)}
    for i in range(n + 2):
        pt[f"path{i}"] = _u(rng, 2, h, 2, 2)
    # initialisation-scale weights; larger ones saturate the softmax
    k = 1.0 / np.sqrt(C)
    for name in ("w_msg", "w_scale", "w_t"):
        pt[name] = rng.uniform(-k, k, (G, C, 1, 1))
    for name in ("b_msg", "b_scale", "b_t"):
        pt[name] = rng.uniform(-k, k, G)
    names = ("w_msg", "b_msg", "w_scale", "b_scale", "w_t", "b_t")

    def unpack(p):
        params = MsgParams(*(p[k] for k in names), logit_source=logit_source)
        return params, [p[f"path{i}"] for i in range(n + 2)]

    def fwd(p):
        params, paths = unpack(p)
        res = msg_forward(p["y"], paths, params, groups, NoiseSource(mode="eval"))
        return T.concat_channels(res.paths)

    def bwd(p, R):
        params, paths = unpack(p)
        res = msg_forward(p["y"], paths, params, groups, NoiseSource(mode="eval"))
        dy, dpaths, g = msg_backward(T.split_channels(R, [h] * (n + 2)), p["y"], paths, params, res)
        out = {"y": dy, **g}
        out.update({f"path{i}": d for i, d in enumerate(dpaths)})
        return out

    return fwd, bwd, pt


def case_bottleneck(rng, shortcut=True):
    h = 2
    pt = {"x": _u(rng, 2, h, 3, 3)}
    for name in ("cv1", "cv2"):
        pt[f"{name}.w"] = rng.uniform(-0.5, 0.5, (h, h, 3, 3))
        pt[f"{name}.b"] = rng.uniform(-0.5, 0.5, h)

    def fwd(p):
        return bottleneck_forward(p["x"], p, shortcut)[0]

    def bwd(p, R):
        _, cache = bottleneck_forward(p["x"], p, shortcut)
        dx, g = bottleneck_backward(R, p, cache, shortcut)
        return {"x": dx, **g}

    return fwd, bwd, pt


def random_block_config(rng) -> C2fConfig:
    n = int(rng.integers(1, 4))
    c_out = int(rng.choice([4, 6]))
    groups = int(rng.integers(2, n + 3))
    return C2fConfig(
        c_in=int(rng.integers(1, 4)), c_out=c_out, n=n,
        use_dsg=True, use_msg=True, groups=groups,
        shortcut=bool(rng.integers(0, 2)),
        operator=str(rng.choice(["dso", "dso", "mean", "max"])),
    )


def case_block(rng, cfg: C2fConfig | None = None):
    """Full gated block in eval mode; gradients w.r.t. input and every parameter."""
    cfg = cfg or random_block_config(rng)
    while True:
        params = init_params(cfg, rng)
        x = _u(rng, 2, cfg.c_in, 3, 3)
        _, cache = c2f_forward(x, params, cfg)
        if cfg.operator == "mean" or _max_gap(cache.t) >= BLOCK_MAX_GAP:
            break
    pt = dict(params, x=x)

    def split(p):
        return p["x"], {k: v for k, v in p.items() if k != "x"}

    def fwd(p):
        x, prm = split(p)
        return c2f_forward(x, prm, cfg)[0]

    def bwd(p, R):
        x, prm = split(p)
        _, cache = c2f_forward(x, prm, cfg)
        dx, g = c2f_backward(R, prm, cfg, cache)
        return {"x": dx, **g}

    return fwd, bwd, pt


OP_CASES: dict[str, Callable] = {
    "pointwise_conv": case_pointwise_conv,
    "conv3x3": case_conv3x3,
    "sigmoid": _case_activation("sigmoid"),
    "softplus": _case_activation("softplus"),
    "silu": _case_activation("silu"),
    "reduce_mean": _case_reduce("mean"),
    "reduce_max": _case_reduce("max"),
    "softmax_over_channels": case_softmax,
    "concat_channels": case_concat,
    "channel_stats": case_channel_stats,
    "dsg": case_dsg,
    "msg": case_msg,
    "msg_literal_scale": lambda rng: case_msg(rng, "scale"),
    "bottleneck": case_bottleneck,
    "bottleneck_no_shortcut": lambda rng: case_bottleneck(rng, False),
}


def run_case(name: str, rng, step=None, tol=1e-5, order=4) -> GradCheckReport:
    """One random draw of a case; ``step=None`` picks the case's default."""
    builder = OP_CASES[name] if name != "c2f_block" else case_block
    fwd, bwd, pt = builder(rng)
    step = step if step is not None else CASE_STEP.get(name, DEFAULT_STEP)
    return _check(fwd, bwd, pt, rng, step, tol, order)


def gradient_suite(
    seed: int = 0, trials: int = 20, step=None, tol=1e-5, order=4, names=None
) -> Iterator[tuple[str, GradCheckReport]]:
    """Yield (case name, worst report over ``trials`` draws) for every case."""
    rng = np.random.default_rng(seed)
    for name in names or [*OP_CASES, "c2f_block"]:
        worst = None
        for _ in range(trials):
            rep = run_case(name, rng, step, tol, order)
            if worst is None or rep.max_rel_err > worst.max_rel_err:
                worst = rep
        yield name, worst
