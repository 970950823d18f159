"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


class EvaluationError(ArithmeticError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: str = ""  # "name[index]" of the worst entry

    def __bool__(self):
        return self.passed


def numerical_grad(f: Callable[[dict], float], point: Mapping[str, np.ndarray], step: float = 1e-4, order: int = 2):
    """Central differences of ``f`` at ``point`` with h = step * (1 + |p|) per entry.

    ``order=2`` is (f(p+h) - f(p-h)) / 2h. ``order=4`` is the five-point
    stencil (8[f(p+h) - f(p-h)] - [f(p+2h) - f(p-2h)]) / 12h, whose truncation
    error is O(h^4) instead of O(h^2).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    p = {k: np.array(v, dtype=np.float64, copy=True) for k, v in point.items()}
    out = {}
    for name, arr in p.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * (1.0 + abs(orig))
            vals = []
            for k in ((1, -1) if order == 2 else (1, -1, 2, -2)):
                flat[i] = orig + k * h
                vals.append(f(p))
            flat[i] = orig
            if not np.all(np.isfinite(vals)):
                raise EvaluationError(f"non-finite value perturbing {name}[{i}]")
            if order == 2:
                gflat[i] = (vals[0] - vals[1]) / (2.0 * h)
            else:
                gflat[i] = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h)
        out[name] = g
    return out


def grad_check(
    f: Callable[[dict], float],
    grad_f: Callable[[dict], Mapping[str, np.ndarray]],
    point,
    step: float = 1e-4,
    tol: float = 1e-5,
    order: int = 2,
) -> GradCheckReport:
    """Compare ``grad_f(point)`` with central differences of ``f``.

    ``point`` is either a mapping of name -> array, in which case ``f`` and
    ``grad_f`` take and return such mappings, or a bare scalar/array that is
    passed straight through. Relative error per entry is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if not isinstance(point, Mapping):
        f_bare, g_bare = f, grad_f
        f = lambda d: f_bare(d["p"])  # noqa: E731
        grad_f = lambda d: {"p": g_bare(d["p"])}  # noqa: E731
        point = {"p": point}
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    f0 = f(point)
    if not np.isfinite(f0):
        raise EvaluationError("f is not finite at the check point")
    analytic = grad_f(point)
    numeric = numerical_grad(f, point, step, order)
    worst, where = 0.0, ""
    for name, n in numeric.items():
        a = np.asarray(analytic[name], dtype=np.float64).reshape(n.shape)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        rel = np.abs(a - n) / denom
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
            idx = tuple(int(i) for i in np.unravel_index(rel.argmax(), rel.shape))
            where = f"{name}{list(idx)}"
    return GradCheckReport(worst, worst <= tol, where)
