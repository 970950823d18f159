"""Dual statistics, the synergy operator, and the four-region decision space.

Each channel of a feature map is summarised by its spatial mean ``mu`` and
its peak-to-mean difference ``d = max - mu``. The synergy operator

    phi(mu, d) = (d + 1)(mu + 1) - 1 = mu*d + mu + d

is strictly increasing in both arguments for mu > -1, d > -1, and its mixed
second derivative is 1, so a larger ``d`` raises the marginal effect of
``mu`` and vice versa.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import DomainError, reduce_spatial, reduce_spatial_backward


class Region(enum.IntEnum):
    # values match the toy-task class ids
    BACKGROUND = 0
    SMALL = 1
    LARGE = 2
    MIXED = 3

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class RegionConfig:
    """Soft boundaries around the fixed d = mu line.

    Points with |d - mu| <= band_ratio * (d + |mu|) sit on the diagonal and
    are split into mixed / background by ``phi_threshold``.
    """

    band_ratio: float = 0.2
    phi_threshold: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.band_ratio < 1.0:
            raise ValueError(f"band_ratio must lie in (0, 1), got {self.band_ratio}")


class ChannelStats(NamedTuple):
    mu: np.ndarray
    m: np.ndarray
    d: np.ndarray
    phi: np.ndarray


def dso_apply(mu, d):
    """Synergy operator, elementwise on arrays.

    Evaluated as mu*d + mu + d so the axis cases phi(mu, 0) = mu and
    phi(0, d) = d hold exactly in floating point; the factored form would
    round through mu + 1.
    """
    return mu * d + mu + d


def dso_factored(mu, d):
    return (d + 1.0) * (mu + 1.0) - 1.0


def dso_grad(mu, d):
    """(dphi/dmu, dphi/dd) = (d + 1, mu + 1)."""
    return d + 1.0, mu + 1.0


def channel_stats(x: np.ndarray) -> ChannelStats:
    mu = reduce_spatial("mean", x)
    m = reduce_spatial("max", x)
    d = m - mu
    return ChannelStats(mu, m, d, dso_apply(mu, d))


def channel_stats_backward(x: np.ndarray, stats: ChannelStats, dphi: np.ndarray) -> np.ndarray:
    """Gradient of a loss on ``stats.phi`` back to ``x``."""
    gmu, gd = dso_grad(stats.mu, stats.d)
    dmu = dphi * gmu
    dd = dphi * gd
    # d = m - mu
    return reduce_spatial_backward("mean", x, dmu - dd) + reduce_spatial_backward("max", x, dd)


def classify_point(mu: float, d: float, phi: float | None = None, cfg: RegionConfig = RegionConfig()) -> Region:
    if phi is None:
        phi = dso_apply(mu, d)
    if abs(d - mu) <= cfg.band_ratio * (d + abs(mu) + 1e-12):
        return Region.MIXED if phi > cfg.phi_threshold else Region.BACKGROUND
    return Region.SMALL if d > mu else Region.LARGE


def classify_regions(stats: ChannelStats, cfg: RegionConfig = RegionConfig()) -> np.ndarray:
    """Integer region ids (see :class:`Region`) with shape (B, C)."""
    mu = stats.mu[:, :, 0, 0]
    d = stats.d[:, :, 0, 0]
    phi = stats.phi[:, :, 0, 0]
    band = np.abs(d - mu) <= cfg.band_ratio * (d + np.abs(mu) + 1e-12)
    on_band = np.where(phi > cfg.phi_threshold, Region.MIXED, Region.BACKGROUND)
    off_band = np.where(d > mu, Region.SMALL, Region.LARGE)
    return np.where(band, on_band, off_band).astype(np.int64)


def surface_grid(mu_range, d_range, steps=None, cfg: RegionConfig = RegionConfig()):
    """Evaluate phi and the region label on a uniform (mu, d) grid.

    ``mu_range`` / ``d_range`` are (min, max, steps) triples, or (min, max)
    pairs with a shared ``steps``. Rows come out mu-major.
    Returns (mu, d, phi, labels) as flat arrays.
    """
    axes = []
    for r in (mu_range, d_range):
        lo, hi, n = (r if len(r) == 3 else (*r, steps))
        if n is None or int(n) < 2:
            raise DomainError("a surface axis needs at least 2 steps")
        if not lo < hi:
            raise DomainError(f"degenerate or reversed range ({lo}, {hi})")
        axes.append(np.linspace(lo, hi, int(n)))
    mu, d = np.meshgrid(axes[0], axes[1], indexing="ij")
    mu, d = mu.ravel(), d.ravel()
    phi = dso_apply(mu, d)
    labels = np.array([classify_point(a, b, c, cfg) for a, b, c in zip(mu, d, phi)], dtype=np.int64)
    return mu, d, phi, labels


def surface_csv(mu, d, phi, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mu", "d", "phi", "label"])
    for row in zip(mu, d, phi, labels):
        w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), Region(row[3]).label])
    return buf.getvalue()
