"""Where channels land in the (mean, peak-minus-mean) plane.

Prints a coarse character map of the four regions, then places the four
synthetic scene classes on it using their raw-image statistics.

    python demos/decision_surface.py
"""

import numpy as np

from dsynergy.dso import Region, channel_stats, classify_point, dso_apply, surface_grid
from dsynergy.toy import render_scene

# %% the operator: phi = (d + 1)(mu + 1) - 1, bilinear with a unit cross term
for mu, d in [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0.5)]:
    print(f"phi({mu}, {d}) = {dso_apply(mu, d)}")

# %% region map over [0, 1.5]^2, d on the vertical axis (top = large d)
mark = {Region.BACKGROUND: ".", Region.SMALL: "s", Region.LARGE: "L", Region.MIXED: "M"}
n = 31
mu, d, phi, labels = surface_grid((0.0, 1.5, n), (0.0, 1.5, n))
grid = labels.reshape(n, n)  # rows follow mu, columns follow d
print("\nregion map (x: mu 0 -> 1.5, y: d 1.5 -> 0)")
for j in reversed(range(n)):
    print("  " + "".join(mark[Region(grid[i, j])] for i in range(n)))

# %% the synthetic classes sit in their intended regions
rng = np.random.default_rng(0)
print("\nclass centroids from 500 raw images each")
for cls in Region:
    s = channel_stats(np.concatenate([render_scene(cls, rng) for _ in range(500)]))
    m, dd = float(s.mu.mean()), float(s.d.mean())
    print(f"  {cls.label:<10} mu={m:.3f} d={dd:.3f} -> {classify_point(m, dd).label}")
