"""One forward pass through a gated C2F block, printing what each gate does.

    python demos/gates_walkthrough.py
"""

import numpy as np

from dsynergy.c2f import C2fConfig, block_param_count, c2f_baseline_forward, c2f_forward, init_params
from dsynergy.gating import NoiseSource, group_assign
from dsynergy.toy import render_scene

rng = np.random.default_rng(3)
cfg = C2fConfig(c_in=1, c_out=8, n=2)
params = init_params(cfg, rng)
x = np.concatenate([render_scene(label, rng) for label in range(4)])  # one image per class

# %% the block: conv1 -> split -> two chained bottlenecks -> MSG -> concat -> DSG -> conv2
print("paths grouped by depth:", group_assign(cfg.n, cfg.groups))
print("parameter counts:", block_param_count(cfg))

out, cache = c2f_forward(x, params, cfg)
print("\ngate statistic y = phi(mu, d) of the post-conv1 map, per image:")
print(np.round(cache.y[:, :, 0, 0], 3))

# %% MSG: one softmax weight per path group, temperature bounded in (0.1, 2.0)
print("\nMSG group weights (rows: images)")
print(np.round(cache.msg.w[:, :, 0, 0], 4))
print("temperatures:", np.round(cache.msg.T[:, :, 0, 0].ravel(), 3))

# %% training mode adds softplus-scaled noise to the logits
_, noisy = c2f_forward(x, params, cfg, NoiseSource(seed=1))
print("\nMSG weights with training noise")
print(np.round(noisy.msg.w[:, :, 0, 0], 4))

# %% DSG: a sigmoid gate per concatenated channel
w = cache.dsg.w[:, :, 0, 0]
print(f"\nDSG gates: min {w.min():.3f} max {w.max():.3f} mean {w.mean():.3f}")

# %% switching both gates off recovers the plain block bit for bit
plain = C2fConfig(c_in=1, c_out=8, n=2, use_dsg=False, use_msg=False)
p_plain = {k: v for k, v in params.items() if not k.startswith(("dsg.", "msg."))}
same = np.array_equal(c2f_forward(x, p_plain, plain)[0], c2f_baseline_forward(x, p_plain, plain))
print("gates off == baseline:", same)
