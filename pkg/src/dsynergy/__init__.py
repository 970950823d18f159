"""Dual-statistic channel gating for C2F-style convolutional blocks."""

from .dso import ChannelStats, Region, RegionConfig, channel_stats, classify_regions, dso_apply
from .gating import DsgParams, MsgParams, NoiseSource, added_param_count, dsg_forward, group_assign, msg_forward
from .c2f import C2fConfig, c2f_baseline_forward, c2f_forward, block_param_count

__version__ = "0.1.0"
