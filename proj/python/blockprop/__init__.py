"""Block-sparse video inference with a learned block-selection policy."""

import json

from ._blockprop import (
    Clip,
    Error,
    Pipeline,
    RunConfig,
    block_maxpool,
    conv2d,
    generate_clip,
    ig_detection,
    ig_semseg,
    load_clip,
    oracle_detect,
    oracle_segment,
    reinforce_loss,
    sample_actions,
    selftest,
    spearman,
)
from ._blockprop import bench as _bench

__all__ = [
    "Clip",
    "Error",
    "Pipeline",
    "RunConfig",
    "bench",
    "block_maxpool",
    "conv2d",
    "generate_clip",
    "ig_detection",
    "ig_semseg",
    "load_clip",
    "oracle_detect",
    "oracle_segment",
    "reinforce_loss",
    "sample_actions",
    "selftest",
    "spearman",
]


def bench(config, taus=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)):
    """Tau sweep with full-execution and random baselines, as a dict."""
    return json.loads(_bench(config, list(taus)))
