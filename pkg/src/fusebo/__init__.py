"""fusebo: entropy-aware multi-source adaptive sampling.

A library and CLI for target-oriented black-box optimization over closed
candidate pools and continuous box domains, built around a four-stage loop:
capacity budgeting, a heterogeneous bootstrap ensemble, structure-aware
candidate analysis, and Kalman-style multi-model fusion with batch selection.
"""

from .config import RunConfig
from .controller import RunLog, load_log, run_loop, save_log
from .core import Box, ClosedPool, ProblemSpec, TargetSpec, normalize_targets
from .oracles import generate_synthetic_pool, get_benchmark, load_pool

__all__ = [
    "Box",
    "ClosedPool",
    "ProblemSpec",
    "RunConfig",
    "RunLog",
    "TargetSpec",
    "generate_synthetic_pool",
    "get_benchmark",
    "load_log",
    "load_pool",
    "normalize_targets",
    "run_loop",
    "save_log",
]

__version__ = "0.1.0"
