"""Kernel backend chosen at import.

The compiled extension is used when it was built; setting
``CROWDCTL_PURE_PYTHON=1`` forces the pure-Python fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
greedy_rollout = _kernels_py.greedy_rollout

if os.environ.get("CROWDCTL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        greedy_rollout = _compiled.greedy_rollout
        BACKEND = "compiled"
