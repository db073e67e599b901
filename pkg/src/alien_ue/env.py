"""Runtime environment knobs."""

import os


def worker_count(default: int = 1) -> int:
    """Worker cap from ALIEN_UE_THREADS; 1 (serial) when unset or invalid."""
    raw = os.environ.get("ALIEN_UE_THREADS", "")
    try:
        value = int(raw)
    except ValueError:
        return default
    return max(1, value)
