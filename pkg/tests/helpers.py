"""Shared test utilities."""

import json
import sys
from pathlib import Path

import numpy as np

LAUNCHERS = Path(__file__).parent / "launchers"


def delayed_launcher(delays: dict[int, float]) -> list[str]:
    """argv prefix for workers that first sleep ``delays[rank]`` seconds."""
    return [sys.executable, str(LAUNCHERS / "delayed.py"), json.dumps(delays)]


def bits(a) -> bytes:
    return np.asarray(a, dtype="<f8").tobytes()
