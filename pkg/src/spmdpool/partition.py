"""Split ``0:step:maxvalue`` into per-worker subranges and expand them.

The split is the master's original formula: rank ``i`` covers
``[i*(maxvalue/nproc) + step*(i > 0), (i+1)*(maxvalue/nproc)]``, the one-step
offset ("middlestep") keeping neighbouring ranks from sharing a point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "InvalidParams",
    "PartitionParams",
    "Subrange",
    "check_divisible",
    "expand_colon",
    "grid_index",
    "make_partition",
]

# Endpoint-inclusion fuzz for colon ranges, in ulps.
FUZZ_ULPS = 4


class InvalidParams(ValueError):
    pass


@dataclass(frozen=True)
class PartitionParams:
    nproc: int
    maxvalue: float
    step: float

    def validate(self) -> None:
        if isinstance(self.nproc, bool) or not isinstance(self.nproc, int) or self.nproc < 1:
            raise InvalidParams(f"nproc must be a positive integer, got {self.nproc!r}")
        if not (math.isfinite(self.step) and self.step > 0):
            raise InvalidParams(f"step must be finite and > 0, got {self.step!r}")
        if not (math.isfinite(self.maxvalue) and self.maxvalue >= self.step):
            raise InvalidParams(
                f"maxvalue must be finite and >= step, got {self.maxvalue!r}"
            )


@dataclass(frozen=True)
class Subrange:
    rank: int
    inf: float
    sup: float
    step: float


def make_partition(params: PartitionParams) -> list[Subrange]:
    params.validate()
    nproc, maxvalue, step = params.nproc, float(params.maxvalue), float(params.step)
    width = maxvalue / nproc
    parts = []
    for i in range(nproc):
        middlestep = 0.0 if i == 0 else 1.0
        inf = i * width + middlestep * step
        sup = (i + 1) * width
        parts.append(Subrange(i, inf, sup, step))
    return parts


def _near_multiple(value: float, step: float) -> int | None:
    """``round(value/step)`` if that multiple of step is within fuzz of value."""
    q = value / step
    if not math.isfinite(q):
        return None
    n = round(q)
    if abs(n * step - value) <= FUZZ_ULPS * math.ulp(value):
        return n
    return None


def grid_index(value: float, step: float) -> int | None:
    """Index ``j`` such that ``j*step`` is ``value`` up to the fuzz, else None."""
    return _near_multiple(value, step)


def _count(sr: Subrange) -> int:
    span = sr.sup - sr.inf
    n = _near_multiple(span, sr.step)
    return n if n is not None else math.floor(span / sr.step)


def expand_colon(sr: Subrange) -> np.ndarray:
    """Values of the colon range ``inf:step:sup`` as a float64 array.

    Every element is one multiplication plus at most one addition away from
    exact: ``inf + k*step``. When ``inf`` sits on the global ``0:step`` grid
    (every rank of a divisible partition does), elements are formed as
    ``(j0 + k)*step`` from the global index ``j0`` instead, so that a
    partitioned range reproduces the unpartitioned one bit for bit.
    """
    if sr.sup < sr.inf:
        return np.empty(0)
    j0 = grid_index(sr.inf, sr.step)
    if j0 is not None:
        j1 = grid_index(sr.sup, sr.step)
        n = j1 - j0 if j1 is not None else _count(sr)
        return np.arange(j0, j0 + n + 1, dtype=np.float64) * sr.step
    n = _count(sr)
    return sr.inf + np.arange(n + 1, dtype=np.float64) * sr.step


def check_divisible(params: PartitionParams) -> bool:
    """True iff ``maxvalue/nproc`` is a whole number of steps (within fuzz)."""
    params.validate()
    if params.nproc == 1:
        return True
    return _near_multiple(params.maxvalue / params.nproc, params.step) is not None
