"""Correctly rounded binary64 elementary functions over numpy arrays.

Each function is first evaluated in the platform's extended ``longdouble``
and rounded to binary64. Elements whose extended result lies within a few
extended ulps of a binary64 rounding boundary (or that overflow/underflow
on the way down) are recomputed with mpmath at 256 bits. The result for an
element therefore depends only on that element's operands, never on its
position in the array or on the SIMD kernels numpy happens to dispatch.

Special values (NaN, infinities, signed zeros, ``pow(0, -y) = inf`` and the
rest of the C99 ``pow`` table) come straight from the extended libm, whose
special-case contract is the same as the binary64 one.
"""

from __future__ import annotations

import math
import warnings
from typing import Callable

import numpy as np

_LD = np.longdouble
EXTENDED = np.finfo(_LD).nmant >= 63
_GUARD_ULPS = 4
_TINY = np.finfo(np.float64).tiny
_DMAX = np.finfo(np.float64).max
_WORKPREC = 256

_mp = None


def _mpmath():
    global _mp
    if _mp is None:
        import mpmath

        _mp = mpmath
    return _mp


def _to_binary64(v) -> float:
    mp = _mpmath()
    if v == 0:
        return 0.0
    if abs(v) < mp.mpf(2) ** -1022:
        q = mp.nint(v * mp.mpf(2) ** 1074)
        return math.copysign(math.ldexp(int(q), -1074), -1.0 if v < 0 else 1.0)
    return float(v)


def _ambiguous(ext: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Indices where rounding ``ext`` to the binary64 ``d`` may be wrong."""
    ad = np.abs(d)
    finite_d = np.isfinite(d)
    normal = finite_d & (ad >= _TINY) & (ad < _DMAX)
    # Overflow, gradual underflow and the top binade go to the slow path.
    # Extended arithmetic on NaN is very slow on x87, so only touch
    # extended values where the binary64 classification calls for it.
    odd = np.flatnonzero(~normal & ~np.isnan(d))
    odd = odd[(ad[odd] == _DMAX) | (np.isfinite(ext[odd]) & (ext[odd] != 0))]
    idx = np.flatnonzero(normal)
    a = np.abs(ext[idx])
    ad = ad[idx]
    e = a - ad.astype(_LD)
    up = np.spacing(ad)
    down = ad - np.nextafter(ad, 0.0)
    half = np.where(e >= 0, up, down).astype(_LD) / 2
    near = np.abs(np.abs(e) - half) <= np.spacing(a) * _GUARD_ULPS
    return np.union1d(odd, idx[near])


def _apply(
    ext_fn: Callable[..., np.ndarray],
    dbl_fn: Callable[..., np.ndarray],
    mp_fn: Callable,
    *args: np.ndarray,
) -> np.ndarray:
    args = [a.reshape(-1) for a in np.broadcast_arrays(*[np.asarray(a, dtype=np.float64) for a in args])]
    with np.errstate(all="ignore"):
        if not EXTENDED:
            return dbl_fn(*args)
        finite = np.logical_and.reduce([np.isfinite(a) for a in args])
        live = np.flatnonzero(finite)
        out = np.empty(args[0].shape)
        dead = np.flatnonzero(~finite)
        if dead.size:
            # Non-finite operands: the binary64 special-value tables are exact.
            out[dead] = dbl_fn(*[a[dead] for a in args])
        sub = [a[live] for a in args]
        ext = ext_fn(*[a.astype(_LD) for a in sub])
        res = ext.astype(np.float64)
        redo = _ambiguous(ext, res)
    if redo.size:
        mp = _mpmath()
        with mp.workprec(_WORKPREC):
            for k in redo:
                res[k] = _to_binary64(mp_fn(*[mp.mpf(float(a[k])) for a in sub]))
    out[live] = res
    return out


def _mp_pow(x, y):
    return _mpmath().power(x, y)


if not EXTENDED:  # pragma: no cover - depends on the host ABI
    warnings.warn(
        "longdouble has no extra precision on this platform; elementary "
        "functions fall back to numpy binary64 and are not correctly rounded",
        RuntimeWarning,
        stacklevel=2,
    )


def power(x, y) -> np.ndarray:
    return _apply(np.power, np.power, _mp_pow, x, y)


def sin(x) -> np.ndarray:
    return _apply(np.sin, np.sin, lambda v: _mpmath().sin(v), x)


def cos(x) -> np.ndarray:
    return _apply(np.cos, np.cos, lambda v: _mpmath().cos(v), x)


def tan(x) -> np.ndarray:
    return _apply(np.tan, np.tan, lambda v: _mpmath().tan(v), x)


def exp(x) -> np.ndarray:
    return _apply(np.exp, np.exp, lambda v: _mpmath().exp(v), x)


def log(x) -> np.ndarray:
    return _apply(np.log, np.log, lambda v: _mpmath().log(v), x)
