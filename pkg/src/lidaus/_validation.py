"""Argument checks shared by the estimator wrappers."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np


def check_positive(name: str, value, allow_zero: bool = False) -> float:
    v = float(value)
    if not math.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be finite and {bound}, got {value!r}")
    return v


def check_fraction(name: str, value) -> float:
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return v


def check_int(name: str, value, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value:
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if int(value) < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_point(name: str, p, dim: int = 3) -> np.ndarray:
    a = np.asarray(p, dtype=float).reshape(-1)
    if a.shape != (dim,) or not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be {dim} finite coordinates, got {p!r}")
    return a


def check_records(records: Iterable) -> list:
    """Materialize observation records, requiring strictly increasing step indices."""
    from lidaus.uslam import ObservationRecord

    out = list(records)
    prev = None
    for r in out:
        if not isinstance(r, ObservationRecord):
            raise TypeError(f"expected ObservationRecord, got {type(r).__name__}")
        if prev is not None and r.step_index <= prev:
            raise ValueError(f"step indices must increase: {r.step_index} after {prev}")
        prev = r.step_index
    return out


def check_ids(ids: Sequence[str] | None, known: Iterable[str]) -> list[str]:
    known = set(known)
    if ids is None:
        return sorted(known)
    missing = [b for b in ids if b not in known]
    if missing:
        raise KeyError(f"no estimate for beacon(s) {', '.join(map(str, missing))}")
    return list(ids)
