"""Log-distance RSSI model: evaluation, inversion, least-squares calibration, noise."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

LN10 = math.log(10.0)


@dataclass(frozen=True)
class PathLossParams:
    """Propagation exponent ``alpha`` and reference RSSI ``beta`` (dBm at 1 m)."""

    alpha: float = 2.0
    beta: float = -46.4
    d0: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.d0 != 1.0:
            raise ValueError("reference distance d0 is fixed at 1 m")


@dataclass(frozen=True)
class NoiseSpec:
    rssi_std: float = 0.1
    motion_std_xy: float = 0.05
    motion_std_z: float = 0.03
    height_sensor_std: float = 0.02
    # anchors default to the target noise level when unset
    anchor_rssi_std: float | None = None

    def __post_init__(self):
        for name in ("rssi_std", "motion_std_xy", "motion_std_z", "height_sensor_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.anchor_rssi_std is not None and self.anchor_rssi_std < 0:
            raise ValueError("anchor_rssi_std must be non-negative")

    def std_for(self, kind: str) -> float:
        if kind == "anchor" and self.anchor_rssi_std is not None:
            return self.anchor_rssi_std
        return self.rssi_std


@dataclass(frozen=True)
class RssiSample:
    beacon_id: str
    value: float
    step_index: int


def expected_rssi(params: PathLossParams, d):
    """Mean RSSI in dBm at distance ``d`` meters (scalar or array)."""
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr <= 0):
        raise ValueError("distance must be positive")
    out = -10.0 * params.alpha * np.log10(d_arr) + params.beta
    return float(out) if out.ndim == 0 else out


def distance_from_rssi(params: PathLossParams, rssi):
    """Invert the path-loss model: RSSI (dBm) to range (m)."""
    out = 10.0 ** ((params.beta - np.asarray(rssi, dtype=float)) / (10.0 * params.alpha))
    return float(out) if np.ndim(out) == 0 else out


def fit_params(pairs: Iterable[tuple[float, float]]) -> PathLossParams:
    """Closed-form least squares for ``alpha``, ``beta`` from (distance, RSSI) pairs.

    Raises:
        ValueError: fewer than two distinct distances.
    """
    arr = np.asarray(list(pairs), dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise ValueError("need at least two (distance, rssi) pairs")
    if np.any(arr[:, 0] <= 0):
        raise ValueError("distances must be positive")
    x = np.log10(arr[:, 0])
    y = arr[:, 1]
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-300 or np.ptp(arr[:, 0]) == 0:
        raise ValueError("singular system: all distances are equal")
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    return PathLossParams(alpha=-slope / 10.0, beta=intercept)


def simulate_rssi(true_distance, params: PathLossParams, noise, rng: np.random.Generator, size=None):
    """Noisy RSSI draw(s): model mean plus Gaussian noise in dB.

    ``noise`` is either a :class:`NoiseSpec` (its ``rssi_std`` is used) or a
    plain standard deviation in dB.
    """
    rssi_std = noise.rssi_std if isinstance(noise, NoiseSpec) else float(noise)
    mean = expected_rssi(params, true_distance)
    if rssi_std == 0:
        return mean if size is None else np.full(size, mean, dtype=float)
    return mean + rng.normal(0.0, rssi_std, size=size)


def range_noise_std(params: PathLossParams, d, rssi_std: float):
    """First-order range standard deviation caused by ``rssi_std`` dB of RSSI noise."""
    return np.asarray(d, dtype=float) * (LN10 / (10.0 * params.alpha)) * rssi_std


def median_noise_std(rssi_std: float, n_samples: int) -> float:
    """Approximate std of the median of ``n_samples`` Gaussian draws."""
    if n_samples <= 1:
        return rssi_std
    return rssi_std * math.sqrt(math.pi / (2.0 * n_samples))


def lower_median(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise ValueError("median of empty sample")
    s = sorted(values)
    return float(s[(len(s) - 1) // 2])


def aggregate_medians(samples: Mapping[str, Sequence[float]] | Iterable[RssiSample]) -> dict[str, float]:
    """Per-beacon lower median of the RSSI samples taken at one observation point."""
    if isinstance(samples, Mapping):
        grouped = {k: list(v) for k, v in samples.items()}
    else:
        grouped: dict[str, list[float]] = {}
        for s in samples:
            grouped.setdefault(s.beacon_id, []).append(s.value)
    return {k: lower_median(v) for k, v in grouped.items() if len(v)}


class PathLossModel(RegressorMixin, BaseEstimator):
    """Estimator wrapper around the log-distance model.

    ``fit(d, rssi)`` calibrates ``alpha_`` and ``beta_`` by least squares,
    ``predict(d)`` returns expected RSSI and ``distance(rssi)`` inverts it.

    >>> m = PathLossModel().fit([[1.0], [10.0]], [-40.0, -60.0])
    >>> round(m.alpha_, 6), round(m.beta_, 6)
    (2.0, -40.0)
    """

    def __init__(self, alpha: float | None = None, beta: float | None = None):
        self.alpha = alpha
        self.beta = beta

    def fit(self, X, y):
        X = check_array(X, ensure_2d=False).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have inconsistent lengths")
        params = fit_params(zip(X, y))
        self.alpha_, self.beta_ = params.alpha, params.beta
        self.params_ = params
        return self

    def _params(self) -> PathLossParams:
        if self.alpha is not None and self.beta is not None and not hasattr(self, "params_"):
            return PathLossParams(self.alpha, self.beta)
        check_is_fitted(self, "params_")
        return self.params_

    def predict(self, X):
        X = check_array(X, ensure_2d=False).reshape(-1)
        return np.asarray(expected_rssi(self._params(), X), dtype=float).reshape(-1)

    def distance(self, rssi):
        return np.asarray(distance_from_rssi(self._params(), rssi), dtype=float)
