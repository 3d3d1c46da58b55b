"""U-SLAM: height KF + planar particle filter with per-beacon range-only EKFs.

Particles carry only the UAV's planar position; altitude comes from one scalar
Kalman filter shared by all particles. Every particle holds a 3-D Gaussian per
beacon. Only anchor beacons contribute to particle weights.

Internally the particle set is stored as dense arrays (``L`` particles by ``B``
beacons) so one filter step is a handful of batched numpy operations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from lidaus import _validation as val
from lidaus import rng as rng_mod
from lidaus.signal import (
    NoiseSpec,
    PathLossParams,
    distance_from_rssi,
    median_noise_std,
    range_noise_std,
)

_DEGENERATE_RANGE = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


class DegenerateGeometryWarning(RuntimeWarning):
    pass


class ResampleWarning(RuntimeWarning):
    pass


class EmptyClusterWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class MotionCommand:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0

    def __post_init__(self):
        if sum(1 for v in (self.dx, self.dy, self.dz) if v != 0.0) > 1:
            raise ValueError(f"motion must be axis-aligned, got {self}")

    @property
    def is_zero(self) -> bool:
        return self.dx == 0.0 and self.dy == 0.0 and self.dz == 0.0

    @property
    def length(self) -> float:
        return abs(self.dx) + abs(self.dy) + abs(self.dz)


@dataclass(frozen=True)
class HeightFilter:
    mean_z: float
    var_z: float

    def __post_init__(self):
        if not self.var_z > 0:
            raise ValueError("var_z must be positive")


def height_predict(kf: HeightFilter, dz: float, motion_std_z: float) -> HeightFilter:
    if motion_std_z < 0:
        raise ValueError("motion_std_z must be non-negative")
    return HeightFilter(kf.mean_z + dz, kf.var_z + motion_std_z**2)


def height_update(kf: HeightFilter, h: float, sensor_std: float) -> HeightFilter:
    if sensor_std < 0:
        raise ValueError("sensor_std must be non-negative")
    r = sensor_std**2
    if math.isinf(kf.var_z):
        if r == 0:
            raise ValueError("degenerate height update: infinite prior and exact sensor")
        return HeightFilter(h, r)
    if r == 0:
        raise ValueError("degenerate height update: zero sensor noise")
    k = kf.var_z / (kf.var_z + r)
    return HeightFilter(kf.mean_z + k * (h - kf.mean_z), (1.0 - k) * kf.var_z)


@dataclass
class BeaconEstimate:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(3)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(3, 3)

    def copy(self) -> "BeaconEstimate":
        return BeaconEstimate(self.mu.copy(), self.sigma.copy())

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BeaconEstimate":
        return cls(np.array(d["mu"], dtype=float), np.array(d["sigma"], dtype=float))


@dataclass
class Particle:
    pose_xy: np.ndarray
    beacon_estimates: dict[str, BeaconEstimate] = field(default_factory=dict)
    weight: float = 1.0


class RelativePosition(NamedTuple):
    r: float
    phi: float
    gamma: float


def relative_position(pose, mu) -> RelativePosition:
    """Range, azimuth and elevation of a beacon estimate seen from ``pose``."""
    d = np.asarray(mu, dtype=float) - np.asarray(pose, dtype=float)
    r = float(np.linalg.norm(d))
    phi = math.atan2(d[1], d[0])
    if phi == -math.pi:
        phi = math.pi
    gamma = math.atan2(d[2], math.hypot(d[0], d[1])) if r > 0 else 0.0
    return RelativePosition(r, phi, gamma)


@dataclass
class ObservationRecord:
    """One observation point: motion that led here, height reading, RSSI medians.

    ``planned_position`` is where the plan put the UAV (used for clustering);
    ``pose_estimate_at_record`` / ``pose_var_at_record`` are filled in by the
    filter and drive offline replay.
    """

    step_index: int
    motion: MotionCommand
    height_reading: float
    rssi_medians: dict[str, float]
    planned_position: tuple[float, float, float] | None = None
    stage: int = 0
    pose_estimate_at_record: tuple[float, float, float] | None = None
    # (var_x, cov_xy, var_y, var_z)
    pose_var_at_record: tuple[float, float, float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "step": self.step_index,
            "stage": self.stage,
            "motion": [self.motion.dx, self.motion.dy, self.motion.dz],
            "height": self.height_reading,
            "rssi": dict(sorted(self.rssi_medians.items())),
            "planned": None if self.planned_position is None else list(self.planned_position),
            "pose": None if self.pose_estimate_at_record is None else list(self.pose_estimate_at_record),
            "pose_var": None if self.pose_var_at_record is None else list(self.pose_var_at_record),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ObservationRecord":
        return cls(
            step_index=int(d["step"]),
            motion=MotionCommand(*d["motion"]),
            height_reading=float(d["height"]),
            rssi_medians={k: float(v) for k, v in d["rssi"].items()},
            planned_position=None if d.get("planned") is None else tuple(d["planned"]),
            stage=int(d.get("stage", 0)),
            pose_estimate_at_record=None if d.get("pose") is None else tuple(d["pose"]),
            pose_var_at_record=None if d.get("pose_var") is None else tuple(d["pose_var"]),
        )


# ---------------------------------------------------------------------------
# elementary operations


def motion_sample(pose_xy, u: MotionCommand, motion_std_xy: float, rng: np.random.Generator) -> np.ndarray:
    """Sample from the planar motion model. ``pose_xy`` may be ``(2,)`` or ``(L, 2)``."""
    pose = np.asarray(pose_xy, dtype=float)
    out = pose + np.array([u.dx, u.dy])
    if motion_std_xy > 0:
        out = out + rng.normal(0.0, motion_std_xy, size=pose.shape)
    return out


def _ekf_batch(mu, sigma, pose, r_obs, r_var):
    """Range-only EKF update broadcast over leading axes.

    Returns ``(mu, sigma, ok)``; entries with a degenerate predicted range are
    passed through untouched and flagged in ``ok``.
    """
    diff = mu - pose
    g = np.sqrt(np.einsum("...i,...i->...", diff, diff))
    ok = g >= _DEGENERATE_RANGE
    G = diff / np.where(ok, g, 1.0)[..., None]
    PG = np.einsum("...ij,...j->...i", sigma, G)
    q = np.einsum("...i,...i->...", G, PG) + r_var
    K = PG / q[..., None]
    innov = np.where(ok, r_obs - g, 0.0)
    mu_new = mu + K * innov[..., None]
    sigma_new = sigma - K[..., :, None] * PG[..., None, :]
    sigma_new = 0.5 * (sigma_new + np.swapaxes(sigma_new, -1, -2))
    if not ok.all():
        mu_new = np.where(ok[..., None], mu_new, mu)
        sigma_new = np.where(ok[..., None, None], sigma_new, sigma)
    return mu_new, sigma_new, ok


def _range_loglik(mu, sigma, pose, r_obs, r_var):
    """Gaussian log-likelihood of observed ranges under each beacon estimate."""
    diff = mu - pose
    g = np.sqrt(np.einsum("...i,...i->...", diff, diff))
    G = diff / np.maximum(g, _DEGENERATE_RANGE)[..., None]
    q = np.einsum("...i,...ij,...j->...", G, sigma, G) + r_var
    innov = r_obs - g
    return -0.5 * (innov * innov / q + np.log(q) + _LOG_2PI)


def ekf_update(est: BeaconEstimate, uav_pose, r_obs: float, r_std: float) -> BeaconEstimate:
    """One range-only EKF correction of a beacon estimate.

    A predicted range under 1e-6 m leaves the estimate unchanged and emits a
    :class:`DegenerateGeometryWarning`.
    """
    if not r_std > 0:
        raise ValueError("r_std must be positive")
    mu, sigma, ok = _ekf_batch(
        est.mu, est.sigma, np.asarray(uav_pose, dtype=float), float(r_obs), float(r_std) ** 2
    )
    if not bool(ok):
        warnings.warn("predicted range below 1e-6 m; update skipped", DegenerateGeometryWarning, stacklevel=2)
        return est.copy()
    return BeaconEstimate(mu, sigma)


def importance_weight(
    particle: Particle,
    anchor_observations: Mapping[str, float],
    r_stds: Mapping[str, float] | float,
    pose_z: float = 0.0,
) -> float:
    """Product of anchor range likelihoods for one particle; 1 with no anchors."""
    if not anchor_observations:
        return 1.0
    pose = np.array([particle.pose_xy[0], particle.pose_xy[1], pose_z], dtype=float)
    total = 0.0
    for aid, r_obs in anchor_observations.items():
        est = particle.beacon_estimates[aid]
        std = r_stds if isinstance(r_stds, (int, float)) else r_stds[aid]
        total += float(_range_loglik(est.mu, est.sigma, pose, float(r_obs), float(std) ** 2))
    return math.exp(total)


def systematic_resample(weights, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Low-variance resampling indices from a single uniform draw.

    All-zero weights are treated as uniform (with a :class:`ResampleWarning`).
    """
    w = np.asarray(weights, dtype=float)
    n = len(w) if n is None else int(n)
    total = w.sum()
    if not total > 0:
        warnings.warn("all particle weights are zero; resetting to uniform", ResampleWarning, stacklevel=2)
        w = np.full(len(w), 1.0 / len(w))
    else:
        w = w / total
    positions = (rng.uniform(0.0, 1.0 / n) + np.arange(n) / n)
    cumulative = np.cumsum(w)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), len(w) - 1)


def resample(particles: Sequence[Particle], rng: np.random.Generator) -> list[Particle]:
    idx = systematic_resample([p.weight for p in particles], rng)
    n = len(particles)
    return [
        Particle(
            pose_xy=np.array(particles[i].pose_xy, dtype=float),
            beacon_estimates={k: v.copy() for k, v in particles[i].beacon_estimates.items()},
            weight=1.0 / n,
        )
        for i in idx
    ]


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


# ---------------------------------------------------------------------------
# beacon initialization


MIN_CROSS_SPREAD = 1.0


def _geometry_kind(xy: np.ndarray, z: np.ndarray, min_cross_spread: float = MIN_CROSS_SPREAD) -> str:
    """'3d', 'planar', or 'degenerate' for a set of observation poses.

    Poses whose RMS distance from their best-fit line is under
    ``min_cross_spread`` metres count as collinear: a mirror image of the
    beacon across that line fits the ranges equally well.
    """
    if len(np.unique(np.round(xy, 6), axis=0)) < 2:
        return "degenerate"
    c = xy - xy.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    cross = s[1] / np.sqrt(len(xy)) if s.size > 1 else 0.0
    collinear = s.size < 2 or cross < min_cross_spread or s[1] <= 1e-3 * max(s[0], 1e-12)
    planar = float(np.ptp(z)) < 0.25
    if collinear:
        # a vertical sweep plus horizontal spread can still resolve the point
        return "degenerate" if planar or s[0] < 1e-6 else "3d-collinear"
    return "planar" if planar else "3d"


def _trilaterate(poses: np.ndarray, ranges: np.ndarray, kind: str, z_bounds: tuple[float, float], r_var=None):
    """Weighted linearised least squares position for stacked poses ``(L, n, 3)``.

    Squared-range equations are differenced against the shortest range and
    weighted by the inverse variance of each difference.
    """
    ref = int(np.argmin(ranges))
    others = np.array([i for i in range(len(ranges)) if i != ref])
    p0 = poses[:, ref : ref + 1, :]
    r0 = ranges[ref]
    pi = poses[:, others, :]
    ri = ranges[others]
    A = 2.0 * (pi - p0)
    b = np.sum(pi**2, axis=-1) - np.sum(p0**2, axis=-1) - ri**2 + r0**2
    if r_var is None or not np.any(r_var):
        w = np.ones(len(others))
    else:
        v = np.asarray(r_var, dtype=float)
        w = 1.0 / (4.0 * ri**2 * v[others] + 4.0 * r0**2 * v[ref] + 1e-12)
        w = w / w.max()
    A = A * np.sqrt(w)[None, :, None]
    b = b * np.sqrt(w)[None, :]
    z_lo, z_hi = z_bounds
    if kind == "3d":
        AtA = np.einsum("lni,lnj->lij", A, A) + 1e-9 * np.eye(3)
        Atb = np.einsum("lni,ln->li", A, b)
        x = np.linalg.solve(AtA, Atb[..., None])[..., 0]
        x[:, 2] = np.clip(x[:, 2], z_lo, z_hi)
        return x
    Axy = A[..., :2]
    AtA = np.einsum("lni,lnj->lij", Axy, Axy) + 1e-9 * np.eye(2)
    Atb = np.einsum("lni,ln->li", Axy, b)
    xy = np.linalg.solve(AtA, Atb[..., None])[..., 0]
    horiz = np.sum((poses[..., :2] - xy[:, None, :]) ** 2, axis=-1)
    dz = np.sqrt(np.maximum(np.mean(ranges**2 - horiz, axis=1), 0.0))
    pz = poses[..., 2].mean(axis=1)
    up, down = np.clip(pz + dz, z_lo, z_hi), np.clip(pz - dz, z_lo, z_hi)
    # mirror ambiguity about the flight plane: take the unclipped candidate,
    # falling back to whichever is nearer mid-height
    mid = 0.5 * (z_lo + z_hi)
    up_ok = (pz + dz) <= z_hi
    down_ok = (pz - dz) >= z_lo
    z = np.where(
        up_ok & ~down_ok, up,
        np.where(down_ok & ~up_ok, down, np.where(np.abs(up - mid) <= np.abs(down - mid), up, down)),
    )
    return np.column_stack([xy, z])


def _init_covariance(poses, ranges, r_var, mean):
    pred = np.linalg.norm(poses - mean[:, None, :], axis=-1)
    rms2 = np.mean((pred - ranges) ** 2, axis=1)
    var = np.maximum(np.maximum(rms2, float(np.mean(r_var))), 1.0)
    return var[:, None, None] * np.eye(3)


def initialize_beacon(
    poses,
    ranges,
    space_height: float = 3.0,
    r_var=None,
    floor: float = 0.0,
) -> BeaconEstimate | None:
    """Initial estimate from buffered (pose, range) pairs.

    Returns None with fewer than three observations. Degenerate geometry
    (coincident or collinear poses) falls back to the latest pose with a
    diagonal covariance of the mean range squared.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 3)
    ranges = np.asarray(ranges, dtype=float).reshape(-1)
    if len(ranges) < 3:
        return None
    r_var = np.zeros_like(ranges) if r_var is None else np.asarray(r_var, dtype=float)
    mean, sigma = _initialize_batch(poses[None], ranges, r_var, (floor, space_height), force=True)
    return BeaconEstimate(mean[0], sigma[0])


def _initialize_batch(poses, ranges, r_var, z_bounds, force: bool):
    """Per-particle initialisation; returns None when geometry is still degenerate and not forced."""
    ref = poses.mean(axis=0)
    kind = _geometry_kind(ref[:, :2], ref[:, 2])
    if kind == "3d-collinear":
        kind = "3d"
    if kind == "degenerate":
        if not force:
            return None
        rbar = float(np.mean(ranges))
        mean = poses[:, -1, :].copy()
        sigma = np.broadcast_to(max(rbar**2, 1e-6) * np.eye(3), (poses.shape[0], 3, 3)).copy()
        return mean, sigma
    mean = _trilaterate(poses, ranges, kind, z_bounds, r_var)
    return mean, _init_covariance(poses, ranges, r_var, mean)


# ---------------------------------------------------------------------------
# the filter


@dataclass
class FilterConfig:
    n_particles: int = 100
    params: PathLossParams = field(default_factory=PathLossParams)
    samples_per_point: int = 1
    space_height: float = 3.0
    ground_z: float = 0.0
    resample_threshold: float = 0.5
    init_buffer_min: int = 3
    init_buffer_max: int = 30
    # only ranges up to this distance seed a new beacon; farther ones are used
    # after init_far_max observations if the beacon never comes closer
    init_range: float | None = 10.0
    init_far_max: int = 60
    min_range_std: float = 1e-3
    anchor_init_std: float | None = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")


class FilterState:
    """Mutable particle set plus height filter for one mission."""

    def __init__(self, config: FilterConfig, noise: NoiseSpec, seed: int = 0, origin=(0.0, 0.0, 0.0)):
        self.config = config
        self.noise = noise
        L = config.n_particles
        self.poses = np.tile(np.asarray(origin[:2], dtype=float), (L, 1))
        self.weights = np.full(L, 1.0 / L)
        self.height = HeightFilter(float(origin[2]), max(noise.height_sensor_std**2, 1e-6))
        self.ids: list[str] = []
        self.index: dict[str, int] = {}
        self.kinds: list[str] = []
        self.mu = np.zeros((L, 0, 3))
        self.sigma = np.zeros((L, 0, 3, 3))
        self.initialized = np.zeros(0, dtype=bool)
        self.buffers: dict[str, list[tuple[np.ndarray, float, float]]] = {}
        self.rng_motion = rng_mod.stream(seed, "filter-motion")
        self.rng_resample = rng_mod.stream(seed, "resample")
        self.n_resamples = 0
        self.n_degenerate = 0

    @property
    def n_particles(self) -> int:
        return self.poses.shape[0]

    # -- beacon bookkeeping -------------------------------------------------

    def _register(self, beacon_id: str, kind: str) -> int:
        if beacon_id in self.index:
            return self.index[beacon_id]
        col = len(self.ids)
        self.ids.append(beacon_id)
        self.kinds.append(kind)
        self.index[beacon_id] = col
        L = self.n_particles
        self.mu = np.concatenate([self.mu, np.zeros((L, 1, 3))], axis=1)
        self.sigma = np.concatenate([self.sigma, np.tile(np.eye(3), (L, 1, 1, 1))], axis=1)
        self.initialized = np.append(self.initialized, False)
        return col

    def deploy_anchor(self, anchor_id: str) -> None:
        """Register an anchor dropped below the UAV, in every particle's own frame."""
        if anchor_id in self.index:
            raise ValueError(f"beacon {anchor_id!r} already known")
        col = self._register(anchor_id, "anchor")
        std = self.config.anchor_init_std
        if std is None:
            std = max(self.noise.motion_std_xy, 0.01)
        self.mu[:, col, :2] = self.poses
        self.mu[:, col, 2] = self.config.ground_z
        self.sigma[:, col] = np.diag([std**2, std**2, 0.05**2])
        self.initialized[col] = True

    def reset_pose(self, xy) -> None:
        """Collapse all particles onto a known planar position (maps are kept)."""
        self.poses[:] = np.asarray(xy, dtype=float)[:2]
        self.weights[:] = 1.0 / self.n_particles

    # -- estimates ------------------------------------------------------------

    def pose_estimate(self) -> np.ndarray:
        xy = self.weights @ self.poses
        return np.array([xy[0], xy[1], self.height.mean_z])

    def pose_variance(self) -> tuple[float, float, float, float]:
        d = self.poses - self.weights @ self.poses
        cov = (self.weights[:, None] * d).T @ d
        return (float(cov[0, 0]), float(cov[0, 1]), float(cov[1, 1]), float(self.height.var_z))

    def estimate(self, beacon_id: str) -> BeaconEstimate | None:
        col = self.index.get(beacon_id)
        if col is None or not self.initialized[col]:
            return None
        w = self.weights
        mu = w @ self.mu[:, col, :]
        d = self.mu[:, col, :] - mu
        sigma = np.einsum("l,lij->ij", w, self.sigma[:, col]) + (w[:, None] * d).T @ d
        return BeaconEstimate(mu, 0.5 * (sigma + sigma.T))

    def estimates(self, kind: str | None = None) -> dict[str, BeaconEstimate]:
        out = {}
        for bid, k in zip(self.ids, self.kinds):
            if kind is not None and k != kind:
                continue
            est = self.estimate(bid)
            if est is not None:
                out[bid] = est
        return out

    def particles(self) -> list[Particle]:
        """Object view of the particle set (copies)."""
        return [
            Particle(
                pose_xy=self.poses[l].copy(),
                beacon_estimates={
                    bid: BeaconEstimate(self.mu[l, c].copy(), self.sigma[l, c].copy())
                    for bid, c in self.index.items()
                    if self.initialized[c]
                },
                weight=float(self.weights[l]),
            )
            for l in range(self.n_particles)
        ]

    # -- measurement model -----------------------------------------------------

    def range_variance(self, beacon_id: str, r_obs: float) -> float:
        kind = self.kinds[self.index[beacon_id]] if beacon_id in self.index else "target"
        rssi_std = median_noise_std(self.noise.std_for(kind), self.config.samples_per_point)
        std = float(range_noise_std(self.config.params, r_obs, rssi_std))
        return max(std, self.config.min_range_std) ** 2


def slam_step(state: FilterState, record: ObservationRecord) -> FilterState:
    """Advance the filter by one observation record.

    Order: height KF, particle motion sampling, anchor likelihoods (against the
    prior beacon estimates), per-beacon EKF updates, then resampling when the
    effective sample size drops below ``resample_threshold * L``.
    """
    cfg, noise = state.config, state.noise
    u = record.motion
    if not u.is_zero:
        state.height = height_predict(state.height, u.dz, noise.motion_std_z)
        state.poses = motion_sample(state.poses, u, noise.motion_std_xy, state.rng_motion)
    state.height = height_update(state.height, record.height_reading, max(noise.height_sensor_std, 1e-6))

    L = state.n_particles
    pose3 = np.empty((L, 3))
    pose3[:, :2] = state.poses
    pose3[:, 2] = state.height.mean_z

    cols, r_obs, r_var = [], [], []
    for bid in sorted(record.rssi_medians):
        col = state._register(bid, "target") if bid not in state.index else state.index[bid]
        r = float(distance_from_rssi(cfg.params, record.rssi_medians[bid]))
        if not state.initialized[col]:
            buf = state.buffers.setdefault(bid, [])
            buf.append((pose3.copy(), r, state.range_variance(bid, r)))
            _try_initialize(state, bid, col)
            continue
        cols.append(col)
        r_obs.append(r)
        r_var.append(state.range_variance(bid, r))

    if cols:
        cols_a = np.array(cols)
        r_obs_a = np.array(r_obs)
        r_var_a = np.array(r_var)
        mu = state.mu[:, cols_a]
        sigma = state.sigma[:, cols_a]
        anchor_mask = np.array([state.kinds[c] == "anchor" for c in cols])
        if anchor_mask.any():
            ll = _range_loglik(
                mu[:, anchor_mask], sigma[:, anchor_mask], pose3[:, None, :],
                r_obs_a[anchor_mask], r_var_a[anchor_mask],
            ).sum(axis=1)
            logw = np.log(np.maximum(state.weights, 1e-300)) + ll
            logw -= logw.max()
            w = np.exp(logw)
            state.weights = w / w.sum()
        mu_new, sigma_new, ok = _ekf_batch(mu, sigma, pose3[:, None, :], r_obs_a, r_var_a)
        # beacons live inside the space
        mu_new[..., 2] = np.clip(mu_new[..., 2], cfg.ground_z, cfg.space_height)
        state.n_degenerate += int((~ok).sum())
        state.mu[:, cols_a] = mu_new
        state.sigma[:, cols_a] = sigma_new

    if effective_sample_size(state.weights) < cfg.resample_threshold * L:
        idx = systematic_resample(state.weights, state.rng_resample)
        state.poses = state.poses[idx]
        state.mu = state.mu[:, :][idx]
        state.sigma = state.sigma[idx]
        state.weights = np.full(L, 1.0 / L)
        for bid, buf in state.buffers.items():
            state.buffers[bid] = [(p[idx], r, v) for p, r, v in buf]
        state.n_resamples += 1
    return state


def _try_initialize(state: FilterState, bid: str, col: int) -> None:
    cfg = state.config
    buf = state.buffers[bid]
    near = buf if cfg.init_range is None else [e for e in buf if e[1] <= cfg.init_range]
    if len(near) >= cfg.init_buffer_min:
        use, force = near, len(near) >= cfg.init_buffer_max
    elif len(buf) >= cfg.init_far_max:
        use, force = buf, True
    else:
        return
    poses = np.stack([p for p, _, _ in use], axis=1)
    ranges = np.array([r for _, r, _ in use])
    r_var = np.array([v for _, _, v in use])
    res = _initialize_batch(poses, ranges, r_var, (cfg.ground_z, cfg.space_height), force=force)
    if res is None:
        return
    mean, sigma = res
    state.mu[:, col] = mean
    state.sigma[:, col] = sigma
    state.initialized[col] = True
    del state.buffers[bid]


def annotate(state: FilterState, record: ObservationRecord) -> ObservationRecord:
    """Copy of ``record`` carrying the filter's current pose estimate and variance."""
    return replace(
        record,
        pose_estimate_at_record=tuple(float(v) for v in state.pose_estimate()),
        pose_var_at_record=state.pose_variance(),
    )


# ---------------------------------------------------------------------------
# offline replay


def replay(
    log: Iterable[ObservationRecord],
    beacon_id: str,
    cluster_points: Iterable[int],
    init: BeaconEstimate,
    params: PathLossParams,
    rssi_std: float,
    samples_per_point: int = 1,
    pose_uncertainty: bool = True,
    min_range_std: float = 1e-3,
    z_bounds: tuple[float, float] | None = None,
) -> BeaconEstimate:
    """Re-run one beacon's EKF over the selected observation points.

    The UAV trajectory is frozen to the live run's recorded pose estimates.
    With ``pose_uncertainty`` the recorded pose variance, projected on the
    range direction, is added to the measurement variance. ``z_bounds`` clamps
    the height estimate after every update.
    """
    points = set(cluster_points)
    if not points:
        warnings.warn(f"empty cluster for {beacon_id!r}; keeping the initial estimate", EmptyClusterWarning, stacklevel=2)
        return init.copy()
    eff_std = median_noise_std(rssi_std, samples_per_point)
    mu, sigma = init.mu.copy(), init.sigma.copy()
    for rec in sorted(log, key=lambda r: r.step_index):
        if rec.step_index not in points or beacon_id not in rec.rssi_medians:
            continue
        if rec.pose_estimate_at_record is None:
            raise ValueError(f"record {rec.step_index} has no pose estimate to replay against")
        pose = np.asarray(rec.pose_estimate_at_record, dtype=float)
        r = float(distance_from_rssi(params, rec.rssi_medians[beacon_id]))
        var = max(float(range_noise_std(params, r, eff_std)), min_range_std) ** 2
        if pose_uncertainty and rec.pose_var_at_record is not None:
            vxx, vxy, vyy, vz = rec.pose_var_at_record
            d = mu - pose
            n = float(np.linalg.norm(d))
            if n >= _DEGENERATE_RANGE:
                gx, gy, gz = d / n
                var += gx * gx * vxx + 2 * gx * gy * vxy + gy * gy * vyy + gz * gz * vz
        mu, sigma, _ = _ekf_batch(mu, sigma, pose, r, var)
        if z_bounds is not None:
            mu[2] = min(max(mu[2], z_bounds[0]), z_bounds[1])
    return BeaconEstimate(mu, sigma)


# ---------------------------------------------------------------------------
# estimator facade


class USlam(BaseEstimator):
    """Streaming U-SLAM filter with a scikit-learn style interface.

    ``partial_fit(record)`` advances the filter by one observation record and
    ``fit(records)`` consumes a whole log. After fitting, ``predict(ids)``
    returns particle-averaged beacon positions and ``log_`` holds the records
    annotated with the filter's pose estimates.
    """

    def __init__(
        self,
        n_particles: int = 100,
        alpha: float = 2.0,
        beta: float = -46.4,
        rssi_std: float = 0.1,
        anchor_rssi_std: float | None = None,
        motion_std_xy: float = 0.05,
        motion_std_z: float = 0.03,
        height_sensor_std: float = 0.02,
        samples_per_point: int = 1,
        space_height: float = 3.0,
        resample_threshold: float = 0.5,
        random_state: int = 0,
    ):
        self.n_particles = n_particles
        self.alpha = alpha
        self.beta = beta
        self.rssi_std = rssi_std
        self.anchor_rssi_std = anchor_rssi_std
        self.motion_std_xy = motion_std_xy
        self.motion_std_z = motion_std_z
        self.height_sensor_std = height_sensor_std
        self.samples_per_point = samples_per_point
        self.space_height = space_height
        self.resample_threshold = resample_threshold
        self.random_state = random_state

    def _make_state(self, origin=(0.0, 0.0, 0.0)) -> FilterState:
        val.check_int("n_particles", self.n_particles)
        val.check_int("samples_per_point", self.samples_per_point)
        for name in ("rssi_std", "motion_std_xy", "motion_std_z", "height_sensor_std"):
            val.check_positive(name, getattr(self, name), allow_zero=True)
        val.check_positive("space_height", self.space_height, allow_zero=True)
        val.check_fraction("resample_threshold", self.resample_threshold)
        origin = val.check_point("origin", origin)
        cfg = FilterConfig(
            n_particles=self.n_particles,
            params=PathLossParams(self.alpha, self.beta),
            samples_per_point=self.samples_per_point,
            space_height=self.space_height,
            resample_threshold=self.resample_threshold,
        )
        noise = NoiseSpec(
            rssi_std=self.rssi_std,
            anchor_rssi_std=self.anchor_rssi_std,
            motion_std_xy=self.motion_std_xy,
            motion_std_z=self.motion_std_z,
            height_sensor_std=self.height_sensor_std,
        )
        return FilterState(cfg, noise, seed=self.random_state, origin=origin)

    def fit(self, records: Iterable[ObservationRecord], origin=(0.0, 0.0, 0.0)):
        records = val.check_records(records)
        self.state_ = self._make_state(origin)
        self.log_ = []
        for rec in records:
            self.partial_fit(rec)
        return self

    def partial_fit(self, record: ObservationRecord):
        if not hasattr(self, "state_"):
            self.state_ = self._make_state()
            self.log_ = []
        slam_step(self.state_, record)
        annotated = annotate(self.state_, record)
        self.log_.append(annotated)
        return self

    def deploy_anchor(self, anchor_id: str):
        check_is_fitted(self, "state_")
        self.state_.deploy_anchor(anchor_id)
        return self

    def estimates(self, kind: str | None = None) -> dict[str, BeaconEstimate]:
        check_is_fitted(self, "state_")
        return self.state_.estimates(kind)

    def predict(self, beacon_ids: Sequence[str] | None = None) -> np.ndarray:
        check_is_fitted(self, "state_")
        ests = self.state_.estimates()
        ids = val.check_ids(beacon_ids, ests)
        return np.array([ests[b].mu for b in ids]).reshape(len(ids), 3)
