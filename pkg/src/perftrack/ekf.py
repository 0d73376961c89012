"""Extended Kalman filter tracking the hidden queueing parameters online.

The state follows a random walk (identity transition plus process noise) and
is observed through the nonlinear queueing relations in :mod:`perftrack.model`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

import numpy as np

from .model import (
    Observation,
    ParamVector,
    SaturationError,
    Topology,
    as_workload,
    evaluate_observation,
    jacobian,
    utilization,
    utilization_jacobian as _utilization_jacobian,
)

log = logging.getLogger(__name__)

EPS = 1e-4
U0_CEILING = 0.999


class ConfigurationError(ValueError):
    pass


class SingularInnovationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    """Process and measurement noise.

    By default both covariances are diagonal and scale with the current
    magnitudes: ``Q_kk = (q_rel * max(x_k, eps))**2`` and
    ``Rm_ll = (r_rel * max(z_l, eps))**2``. Passing ``q_diag`` / ``r_diag``
    pins them to fixed values instead.
    """

    q_rel: float = 0.01
    r_rel: float = 0.05
    q_diag: tuple[float, ...] | None = None
    r_diag: tuple[float, ...] | None = None
    eps: float = EPS

    def __post_init__(self):
        if self.q_rel < 0 or self.r_rel <= 0 or self.eps <= 0:
            raise ConfigurationError("need q_rel >= 0, r_rel > 0, eps > 0")
        if self.q_diag is not None:
            object.__setattr__(self, "q_diag", tuple(float(q) for q in self.q_diag))
            if any(q < 0 for q in self.q_diag):
                raise ConfigurationError("process noise must be >= 0")
        if self.r_diag is not None:
            object.__setattr__(self, "r_diag", tuple(float(r) for r in self.r_diag))
            if any(r <= 0 for r in self.r_diag):
                raise ConfigurationError("measurement noise must be > 0")

    def process_cov(self, x: np.ndarray) -> np.ndarray:
        if self.q_diag is not None:
            if len(self.q_diag) != x.size:
                raise ConfigurationError(
                    f"q_diag has {len(self.q_diag)} entries, state has {x.size}"
                )
            return np.diag(self.q_diag)
        return np.diag((self.q_rel * np.maximum(x, self.eps)) ** 2)

    def measurement_cov(self, z: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Covariance of the observation entries selected by ``rows``."""
        if self.r_diag is not None:
            return np.diag(np.asarray(self.r_diag)[rows])
        return np.diag((self.r_rel * np.maximum(np.abs(z[rows]), self.eps)) ** 2)


@dataclass(frozen=True)
class MetricSample:
    """One monitoring interval.

    ``resp`` entries may be NaN when no request of that class completed; the
    corresponding observation rows are then masked out of the update.
    """

    t: float
    lam: np.ndarray
    util: np.ndarray
    resp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lam", as_workload(self.lam))
        object.__setattr__(self, "util", np.asarray(self.util, dtype=float).reshape(-1))
        resp = np.array(
            [np.nan if r is None else r for r in np.atleast_1d(self.resp)], dtype=float
        )
        object.__setattr__(self, "resp", resp)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.util, self.resp])

    def to_dict(self) -> dict:
        return {
            "t": float(self.t),
            "lambda": self.lam.tolist(),
            "util": self.util.tolist(),
            "resp": [None if np.isnan(r) else float(r) for r in self.resp],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricSample":
        return cls(doc["t"], doc["lambda"], doc["util"], doc["resp"])


@dataclass(frozen=True)
class FilterState:
    xhat: ParamVector
    P: np.ndarray
    noise: NoiseConfig
    step_count: int = 0

    @property
    def x(self) -> np.ndarray:
        return self.xhat.flatten()


@dataclass
class UpdateDiagnostics:
    innovation: np.ndarray
    innovation_covariance: np.ndarray
    gain: np.ndarray
    projected: np.ndarray
    rows: np.ndarray  # observation rows used (others were missing)

    @property
    def innovation_norm(self) -> float:
        return float(np.linalg.norm(self.innovation))


def project_constraints(x: ParamVector) -> ParamVector:
    """Clamp every parameter to >= 0 and background utilization to <= 0.999."""
    flat = np.maximum(x.flatten(), 0.0)
    M = x.num_tiers
    flat[:M] = np.minimum(flat[:M], U0_CEILING)
    return ParamVector.from_flat(flat, M, x.num_classes)


def init_filter(x0: ParamVector, p0_scale: float, noise: NoiseConfig) -> FilterState:
    if not p0_scale > 0:
        raise ConfigurationError(f"P0 scale must be > 0, got {p0_scale}")
    x = x0.flatten()
    if noise.q_diag is not None and len(noise.q_diag) != x.size:
        raise ConfigurationError(f"q_diag has {len(noise.q_diag)} entries, state has {x.size}")
    if noise.r_diag is not None and len(noise.r_diag) != x0.num_tiers + x0.num_classes:
        raise ConfigurationError("r_diag does not match the observation size")
    P = p0_scale * np.diag(np.maximum(x, noise.eps) ** 2)
    return FilterState(x0.copy(), P, noise, 0)


def bootstrap_params(sample: MetricSample, topo: Topology) -> ParamVector:
    """Rough feasible starting point from a single sample.

    Background utilization starts at 0.01, delays at 10% of the observed
    response times, and every class gets the same service time at a tier,
    sized so that the tier's traffic term explains 80% of its observed
    utilization. Equal service times keep lightly loaded classes from being
    assigned huge values.
    """
    M, C = topo.num_tiers, topo.num_classes
    n = np.asarray(topo.replicas, dtype=float)
    resp = np.nan_to_num(sample.resp, nan=0.0)
    u0 = np.full(M, 0.01)
    d = 0.1 * resp
    S = np.full((C, M), EPS)
    total = sample.lam.sum()
    if total > 0:
        per_tier = 0.8 * np.clip(sample.util, 0.0, 0.999) * n / total
        S[:] = np.maximum(per_tier, EPS)[None, :]
    return ParamVector(u0, d, S)


def predict_step(fs: FilterState) -> FilterState:
    P = fs.P + fs.noise.process_cov(fs.x)
    P = 0.5 * (P + P.T)
    return replace(fs, P=P)


def _correct(fs, z, pred, H_full, rows, topo):
    H = H_full[rows]
    innov = z[rows] - pred[rows]
    Rm = fs.noise.measurement_cov(z, rows)
    P = fs.P

    S = H @ P @ H.T + Rm
    S = 0.5 * (S + S.T)
    if rows.size and np.linalg.cond(S) > 1.0 / np.finfo(float).eps:
        raise SingularInnovationError("innovation covariance is singular")
    # S K^T = H P  (P and S symmetric)
    K = np.linalg.solve(S, H @ P).T if rows.size else np.zeros((P.shape[0], 0))

    x_new = fs.x + K @ innov
    xp = project_constraints(ParamVector.from_flat(x_new, topo.num_tiers, topo.num_classes))
    projected = xp.flatten() != x_new

    A = np.eye(P.shape[0]) - K @ H
    P_new = A @ P @ A.T + K @ Rm @ K.T
    P_new = 0.5 * (P_new + P_new.T)

    diag = UpdateDiagnostics(innov, S, K, projected, rows)
    return FilterState(xp, P_new, fs.noise, fs.step_count + 1), diag


def _check_obs(sample, topo):
    z = sample.z
    if z.size != topo.obs_dim:
        raise ValueError(f"observation has {z.size} entries, expected {topo.obs_dim}")
    return z


def update_step(
    fs: FilterState, sample: MetricSample, topo: Topology
) -> tuple[FilterState, UpdateDiagnostics]:
    """Measurement update with a Joseph-form covariance update.

    Missing (NaN) observation entries are masked out.

    Raises:
        SaturationError: the current estimate saturates a tier at this workload.
        SingularInnovationError: the innovation covariance is not invertible.
    """
    z = _check_obs(sample, topo)
    pred = evaluate_observation(fs.xhat, sample.lam, topo).flatten()
    H = jacobian(fs.xhat, sample.lam, topo)
    rows = np.flatnonzero(np.isfinite(z))
    return _correct(fs, z, pred, H, rows, topo)


def utilization_update(
    fs: FilterState, sample: MetricSample, topo: Topology
) -> tuple[FilterState, UpdateDiagnostics]:
    """Update from the utilization rows only.

    Utilization is linear in the parameters and defined even where the
    estimate saturates a tier, so this is the fallback when
    :func:`update_step` raises :class:`SaturationError`. It pulls the
    estimate back towards the (non-saturated) measured utilization.
    """
    z = _check_obs(sample, topo)
    M = topo.num_tiers
    u = utilization(fs.xhat, sample.lam, topo)
    pred = np.concatenate([u, np.full(topo.num_classes, np.nan)])
    H = np.zeros((topo.obs_dim, topo.state_dim))
    H[:M] = _utilization_jacobian(sample.lam, topo)
    rows = np.flatnonzero(np.isfinite(z[:M]))
    return _correct(fs, z, pred, H, rows, topo)


@dataclass(frozen=True)
class TrackerConfig:
    x0: ParamVector | None = None
    p0_scale: float = 10.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)


@dataclass
class TrackRecord:
    t: float
    estimate: ParamVector
    predicted: Observation | None  # prediction before the update
    diagnostics: UpdateDiagnostics | None
    skipped: bool
    state: FilterState

    def to_dict(self) -> dict:
        return {
            "t": float(self.t),
            "x": self.estimate.flatten().tolist(),
            "z_pred": None if self.predicted is None else self.predicted.flatten().tolist(),
            "innov_norm": None if self.diagnostics is None else self.diagnostics.innovation_norm,
            "skipped": self.skipped,
        }


class Tracker:
    """Stateful wrapper that runs predict + update for each incoming sample.

    The topology may change between samples (e.g. after scaling actions);
    it is passed with every call.
    """

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.state: FilterState | None = None

    def _start(self, sample: MetricSample, topo: Topology) -> None:
        x0 = self.config.x0 if self.config.x0 is not None else bootstrap_params(sample, topo)
        if x0.num_tiers != topo.num_tiers or x0.num_classes != topo.num_classes:
            raise ConfigurationError("initial state does not match the topology")
        self.state = init_filter(x0, self.config.p0_scale, self.config.noise)

    def step(self, sample: MetricSample, topo: Topology) -> TrackRecord:
        if self.state is None:
            self._start(sample, topo)
        fs = predict_step(self.state)
        try:
            pred = evaluate_observation(fs.xhat, sample.lam, topo)
        except SaturationError as exc:
            # response rows are undefined here; correct from utilization alone
            log.debug("t=%s: estimate saturated (%s), utilization-only update", sample.t, exc)
            fs, diag = utilization_update(fs, sample, topo)
            self.state = fs
            return TrackRecord(sample.t, fs.xhat.copy(), None, diag, True, fs)
        try:
            fs, diag = update_step(fs, sample, topo)
        except SingularInnovationError as exc:
            log.warning("t=%s: skipping sample (%s)", sample.t, exc)
            self.state = fs
            return TrackRecord(sample.t, fs.xhat.copy(), pred, None, True, fs)
        self.state = fs
        return TrackRecord(sample.t, fs.xhat.copy(), pred, diag, False, fs)


def track(
    samples: Iterable[MetricSample], topo: Topology, config: TrackerConfig | None = None
) -> Iterator[TrackRecord]:
    """Stream estimates for a time-ordered sample stream."""
    tracker = Tracker(config)
    last_t = -np.inf
    for sample in samples:
        if sample.t <= last_t:
            raise ValueError(f"timestamps must increase (got {sample.t} after {last_t})")
        last_t = sample.t
        yield tracker.step(sample, topo)
