"""Open multi-class, multi-tier queueing model.

Utilization of tier ``j`` (per replica)::

    u_j = u0_j + sum_i lambda_i * S_ij / n_j

Mean response time of class ``i``::

    R_i = d_i + sum_j S_ij / (1 - u_j)

The hidden parameters are flattened as ``(u0 | d | S row-major by class)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ModelError(ValueError):
    """Base class for model evaluation errors."""


class SaturationError(ModelError):
    """Raised when some tier reaches utilization >= 1."""

    def __init__(self, tier: int, utilization: float):
        self.tier = tier
        self.utilization = utilization
        super().__init__(
            f"tier {tier + 1} saturated (utilization {utilization:.4g} >= 1)"
        )


@dataclass(frozen=True)
class Topology:
    num_tiers: int
    num_classes: int
    replicas: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "replicas", tuple(int(n) for n in self.replicas))
        if self.num_tiers < 1 or self.num_classes < 1:
            raise ValueError("need at least one tier and one class")
        if len(self.replicas) != self.num_tiers:
            raise ValueError(
                f"replicas has {len(self.replicas)} entries, expected {self.num_tiers}"
            )
        if any(n < 1 for n in self.replicas):
            raise ValueError(f"replica counts must be >= 1, got {self.replicas}")

    @property
    def state_dim(self) -> int:
        return self.num_tiers + self.num_classes + self.num_classes * self.num_tiers

    @property
    def obs_dim(self) -> int:
        return self.num_tiers + self.num_classes

    def with_replicas(self, replicas) -> "Topology":
        return Topology(self.num_tiers, self.num_classes, tuple(replicas))

    def to_dict(self) -> dict:
        return {
            "tiers": self.num_tiers,
            "classes": self.num_classes,
            "replicas": list(self.replicas),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Topology":
        tiers = int(doc["tiers"])
        replicas = doc.get("replicas", [1] * tiers)
        return cls(tiers, int(doc["classes"]), tuple(replicas))


def load_topology(path) -> Topology:
    with open(path) as f:
        return Topology.from_dict(json.load(f))


def as_workload(lam, num_classes: int | None = None) -> np.ndarray:
    """Validate and copy an arrival-rate vector (requests/second)."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if num_classes is not None and lam.size != num_classes:
        raise ValueError(f"workload has {lam.size} rates, expected {num_classes}")
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError(f"arrival rates must be finite and >= 0, got {lam}")
    return lam


@dataclass
class ParamVector:
    """Hidden model parameters.

    Attributes:
        u0: background utilization per tier, shape (M,).
        d: extra delay per class in seconds, shape (C,).
        S: mean service time in seconds, shape (C, M), ``S[i, j]`` for class i at tier j.
    """

    u0: np.ndarray
    d: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=float).reshape(-1)
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if self.S.shape != (self.d.size, self.u0.size):
            raise ValueError(
                f"S has shape {self.S.shape}, expected {(self.d.size, self.u0.size)}"
            )

    @property
    def num_tiers(self) -> int:
        return self.u0.size

    @property
    def num_classes(self) -> int:
        return self.d.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.u0, self.d, self.S.reshape(-1)])

    @classmethod
    def from_flat(cls, x, num_tiers: int, num_classes: int) -> "ParamVector":
        x = np.asarray(x, dtype=float).reshape(-1)
        M, C = num_tiers, num_classes
        if x.size != M + C + C * M:
            raise ValueError(f"flat state has {x.size} entries, expected {M + C + C * M}")
        return cls(x[:M].copy(), x[M:M + C].copy(), x[M + C:].reshape(C, M).copy())

    def copy(self) -> "ParamVector":
        return ParamVector(self.u0.copy(), self.d.copy(), self.S.copy())

    def check(self) -> None:
        """Raise ValueError unless all entries are finite, >= 0 and u0 < 1."""
        x = self.flatten()
        if not np.all(np.isfinite(x)) or np.any(x < 0):
            raise ValueError("parameters must be finite and non-negative")
        if np.any(self.u0 >= 1):
            raise ValueError("background utilization must be < 1")

    def to_dict(self) -> dict:
        return {"u0": self.u0.tolist(), "d": self.d.tolist(), "S": self.S.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamVector":
        return cls(doc["u0"], doc["d"], doc["S"])


@dataclass
class Observation:
    u: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        self.R = np.asarray(self.R, dtype=float).reshape(-1)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.u, self.R])

    @classmethod
    def from_flat(cls, z, num_tiers: int) -> "Observation":
        z = np.asarray(z, dtype=float).reshape(-1)
        return cls(z[:num_tiers].copy(), z[num_tiers:].copy())

    def to_dict(self) -> dict:
        return {"util": self.u.tolist(), "resp": self.R.tolist()}


@dataclass
class ResponseBreakdown:
    """Per-class split of mean response time into delay and per-tier residence."""

    delay: np.ndarray
    residence: np.ndarray  # (C, M)
    total: np.ndarray = field(init=False)

    def __post_init__(self):
        self.total = self.delay + self.residence.sum(axis=1)

    @property
    def bottleneck(self) -> np.ndarray:
        """Index of the tier with the largest residence term, per class."""
        return np.argmax(self.residence, axis=1)

    def to_dict(self) -> dict:
        return {
            "classes": [
                {
                    "class": i,
                    "delay": float(self.delay[i]),
                    "tiers": self.residence[i].tolist(),
                    "total": float(self.total[i]),
                    "bottleneck": int(self.bottleneck[i]),
                }
                for i in range(self.delay.size)
            ]
        }


def _check_dims(x: ParamVector, lam: np.ndarray, topo: Topology) -> None:
    if x.num_tiers != topo.num_tiers or x.num_classes != topo.num_classes:
        raise ValueError(
            f"parameters are {x.num_classes} classes x {x.num_tiers} tiers, "
            f"topology is {topo.num_classes} x {topo.num_tiers}"
        )
    if lam.size != topo.num_classes:
        raise ValueError(f"workload has {lam.size} rates, expected {topo.num_classes}")


def utilization(x: ParamVector, lam, topo: Topology) -> np.ndarray:
    """Per-replica tier utilization. Does not check saturation."""
    lam = as_workload(lam)
    _check_dims(x, lam, topo)
    n = np.asarray(topo.replicas, dtype=float)
    return x.u0 + (lam @ x.S) / n


def _feasible_utilization(x, lam, topo) -> np.ndarray:
    u = utilization(x, lam, topo)
    over = np.flatnonzero(u >= 1.0)
    if over.size:
        raise SaturationError(int(over[0]), float(u[over[0]]))
    return u


def evaluate_observation(x: ParamVector, lam, topo: Topology) -> Observation:
    """Predicted utilizations and mean response times.

    Raises:
        SaturationError: naming the first tier with utilization >= 1.
    """
    u = _feasible_utilization(x, lam, topo)
    R = x.d + (x.S / (1.0 - u)).sum(axis=1)
    return Observation(u, R)


def utilization_jacobian(lam, topo: Topology) -> np.ndarray:
    """Rows of the Jacobian for the utilizations. Valid at any state."""
    lam = as_workload(lam, topo.num_classes)
    M, C = topo.num_tiers, topo.num_classes
    n = np.asarray(topo.replicas, dtype=float)
    H = np.zeros((M, M + C + C * M))
    # du_j/du0_j = 1 ; du_j/dS_kj = lam_k / n_j
    H[:, :M] = np.eye(M)
    for k in range(C):
        H[np.arange(M), M + C + k * M + np.arange(M)] = lam[k] / n
    return H


def jacobian(x: ParamVector, lam, topo: Topology) -> np.ndarray:
    """Analytic derivative of the flattened observation w.r.t. the flattened state.

    Rows follow ``(u_1..u_M, R_1..R_C)``, columns ``(u0 | d | S row-major)``.
    """
    lam = as_workload(lam)
    u = _feasible_utilization(x, lam, topo)
    M, C = topo.num_tiers, topo.num_classes
    n = np.asarray(topo.replicas, dtype=float)
    inv = 1.0 / (1.0 - u)
    H = np.zeros((M + C, M + C + C * M))
    H[:M] = utilization_jacobian(lam, topo)

    # dR_i/du0_j = S_ij / (1-u_j)^2
    H[M:, :M] = x.S * inv**2
    H[M:, M:M + C] = np.eye(C)
    # dR_i/dS_kj = [i==k] / (1-u_j) + S_ij * (lam_k / n_j) / (1-u_j)^2
    for i in range(C):
        for k in range(C):
            cols = M + C + k * M + np.arange(M)
            H[M + i, cols] = x.S[i] * (lam[k] / n) * inv**2
            if i == k:
                H[M + i, cols] += inv
    return H


def response_breakdown(x: ParamVector, lam, topo: Topology) -> ResponseBreakdown:
    u = _feasible_utilization(x, lam, topo)
    return ResponseBreakdown(x.d.copy(), x.S / (1.0 - u))
