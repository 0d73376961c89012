"""What-if evaluation, capacity planning and maximum-load search on a fitted model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    Observation,
    ParamVector,
    SaturationError,
    Topology,
    as_workload,
    evaluate_observation,
    utilization,
)

EXHAUSTIVE_LIMIT = 10**6


@dataclass(frozen=True)
class SlaSpec:
    r_max: tuple[float, ...]
    u_max: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "r_max", tuple(float(r) for r in self.r_max))
        if any(not r > 0 for r in self.r_max):
            raise ValueError("response-time ceilings must be > 0")
        if not 0 < self.u_max < 1:
            raise ValueError("u_max must lie in (0, 1)")

    def met_by(self, obs: Observation) -> bool:
        return bool(np.all(obs.R <= np.asarray(self.r_max)) and np.all(obs.u <= self.u_max))

    def to_dict(self) -> dict:
        return {"r_max": list(self.r_max), "u_max": self.u_max}

    @classmethod
    def from_dict(cls, doc: dict) -> "SlaSpec":
        return cls(tuple(doc["r_max"]), float(doc.get("u_max", 0.95)))


@dataclass(frozen=True)
class Bounds:
    """Per-tier inclusive replica limits."""

    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if len(self.lo) != len(self.hi):
            raise ValueError("bounds need the same number of tiers")
        if any(a < 1 or b < a for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"invalid replica bounds {self.lo}..{self.hi}")

    @classmethod
    def uniform(cls, num_tiers: int, lo: int = 1, hi: int = 10) -> "Bounds":
        return cls((lo,) * num_tiers, (hi,) * num_tiers)

    def contains(self, replicas) -> bool:
        return all(a <= n <= b for a, n, b in zip(self.lo, replicas, self.hi))

    @property
    def size(self) -> int:
        return math.prod(b - a + 1 for a, b in zip(self.lo, self.hi))


@dataclass
class CapacityPlan:
    replicas: tuple[int, ...]
    predicted: Observation | None
    feasible: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "replicas": list(self.replicas),
            "total": int(sum(self.replicas)),
            "predicted": None if self.predicted is None else self.predicted.to_dict(),
            "reason": self.reason,
        }


def whatif_response(x: ParamVector, lam, topo: Topology) -> Observation:
    """Predicted observation under a hypothetical workload, parameters or topology."""
    return evaluate_observation(x, lam, topo)


def meets_sla(x: ParamVector, lam, topo: Topology, sla: SlaSpec) -> bool:
    try:
        return sla.met_by(evaluate_observation(x, lam, topo))
    except SaturationError:
        return False


def _grid_feasible(x: ParamVector, lam: np.ndarray, sla: SlaSpec, grid: np.ndarray) -> np.ndarray:
    """Vectorised SLA check for each replica vector (row) in ``grid``."""
    traffic = lam @ x.S  # (M,)
    u = x.u0[None, :] + traffic[None, :] / grid
    ok = np.all(u <= sla.u_max, axis=1) & np.all(u < 1.0, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        R = x.d[None, :] + (x.S[None, :, :] / (1.0 - u[:, None, :])).sum(axis=2)
    ok &= np.all(R <= np.asarray(sla.r_max)[None, :], axis=1)
    return ok


def _exhaustive(x, lam, sla, topo: Topology, bounds: Bounds) -> tuple[int, ...] | None:
    axes = [np.arange(a, b + 1) for a, b in zip(bounds.lo, bounds.hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    ok = _grid_feasible(x, lam, sla, grid.astype(float))
    cand = grid[ok]
    # meshgrid(ij) enumerates lexicographically; a stable sort on the total
    # keeps lexicographic order among equal totals
    for row in cand[np.argsort(cand.sum(axis=1), kind="stable")]:
        reps = tuple(int(v) for v in row)
        # re-check with the scalar model so float rounding at the SLA edge
        # can never yield a plan that evaluate_observation rejects
        if meets_sla(x, lam, topo.with_replicas(reps), sla):
            return reps
    return None


def _greedy(x, lam, sla, topo: Topology, bounds: Bounds) -> tuple[int, ...] | None:
    reps = list(bounds.lo)
    while True:
        cur = topo.with_replicas(reps)
        if meets_sla(x, lam, cur, sla):
            return tuple(reps)
        u = utilization(x, lam, cur)
        order = [j for j in np.argsort(-u, kind="stable") if reps[j] < bounds.hi[j]]
        if not order:
            return None
        reps[order[0]] += 1


def plan_capacity(x: ParamVector, lam, sla: SlaSpec, bounds: Bounds,
                  topo: Topology | None = None) -> CapacityPlan:
    """Cheapest replica vector (fewest total replicas) meeting the SLA.

    Ties go to the lexicographically smallest vector. The search is
    exhaustive when the bounded lattice has at most 10**6 points and greedy
    (add to the most utilized tier) otherwise. An infeasible outcome is
    returned as a plan with ``feasible=False`` at the upper bounds.
    """
    M, C = x.num_tiers, x.num_classes
    lam = as_workload(lam, C)
    if len(bounds.lo) != M or len(sla.r_max) != C:
        raise ValueError("bounds/SLA do not match the model dimensions")
    topo = topo or Topology(M, C, bounds.lo)

    if bounds.size <= EXHAUSTIVE_LIMIT:
        best = _exhaustive(x, lam, sla, topo, bounds)
    else:
        best = _greedy(x, lam, sla, topo, bounds)

    if best is None:
        top = topo.with_replicas(bounds.hi)
        try:
            pred = evaluate_observation(x, lam, top)
        except SaturationError:
            pred = None
        floor = np.flatnonzero(x.d > np.asarray(sla.r_max))
        if floor.size:
            reason = f"delay of class {int(floor[0]) + 1} alone exceeds its response ceiling"
        else:
            reason = "SLA not met even at maximum replicas"
        return CapacityPlan(tuple(bounds.hi), pred, False, reason)
    return CapacityPlan(best, evaluate_observation(x, lam, topo.with_replicas(best)), True)


def max_supported_load(x: ParamVector, topo: Topology, sla: SlaSpec, direction,
                       rtol: float = 1e-6) -> float:
    """Largest scale ``a`` such that workload ``a * direction`` still meets the SLA.

    Returns ``math.inf`` when the direction places no load on any tier and
    the SLA holds at zero load, and 0.0 when the SLA fails even at zero load.
    """
    direction = as_workload(direction, topo.num_classes)
    if not np.any(direction > 0):
        raise ValueError("load direction must have a positive entry")
    if not meets_sla(x, direction * 0.0, topo, sla):
        return 0.0
    n = np.asarray(topo.replicas, dtype=float)
    traffic = (direction @ x.S) / n
    loaded = traffic > 0
    if not loaded.any():
        return math.inf
    lo, hi = 0.0, float(np.min((1.0 - x.u0[loaded]) / traffic[loaded]))
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if meets_sla(x, mid * direction, topo, sla):
            lo = mid
        else:
            hi = mid
    return lo
