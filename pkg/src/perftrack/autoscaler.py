"""Model-driven scaling policy and the closed simulate/track/scale loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .ekf import MetricSample, Tracker, TrackerConfig
from .model import ParamVector, SaturationError, Topology, evaluate_observation
from .planner import Bounds, SlaSpec, meets_sla, plan_capacity
from .sim import DesRunner, Scenario, ScenarioError

log = logging.getLogger(__name__)


class BoundViolationError(ValueError):
    def __init__(self, directive: "ScalingDirective", result: int):
        self.directive = directive
        super().__init__(
            f"{directive.action} x{directive.count} on tier {directive.tier + 1} "
            f"would leave {result} replicas, outside bounds"
        )


@dataclass(frozen=True)
class ScalingPolicy:
    sla: SlaSpec
    bounds: Bounds
    headroom: float = 0.1
    scale_down_util: float = 0.3
    cooldown: int = 2

    def __post_init__(self):
        if self.headroom < 0:
            raise ValueError("headroom must be >= 0")
        if not 0 < self.scale_down_util < 1:
            raise ValueError("scale_down_util must lie in (0, 1)")
        if self.cooldown < 0:
            raise ValueError("cooldown must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict, num_tiers: int) -> "ScalingPolicy":
        lo = doc.get("min_replicas", [1] * num_tiers)
        hi = doc.get("max_replicas", [10] * num_tiers)
        return cls(
            sla=SlaSpec(tuple(doc["r_max"]), float(doc.get("u_max", 0.95))),
            bounds=Bounds(tuple(lo), tuple(hi)),
            headroom=float(doc.get("headroom", 0.1)),
            scale_down_util=float(doc.get("scale_down_util", 0.3)),
            cooldown=int(doc.get("cooldown", 2)),
        )


@dataclass(frozen=True)
class ScalingDirective:
    tier: int
    action: str  # "add" | "remove"
    count: int
    reason: str = ""

    def __post_init__(self):
        if self.action not in ("add", "remove"):
            raise ValueError(f"unknown action {self.action!r}")
        if self.count < 1:
            raise ValueError("directive count must be >= 1")

    @property
    def delta(self) -> int:
        return self.count if self.action == "add" else -self.count

    def to_dict(self, step: int) -> dict:
        return {
            "step": step,
            "tier": self.tier,
            "action": self.action,
            "count": self.count,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class AutoscalerState:
    topology: Topology
    last_action_step: tuple[int | None, ...]
    step: int = 0

    @classmethod
    def initial(cls, topo: Topology) -> "AutoscalerState":
        return cls(topo, (None,) * topo.num_tiers, 0)

    def cooling(self, tier: int, cooldown: int) -> bool:
        last = self.last_action_step[tier]
        return last is not None and self.step - last <= cooldown


def apply_directives(topo: Topology, ds: list[ScalingDirective],
                     bounds: Bounds | None = None) -> Topology:
    """Apply add/remove directives, checking every result against ``bounds``."""
    bounds = bounds or Bounds((1,) * topo.num_tiers, (2**31 - 1,) * topo.num_tiers)
    reps = list(topo.replicas)
    for d in ds:
        if not 0 <= d.tier < topo.num_tiers:
            raise ValueError(f"directive names unknown tier {d.tier}")
        new = reps[d.tier] + d.delta
        if not bounds.lo[d.tier] <= new <= bounds.hi[d.tier]:
            raise BoundViolationError(d, new)
        reps[d.tier] = new
    return topo.with_replicas(reps)


def evaluate_policy(state: AutoscalerState, xhat: ParamVector, w, forecast_w,
                    policy: ScalingPolicy) -> list[ScalingDirective]:
    """Directives for the current evaluation period.

    Scale up when the predicted response of any class at the forecast
    workload exceeds ``(1 + headroom) * r_max`` (or the estimate saturates a
    tier): add replicas towards the capacity plan for the forecast.
    Scale down by one replica on the least utilized tier when every class is
    within ``(1 - headroom) * r_max``, that tier is under ``scale_down_util``,
    and the model predicts the SLA still holds afterwards.

    ``w`` is the currently observed workload; it is only used when no
    forecast is supplied.
    """
    topo = state.topology
    forecast_w = w if forecast_w is None else forecast_w
    r_max = np.asarray(policy.sla.r_max)
    try:
        pred = evaluate_observation(xhat, forecast_w, topo)
    except SaturationError as exc:
        pred, why = None, f"predicted saturation ({exc})"
    else:
        over = np.flatnonzero(pred.R > (1.0 + policy.headroom) * r_max)
        why = f"class {int(over[0]) + 1} predicted R {pred.R[over[0]]:.4g}s over SLA" if over.size else ""

    if pred is None or why:
        plan = plan_capacity(xhat, forecast_w, policy.sla, policy.bounds, topo)
        reason = why if plan.feasible else f"{why}; best effort, {plan.reason}"
        out = []
        for j, (cur, want) in enumerate(zip(topo.replicas, plan.replicas)):
            if want > cur and not state.cooling(j, policy.cooldown):
                out.append(ScalingDirective(j, "add", want - cur, reason))
        return out

    if np.any(pred.R > (1.0 - policy.headroom) * r_max):
        return []
    eligible = [
        j for j in np.argsort(pred.u, kind="stable")
        if pred.u[j] < policy.scale_down_util
        and topo.replicas[j] > policy.bounds.lo[j]
        and not state.cooling(int(j), policy.cooldown)
    ]
    if not eligible:
        return []
    j = int(eligible[0])
    smaller = list(topo.replicas)
    smaller[j] -= 1
    if not meets_sla(xhat, forecast_w, topo.with_replicas(smaller), policy.sla):
        return []
    return [ScalingDirective(j, "remove", 1, f"tier {j + 1} utilization {pred.u[j]:.3f} under floor")]


def advance(state: AutoscalerState, ds: list[ScalingDirective],
            policy: ScalingPolicy) -> AutoscalerState:
    """Apply directives and move to the next evaluation period."""
    topo = apply_directives(state.topology, ds, policy.bounds)
    last = list(state.last_action_step)
    for d in ds:
        last[d.tier] = state.step
    return AutoscalerState(topo, tuple(last), state.step + 1)


# --------------------------------------------------------------------------
# closed loop


@dataclass
class LoopResult:
    directives: list[dict] = field(default_factory=list)
    violations: list[bool] = field(default_factory=list)
    replicas: list[tuple[int, ...]] = field(default_factory=list)
    samples: list[MetricSample] = field(default_factory=list)
    estimates: list[ParamVector] = field(default_factory=list)
    final_topology: Topology | None = None

    @property
    def violation_fraction(self) -> float:
        return float(np.mean(self.violations)) if self.violations else 0.0

    def summary(self) -> dict:
        return {
            "windows": len(self.violations),
            "violating_windows": int(np.sum(self.violations)),
            "violation_fraction": self.violation_fraction,
            "directives": len(self.directives),
            "final_replicas": list(self.final_topology.replicas) if self.final_topology else None,
        }


def window_violates(sample: MetricSample, sla: SlaSpec) -> bool:
    """True when a measured class mean response exceeds its ceiling."""
    resp = sample.resp
    seen = np.isfinite(resp)
    return bool(np.any(resp[seen] > np.asarray(sla.r_max)[seen]))


def run_closed_loop(
    scenario: Scenario,
    policy: ScalingPolicy,
    tracker_config: TrackerConfig | None = None,
    forecast: Callable[[MetricSample], np.ndarray] | None = None,
    static: bool = False,
    warmup: int = 0,
) -> LoopResult:
    """Simulate -> track -> scale, one evaluation per sample window.

    The scenario topology is the starting deployment. With ``static=True``
    the policy is never consulted, which gives the fixed-topology baseline.
    Directives are suppressed for the first ``warmup`` windows while the
    tracker settles.
    """
    if not policy.bounds.contains(scenario.topo.replicas):
        raise ScenarioError("initial topology lies outside the policy bounds")
    scenario.check_feasible(scenario.topo.with_replicas(policy.bounds.hi))
    runner = DesRunner(scenario, check=False)
    tracker = Tracker(tracker_config)
    state = AutoscalerState.initial(scenario.topo)
    result = LoopResult()

    for k in range(scenario.num_samples):
        sample = runner.step().to_sample()
        rec = tracker.step(sample, state.topology)
        result.samples.append(sample)
        result.estimates.append(rec.estimate)
        result.violations.append(window_violates(sample, policy.sla))
        result.replicas.append(state.topology.replicas)
        if static or k < warmup:
            state = replace(state, step=state.step + 1)
            continue
        fw = forecast(sample) if forecast is not None else sample.lam
        ds = evaluate_policy(state, rec.estimate, sample.lam, fw, policy)
        for d in ds:
            log.info("step %d: %s tier %d x%d (%s)", state.step, d.action, d.tier + 1, d.count, d.reason)
            result.directives.append(d.to_dict(state.step))
        state = advance(state, ds, policy)
        if ds:
            runner.sim.set_replicas(state.topology.replicas)

    result.final_topology = state.topology
    return result
