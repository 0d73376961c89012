"""Online queueing-model tracking, planning and autoscaling for multi-tier services."""

from .autoscaler import (
    AutoscalerState,
    ScalingDirective,
    ScalingPolicy,
    apply_directives,
    evaluate_policy,
    run_closed_loop,
)
from .ekf import (
    FilterState,
    MetricSample,
    NoiseConfig,
    Tracker,
    TrackerConfig,
    init_filter,
    predict_step,
    project_constraints,
    track,
    update_step,
)
from .model import (
    Observation,
    ParamVector,
    ResponseBreakdown,
    SaturationError,
    Topology,
    evaluate_observation,
    jacobian,
    response_breakdown,
)
from .planner import Bounds, CapacityPlan, SlaSpec, max_supported_load, plan_capacity, whatif_response
from .sim import Scenario, generate_analytic, run_des

__version__ = "0.1.0"
