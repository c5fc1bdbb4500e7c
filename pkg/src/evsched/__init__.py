"""Discrete-time EV fleet charging scheduler.

Queue-based lookahead scheduling of aggregate group power under time-varying
electricity prices, with flow-based disaggregation to individual vehicles,
greedy / receding-horizon / offline baselines, and audits for every analytic
bound the scheduler relies on.
"""

from .model import (
    Ev,
    Group,
    PriceSeries,
    Scenario,
    TimeGrid,
    groups_from_fleet,
    validate_scenario,
)
from .demand import build_demand, demand_profile
from .aggregation import check_p3_feasible, window_bounds
from .flow import circulation_disaggregate, fifo_disaggregate, hoffman_verify
from .queues import (
    backlog_series,
    bound_constants,
    closed_form_backlog,
    increment_audit,
)
from .policies import RunReport, gap_bound, offline_p2, simulate
from .harness import (
    ExperimentConfig,
    apply_price_noise,
    find_optimal_V,
    generate_scenario,
    run_experiment,
)

__version__ = "1.0.0"
