"""Online distribution system state estimation on unbalanced multiphase feeders."""

from .estimators import (
    EstimatorConfig,
    EstimatorState,
    converged_gd_solve,
    gauss_newton,
    gauss_newton_solve,
    initial_state,
    online_gd_step,
    online_sgd_step,
    wls_gradient,
    wls_objective,
)
from .feeder import FeederError, FeederModel, load_feeder, node_index, read_feeder, template
from .linear import (
    BoundParameters,
    LinearWlsProblem,
    estimate_bound_constants,
    linear_wls_closed_form,
    run_bound_experiment,
    theorem1_bound,
)
from .measurement import ArrivalPolicy, MeasurementBatch, MeterSet, arrival_subset, build_meter_set, synthesize_batch
from .metrics import MetricsSummary, summarize, write_summary_csv, write_trace_csv
from .powerflow import (
    InjectionVector,
    PowerFlowError,
    SensitivityMatrix,
    VoltageSolution,
    jacobian_vm,
    measurement_function,
    solve_power_flow,
)
from .scenario import OnlineRun, RunTrace, Scenario, load_scenario, run_online, scenario_from_dict

__version__ = "0.1.0"
