"""Layered perception-to-control safety filtering on a grid world:
occupancy mapping from point clouds, Poisson safety fields per heading
layer, a predictive discrete-CBF planner, a real-time ISSf CBF filter, a
deterministic simulator, and Pareto-style episode metrics.
"""

__version__ = "0.1.0"

from .grids import (DomainError, FieldGradient, GridSpec, PsfStack,
                    RobotFootprint, ScalarGrid2D, load_grid, load_stack,
                    sample_trilinear, gradient_xy, save_grid, save_stack,
                    world_to_cell)
from .mapping import (MapperConfig, MapperState, PointCloud, convolve,
                      gaussian_kernel, project_cloud, step_mapper,
                      threshold_hysteresis, update_confidence)
from .poisson import (FreeSpaceMasks, PoissonConfig, PsfSnapshot,
                      ScheduledField, SolveInfo, SolverError,
                      erode_free_space, solve_psf)
from .qp import QpError, QpResult, solve_qp
from .realtime import (FilterResult, IssfConfig, composite_barrier,
                       filter_command, project_halfspace, theorem1_gate)
from .predictive import (MpcConfig, Plan, PlanCheck, PlanInfeasibleError,
                         check_plan, plan, rollout, shift_warm_start)
from .simulation import (EpisodeLog, LOG_COLUMNS, MonitorConfig, MovingDisc,
                         NominalSegment, RobotConfig, Scenario, SensorConfig,
                         StaticDisc, TrackingConfig, WorldState,
                         collision_check, monitor_theorem1, scan, step_world,
                         true_occupancy)
from .scenarios import (PRESETS, load_scenario, make_random_static, preset,
                        save_scenario, scenario_from_dict, scenario_to_dict)
from .metrics import (EpisodeMetrics, UnscorableScenarioError, aggregate,
                      hotelling_ellipse, ideal_cost, measured_cost,
                      robustness, score_episode)
from .harness import MODES, RunConfig, run_episode, run_suite

__all__ = [name for name in dir() if not name.startswith("_")]
