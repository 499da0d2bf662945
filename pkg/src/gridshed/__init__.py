"""gridshed: desk-scale toolkit for learning grid emergency load-shedding control.

Subpackage map:

* :mod:`gridshed.network`    -- case schema, JSON i/o, validation, admittance matrix
* :mod:`gridshed.powerflow`  -- Newton-Raphson AC power flow and case scaling
* :mod:`gridshed.dynamics`   -- transient simulator (machines, motors, ZIP loads, events)
* :mod:`gridshed.uvls`       -- under-voltage load-shedding relay model
* :mod:`gridshed.env`        -- episodic shedding-control environment (reward, mask, traces)
* :mod:`gridshed.sampling`   -- hierarchical Latin-hypercube case generation
* :mod:`gridshed.screening`  -- critical clearing time search and contingency ranking
* :mod:`gridshed.pars`       -- parallel augmented random search with latent context
* :mod:`gridshed.curriculum` -- zone-wise three-stage curriculum training
* :mod:`gridshed.report`     -- baseline runs, comparison reports, trace export
* :mod:`gridshed.figures`    -- matplotlib renderings of report artifacts
* :mod:`gridshed.cli`        -- command line entry point
"""

__version__ = "0.1.0"

from .network import (Branch, Bus, CaseError, Exciter, Load, Machine,  # noqa: E402,F401
                      MotorParams, PowerFlowCase, Zone, build_ybus, case_from_dict,
                      case_to_dict, fixture_path, load_case, save_case, validate_case)
from .powerflow import (PowerFlowError, PowerFlowSolution, scale_case,  # noqa: E402,F401
                        solve_power_flow)
from .dynamics import (SIM_DT, DynState, Event, SimParams, init_dynamics,  # noqa: E402,F401
                       simulate_interval)
from .uvls import UvlsSettings  # noqa: E402,F401
from .env import (EnvSpec, GridEnv, RewardBreakdown, Scenario,  # noqa: E402,F401
                  build_env_spec, recovery_envelope)
from .sampling import SamplingConfig, SamplingReport, hierarchical_lhs  # noqa: E402,F401
from .screening import (CYCLE_S, CctResult, ScenarioDataset, Screener,  # noqa: E402,F401
                        build_datasets, compute_cct, load_dataset,
                        rank_and_sample_contingencies)
from .rollout import RolloutPool, TaskResult, rollout_episode  # noqa: E402,F401
from .pars import (ParsConfig, Policy, evaluate, load_policy, meta_adapt,  # noqa: E402,F401
                   pars_iteration, save_policy)
from .curriculum import (CurriculumConfig, ZoneTask, assemble_policy,  # noqa: E402,F401
                         build_zone_tasks, coordinated_train, train_zone)
from .report import (ComparisonReport, compare, export_trace,  # noqa: E402,F401
                     run_baseline)
from .config import config_hash, env_spec_hash, load_config, resolve_config  # noqa: E402,F401
