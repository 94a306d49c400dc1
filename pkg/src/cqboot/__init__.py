"""Clustered Q-learning with the M-out-of-N cluster bootstrap."""

from .data_model import (ClusteredDataset, ClusterRecord, ColumnRoles, Exclusion, StageModelSpec,
                         design_matrices, load_csv, load_model_spec, parse_model_spec, write_csv)
from .gls import (INDEPENDENCE, GlsFit, WorkingCorrelation, estimate_icc, iterated_gls,
                  sandwich_cov, solve_gls)
from .qlearning import (CompiledData, QLearningResult, StageFit, decision_rule, fit_backward,
                        fit_stage, pseudo_outcome)
from .bootstrap import (BootstrapResult, Method, NonRegularityReport, bootstrap_interval,
                        estimate_p, resample_size, run_bootstrap)
from .simulation import (GenerativeConfig, SimMetrics, generate, run_experiment,
                         scenario_presets, true_stage1_params, write_metrics_csv)

__version__ = "0.1.0"
