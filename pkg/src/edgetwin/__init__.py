"""Deterministic simulator and optimization toolkit for reliable edge
caching in small-cell wireless networks."""

from .agent import (AgentConfig, CumulativeReturns, DqnAgent, Mlp,
                    ReplayBuffer, StateEncoder, discounted_returns)
from .baselines import PolicyKind, decide
from .config import ExperimentConfig, load_config, validate_config
from .errors import (AggregationError, BufferUnderfullError, ConfigError,
                     ContractError, TraceFormatError, TrainingDivergenceError)
from .experiment import (MetricsRecord, Runner, SeedResult, compare_policies,
                         emit_metrics, run_experiment)
from .netmodel import (Action, CacheNetwork, CacheUnit, CmdpState, LoadTracker,
                       NetworkConfig, StepOutcome, build_topology)
from .reliability import (InterventionLog, ReliabilityConfig, extend_state,
                          intervene_action, is_overloaded, shape_reward)
from .twin import (AffinityConfig, BsDescriptor, TwinModel, TwinSyncConfig,
                   affinity_matrix, attribute_affinity, dcs_cluster,
                   divergence, edge_betweenness, forecast_requests,
                   h_twinning, load_twin, save_twin, train_local_twin,
                   v_twinning)
from .workload import (RequestEvent, RequestSampler, TraceStats, WorkloadModel,
                       empirical_distribution, load_trace, rank_pmf,
                       sample_request, zipf_pmf)

__version__ = "0.1.0"
