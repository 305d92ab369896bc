"""Head-level partitioning of a decoder layer across edge devices."""

from .baselines import (
    InstanceTooLarge,
    PolicyKind,
    dynamic_layer_assign,
    edgeshard_like_assign,
    galaxy_like_assign,
    greedy_assign,
    make_policy,
    optimal_assign,
    round_robin_assign,
    static_assign,
)
from .delay import (
    DelayBreakdown,
    interval_delay,
    migration_delay,
    objective,
    total_inference_delay,
    total_migration_delay,
)
from .model import (
    Assignment,
    BlockDemand,
    BlockId,
    BlockKind,
    ConfigError,
    DeviceState,
    ModelConfig,
    NetworkSnapshot,
    block_demand,
    demands_at,
    seq_len,
)
from .partitioner import (
    Limits,
    PartitionOutcome,
    backtrack_for_resource_violations,
    resolve_resource_overload,
    resource_aware_assign,
    score,
)
from .simulator import (
    BackgroundLoad,
    RunFailure,
    RunTrace,
    ScenarioConfig,
    advance_snapshot,
    run_inference,
    sample_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "BackgroundLoad",
    "BlockDemand",
    "BlockId",
    "BlockKind",
    "ConfigError",
    "DelayBreakdown",
    "DeviceState",
    "InstanceTooLarge",
    "Limits",
    "ModelConfig",
    "NetworkSnapshot",
    "PartitionOutcome",
    "PolicyKind",
    "RunFailure",
    "RunTrace",
    "ScenarioConfig",
    "advance_snapshot",
    "backtrack_for_resource_violations",
    "block_demand",
    "demands_at",
    "dynamic_layer_assign",
    "edgeshard_like_assign",
    "galaxy_like_assign",
    "greedy_assign",
    "interval_delay",
    "make_policy",
    "migration_delay",
    "objective",
    "optimal_assign",
    "resolve_resource_overload",
    "resource_aware_assign",
    "round_robin_assign",
    "run_inference",
    "sample_scenario",
    "score",
    "seq_len",
    "static_assign",
    "total_inference_delay",
    "total_migration_delay",
]
