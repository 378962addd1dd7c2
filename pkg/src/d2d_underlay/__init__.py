"""Channel assignment and power allocation for underlay D2D cellular networks."""
from .model import (
    AllocationResult,
    FadingModel,
    Geometry,
    NetworkInstance,
    NetworkParams,
    fairness_delta,
    generate_instance,
    joint_fairness_delta,
    total_rate,
)
from .orchestrate import (
    MessageLog,
    Partition,
    RunConfig,
    run_centralized_joint,
    run_centralized_separate,
    run_decentralized_joint,
    run_decentralized_separate,
    run_pipeline,
)

__all__ = [
    "AllocationResult", "FadingModel", "Geometry", "NetworkInstance", "NetworkParams",
    "fairness_delta", "generate_instance", "joint_fairness_delta", "total_rate",
    "MessageLog", "Partition", "RunConfig", "run_centralized_joint", "run_centralized_separate",
    "run_decentralized_joint", "run_decentralized_separate", "run_pipeline",
]
