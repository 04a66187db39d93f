"""BFT replication with migration-based proactive recovery.

Replicas order requests with the usual three-phase protocol; a coordinated
migration periodically replaces f active replicas with freshly sanitized
standby nodes, moving the slow sanitize/repair work off the recovery path.
The package also ships a deterministic simulation harness and the
closed-form availability model used to compare recovery schemes.
"""

from .availability import (
    AnalysisParams,
    availability,
    monte_carlo_availability,
    sweep,
    window_migration,
    window_reboot,
)
from .harness import (
    Scenario,
    build_world,
    compare_recovery_schemes,
    load_scenario,
    parse_scenario,
    run_benchmark,
    run_scenario,
)
from .messages import decode, digest_of, encode
from .migration import pair_sources_targets, select_sources
from .replica import Replica, ReplicaConfig
from .simnet import NetParams, Simulator

__all__ = [
    "AnalysisParams",
    "NetParams",
    "Replica",
    "ReplicaConfig",
    "Scenario",
    "Simulator",
    "availability",
    "build_world",
    "compare_recovery_schemes",
    "decode",
    "digest_of",
    "encode",
    "load_scenario",
    "monte_carlo_availability",
    "pair_sources_targets",
    "parse_scenario",
    "run_benchmark",
    "run_scenario",
    "select_sources",
    "sweep",
    "window_migration",
    "window_reboot",
]
