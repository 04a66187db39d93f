"""Migration-round mechanics: source scheduling, pairing, and round state.

Source selection walks the active replicas in reverse identifier order, f at
a time, so four rounds cover the whole group: round r = l mod 4 picks
{3f..2f+1}, {2f..f+1}, {f..1}, then {0, 3f..2f+2}.  The schedule depends only
on the round number, never on the view.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .messages import InitMigration


def select_sources(round_l: int, f: int) -> tuple[int, ...]:
    """Logical ids to migrate in round ``round_l`` (sorted ascending)."""
    if f < 1:
        raise ValueError("f must be >= 1")
    if round_l < 0:
        raise ValueError("round number must be >= 0")
    r = round_l % 4
    if r == 0:
        ids = range(2 * f + 1, 3 * f + 1)
    elif r == 1:
        ids = range(f + 1, 2 * f + 1)
    elif r == 2:
        ids = range(1, f + 1)
    else:
        ids = [0] + list(range(2 * f + 2, 3 * f + 1))
    return tuple(sorted(ids))


def pair_sources_targets(sources: tuple[int, ...],
                         targets: tuple[int, ...]) -> tuple[tuple[int, int], ...]:
    """Deterministic source/target pairing.

    The k-th smallest source id is paired with the k-th target in selection
    order (targets arrive ordered freshest-sanitized first).
    """
    if len(sources) != len(targets):
        raise ValueError("source and target sets must have equal size")
    return tuple(zip(sorted(sources), targets))


class RoundPhase(Enum):
    INITIATED = "initiated"
    ORDERED = "ordered"
    TRANSFERRING = "transferring"
    COMPLETE = "complete"


@dataclass
class MigrationRound:
    """Per-replica view of one migration round's progress."""

    round_l: int
    sources: tuple[int, ...]
    targets: tuple[int, ...]
    on_demand: bool = False
    phase: RoundPhase = RoundPhase.INITIATED
    votes: dict[int, InitMigration] = field(default_factory=dict)
    sync_seq: int | None = None
    request_formed: bool = False
    pending_acks: set[int] = field(default_factory=set)
    started_us: int = 0

    def matches(self, msg: InitMigration) -> bool:
        return (msg.round == self.round_l
                and msg.sources == self.sources
                and msg.targets == self.targets)

    def add_vote(self, msg: InitMigration) -> None:
        self.votes[msg.sender] = msg

    def vote_count(self) -> int:
        return len(self.votes)

    def vote_envelopes(self, store: dict[int, object]) -> tuple:
        return tuple(store[s] for s in sorted(self.votes))
