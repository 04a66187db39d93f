"""Active-replica bookkeeping of the standby-node roster.

The roster is part of the replicated middleware state: joins and leaves are
totally ordered before they touch it, so after executing the same prefix all
correct replicas hold the same entries and make the same target selections.
"""

from __future__ import annotations

from .messages import RosterEntry


class InsufficientStandbys(Exception):
    """Fewer registered standby nodes than a selection needs."""


class StandbyRoster:
    def __init__(self) -> None:
        self._entries: dict[int, RosterEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, node: int) -> bool:
        return node in self._entries

    def entry(self, node: int) -> RosterEntry | None:
        return self._entries.get(node)

    def counter_of(self, node: int) -> int:
        entry = self._entries.get(node)
        return entry.counter if entry is not None else 0

    def admit(self, node: int, counter: int, join_time_us: int) -> bool:
        """Record a join executed by the ordering core.

        Re-joins with a fresh coprocessor counter update the join time;
        replays (same or lower counter) are ignored.
        """
        current = self._entries.get(node)
        if current is not None and counter <= current.counter:
            return False
        self._entries[node] = RosterEntry(node=node, counter=counter, join_time=join_time_us)
        return True

    def remove(self, node: int) -> bool:
        return self._entries.pop(node, None) is not None

    def members(self) -> tuple[int, ...]:
        return tuple(sorted(self._entries))

    def least_elapsed(self, k: int, now_us: int) -> tuple[int, ...]:
        """The k standbys with the least time since their last sanitization.

        Ties break toward the smaller node id so every replica selects the
        same set.  Raises :class:`InsufficientStandbys` when the roster is
        too small; callers postpone the round and retry.
        """
        if len(self._entries) < k:
            raise InsufficientStandbys(f"need {k} standbys, have {len(self._entries)}")
        ranked = sorted(
            self._entries.values(), key=lambda e: (now_us - e.join_time, e.node)
        )
        return tuple(e.node for e in ranked[:k])

    def snapshot(self) -> tuple[RosterEntry, ...]:
        return tuple(self._entries[n] for n in sorted(self._entries))

    @classmethod
    def restore(cls, entries: tuple[RosterEntry, ...]) -> "StandbyRoster":
        roster = cls()
        for entry in entries:
            roster._entries[entry.node] = entry
        return roster
