"""Deterministic discrete-event network, clock, and fault injection.

Time is integer microseconds.  The event queue is ordered by (time, insertion
id), so a (seed, scenario) pair always produces the same trace.  Delivery
delay is a seeded uniform draw within configured bounds plus transmission
time on a shared link, which models the bandwidth limit on state transfer
and the load sensitivity of a saturated LAN.

Node programs are single-threaded state machines: the simulator calls
``handle_deliver`` / ``handle_timer`` / ``handle_control`` and applies the
returned :class:`Effects`.  Adversarial behavior is injected by wrapping a
node's outputs in a fault policy; policies can only use that node's own keys,
so no trace can contain a forged message from an uncompromised node.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from .messages import (
    CheckpointPackage,
    CheckpointTransfer,
    Envelope,
    InitMigration,
    MigrationRequest,
    PrePrepare,
    Request,
    digest_of,
    wire_size,
)

US = 1_000_000


def to_us(seconds: float) -> int:
    return int(round(seconds * US))


def fmt_time(us: int) -> str:
    return f"{us // US}.{us % US:06d}"


@dataclass
class Effects:
    """Outputs of one handler invocation."""

    sends: list = field(default_factory=list)        # (dst, Envelope)
    timers: list = field(default_factory=list)       # (key, at_us | None)
    controls: list = field(default_factory=list)     # (node, payload, at_us)
    transitions: list = field(default_factory=list)  # ("become", program)
    traces: list = field(default_factory=list)       # (category, text)

    def send(self, dst: int, env: Envelope) -> None:
        self.sends.append((dst, env))

    def set_timer(self, key: tuple, at_us: int) -> None:
        self.timers.append((key, at_us))

    def cancel_timer(self, key: tuple) -> None:
        self.timers.append((key, None))

    def control(self, node: int, payload: tuple, at_us: int) -> None:
        self.controls.append((node, payload, at_us))

    def become(self, program) -> None:
        self.transitions.append(("become", program))

    def trace(self, category: str, text: str) -> None:
        self.traces.append((category, text))


@dataclass
class NetParams:
    min_delay_us: int = 500
    max_delay_us: int = 2000
    bandwidth_bps: int = 100_000_000  # shared-link capacity


# ---------------------------------------------------------------------------
# Fault policies
# ---------------------------------------------------------------------------

class FaultPolicy:
    """Byzantine behavior applied to a compromised node's outputs."""

    name = "byzantine"
    delay_to_bound = False

    def transform_sends(self, sends: list, program, rng: random.Random) -> list:
        return sends

    def allow_transition(self, transition: tuple) -> bool:
        return True


class DropMessages(FaultPolicy):
    """Silently drop all (or selected kinds of) outbound messages."""

    name = "drop-messages"

    def __init__(self, kinds: tuple[type, ...] | None = None) -> None:
        self.kinds = kinds

    def transform_sends(self, sends, program, rng):
        if self.kinds is None:
            return []
        return [(d, e) for d, e in sends if not isinstance(e.payload, self.kinds)]


class DelayToBound(FaultPolicy):
    """Always deliver at the maximum network delay."""

    name = "delay-to-bound"
    delay_to_bound = True


class MuteMigration(FaultPolicy):
    """Suppress recovery coordination: no votes, and never order a migration."""

    name = "mute-migration"

    def transform_sends(self, sends, program, rng):
        kept = []
        for dst, env in sends:
            msg = env.payload
            if isinstance(msg, InitMigration):
                continue
            if isinstance(msg, PrePrepare) and isinstance(msg.special, MigrationRequest):
                continue
            kept.append((dst, env))
        return kept


class CorruptState(FaultPolicy):
    """Send garbage instead of the real checkpoint payload."""

    name = "corrupt-state"

    def transform_sends(self, sends, program, rng):
        out = []
        for dst, env in sends:
            msg = env.payload
            if isinstance(msg, CheckpointTransfer):
                bad_state = bytes(b ^ 0xFF for b in msg.package.app_state) or b"\x00"
                bad = CheckpointTransfer(
                    sender=msg.sender,
                    seq=msg.seq,
                    package=CheckpointPackage(
                        seq=msg.package.seq,
                        app_state=bad_state,
                        app_pad=msg.package.app_pad,
                        middleware=msg.package.middleware,
                    ),
                )
                env = program.seal(bad, [dst])
            out.append((dst, env))
        return out


class Equivocate(FaultPolicy):
    """Send conflicting proposals to different receivers (own key, so allowed)."""

    name = "equivocate"

    def transform_sends(self, sends, program, rng):
        out = []
        for dst, env in sends:
            msg = env.payload
            if isinstance(msg, PrePrepare) and msg.requests and dst % 2 == 1:
                forked = tuple(
                    Request(r.sender, r.client, r.reqid, digest_of(r.payload))
                    for r in msg.requests
                )
                alt = PrePrepare(
                    sender=msg.sender, view=msg.view, seq=msg.seq,
                    requests=forked, special=None, join_time=msg.join_time,
                    attachments=msg.attachments,
                )
                env = program.seal(alt, [dst])
            out.append((dst, env))
        return out


class IgnoreDemotion(FaultPolicy):
    """Refuse to step down after being migrated out; keep answering clients."""

    name = "ignore-demotion"

    def allow_transition(self, transition):
        return transition[0] != "become"


POLICIES = {
    "drop-messages": DropMessages,
    "delay-to-bound": DelayToBound,
    "mute-migration": MuteMigration,
    "corrupt-state": CorruptState,
    "equivocate": Equivocate,
    "ignore-demotion": IgnoreDemotion,
}


@dataclass
class _NodeSlot:
    program: object
    crashed: bool = False
    policy: FaultPolicy | None = None
    timer_gen: dict = field(default_factory=dict)


class Simulator:
    """Single-threaded event loop over all node state machines."""

    def __init__(self, seed: int, net: NetParams | None = None,
                 trace_categories: tuple[str, ...] = ("proto", "metric")) -> None:
        self.rng = random.Random(seed)
        self.net = net or NetParams()
        self.now_us = 0
        self.trace: list[str] = []
        self._categories = set(trace_categories)
        self._heap: list = []
        self._counter = 0
        self._nodes: dict[int, _NodeSlot] = {}
        self._bus_free_us = 0
        self.stats = {"events": 0, "delivered": 0, "dropped": 0}

    # -- construction -------------------------------------------------------

    def add_node(self, node_id: int, program) -> None:
        if node_id in self._nodes:
            raise ValueError(f"duplicate node {node_id}")
        self._nodes[node_id] = _NodeSlot(program=program)

    def program_of(self, node_id: int):
        return self._nodes[node_id].program

    # -- fault plan ---------------------------------------------------------

    def schedule_crash(self, node: int, start_us: int, end_us: int | None = None) -> None:
        self._push(start_us, ("fault", node, "crash_on", None))
        if end_us is not None:
            self._push(end_us, ("fault", node, "crash_off", None))

    def schedule_policy(self, node: int, policy: FaultPolicy, start_us: int,
                        end_us: int | None = None) -> None:
        self._push(start_us, ("fault", node, "policy_on", policy))
        if end_us is not None:
            self._push(end_us, ("fault", node, "policy_off", None))

    def fault_active(self, node: int) -> bool:
        slot = self._nodes[node]
        return slot.crashed or slot.policy is not None

    def clear_fault(self, node: int) -> None:
        slot = self._nodes[node]
        slot.crashed = False
        slot.policy = None

    def schedule_control(self, node: int, payload: tuple, at_us: int) -> None:
        self._push(at_us, ("control", node, payload))

    # -- event machinery ----------------------------------------------------

    def _push(self, at_us: int, event: tuple) -> None:
        if at_us < self.now_us:
            at_us = self.now_us
        self._counter += 1
        heapq.heappush(self._heap, (at_us, self._counter, event))

    def _emit_trace(self, category: str, node: int, text: str) -> None:
        if category in self._categories:
            self.trace.append(f"{fmt_time(self.now_us)} n{node} {text}")

    def _apply_effects(self, node: int, effects: Effects) -> None:
        slot = self._nodes[node]
        sends = effects.sends
        policy = slot.policy
        if policy is not None and sends:
            sends = policy.transform_sends(sends, slot.program, self.rng)
        for dst, env in sends:
            if dst == node:
                raise AssertionError("self-sends are not allowed; handle locally")
            self._dispatch_send(node, dst, env, policy)
        for key, at_us in effects.timers:
            gen = slot.timer_gen.get(key, 0) + 1
            slot.timer_gen[key] = gen
            if at_us is not None:
                self._push(at_us, ("timer", node, key, gen))
        for dst, payload, at_us in effects.controls:
            self._push(at_us, ("control", dst, payload))
        for transition in effects.transitions:
            if policy is not None and not policy.allow_transition(transition):
                self._emit_trace("proto", node, f"transition_vetoed kind={transition[0]}")
                continue
            if transition[0] == "become":
                slot.program = transition[1]
        for category, text in effects.traces:
            self._emit_trace(category, node, text)

    def _dispatch_send(self, src: int, dst: int, env: Envelope,
                       policy: FaultPolicy | None) -> None:
        size = wire_size(env)
        start = max(self.now_us, self._bus_free_us)
        tx_us = (size * US) // self.net.bandwidth_bps
        self._bus_free_us = start + tx_us
        if policy is not None and policy.delay_to_bound:
            jitter = self.net.max_delay_us
        else:
            jitter = self.rng.randint(self.net.min_delay_us, self.net.max_delay_us)
        self._push(start + tx_us + jitter, ("deliver", dst, env, src))

    def _process(self, event: tuple) -> None:
        kind = event[0]
        if kind == "deliver":
            _, dst, env, src = event
            slot = self._nodes.get(dst)
            if slot is None or slot.crashed:
                self.stats["dropped"] += 1
                self._emit_trace("net", dst, f"drop src={src} kind={type(env.payload).__name__} reason=down")
                return
            self.stats["delivered"] += 1
            self._emit_trace("net", dst, f"recv src={src} kind={type(env.payload).__name__}")
            effects = slot.program.handle_deliver(src, env, self.now_us)
            if effects is not None:
                self._apply_effects(dst, effects)
        elif kind == "timer":
            _, node, key, gen = event
            slot = self._nodes[node]
            if slot.timer_gen.get(key) != gen:
                return
            if slot.crashed:
                return
            effects = slot.program.handle_timer(key, self.now_us)
            if effects is not None:
                self._apply_effects(node, effects)
        elif kind == "control":
            _, node, payload = event
            slot = self._nodes[node]
            if payload[0] == "sanitize_done":
                # Sanitization wipes whatever the adversary planted.
                self.clear_fault(node)
            elif slot.crashed:
                return
            effects = slot.program.handle_control(payload, self.now_us)
            if effects is not None:
                self._apply_effects(node, effects)
        elif kind == "fault":
            _, node, op, policy = event
            slot = self._nodes[node]
            if op == "crash_on":
                slot.crashed = True
                self._emit_trace("proto", node, "crash")
            elif op == "crash_off":
                if slot.crashed:
                    slot.crashed = False
                    self._emit_trace("proto", node, "resume")
                    effects = slot.program.handle_control(("resume",), self.now_us)
                    if effects is not None:
                        self._apply_effects(node, effects)
            elif op == "policy_on":
                slot.policy = policy
                self._emit_trace("proto", node, f"compromised policy={policy.name}")
            elif op == "policy_off":
                slot.policy = None
                self._emit_trace("proto", node, "policy_cleared")
        else:  # pragma: no cover
            raise AssertionError(f"unknown event {kind}")

    # -- driving ------------------------------------------------------------

    def run_until(self, time_s: float | None = None, predicate=None,
                  max_events: int | None = None) -> list[str]:
        """Process events in order until the limit, a predicate, or queue end."""
        limit_us = None if time_s is None else to_us(time_s)
        while self._heap:
            at_us, _, event = self._heap[0]
            if limit_us is not None and at_us > limit_us:
                break
            heapq.heappop(self._heap)
            self.now_us = at_us
            self.stats["events"] += 1
            self._process(event)
            if max_events is not None and self.stats["events"] >= max_events:
                break
            if predicate is not None and predicate(self):
                break
        if limit_us is not None and self.now_us < limit_us:
            self.now_us = limit_us
        return self.trace
