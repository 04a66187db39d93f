"""Trusted configuration manager.

Owns the standby pool: runs sanitization and repair pipelines, probes node
health (against harness-injected ground truth), deregisters faulty standbys,
and hands sanitized nodes back to the replicas via join requests.  The
manager never participates in ordering and never holds replica state.
"""

from __future__ import annotations

from dataclasses import dataclass

from .messages import ActiveSetUpdate, DemotionReport, Envelope, LeaveRequest, encode
from .replica import NodeContext
from .simnet import Effects, to_us


@dataclass
class ManagerConfig:
    sanitize_s: float = 30.0
    repair_s: float = 120.0
    probe_s: float = 5.0
    initial_stagger_s: float = 0.2
    probe_actives: bool = False
    leave_resend: int = 2
    leave_resend_gap_s: float = 2.0


class ManagerProgram:
    STATUSES = ("sanitizing", "ready", "suspected", "repair", "promoted")

    def __init__(self, ctx: NodeContext, mcfg: ManagerConfig,
                 membership: tuple[int, ...], pool: tuple[int, ...],
                 fault_lookup=None) -> None:
        self.ctx = ctx
        self.physical = ctx.physical
        self.mcfg = mcfg
        self.membership: list[int] = list(membership)
        self.pool: dict[int, str] = {node: "sanitizing" for node in pool}
        self.fault_lookup = fault_lookup or (lambda node: False)
        self.report_tally: dict[tuple, set[int]] = {}
        self.handled_rounds: set[int] = set()

    def seal(self, msg, receivers) -> Envelope:
        return Envelope(payload=msg, auth=self.ctx.keys.authenticate(encode(msg), receivers))

    def begin(self, now: int) -> Effects:
        eff = Effects()
        eff.set_timer(("key",), self.ctx.keys.last_refresh_us + self.ctx.keys.refresh_period_us)
        eff.set_timer(("probe",), now + to_us(self.mcfg.probe_s))
        stagger = to_us(self.mcfg.initial_stagger_s)
        for idx, node in enumerate(sorted(self.pool)):
            eff.set_timer(("san", node), now + (idx + 1) * stagger)
        return eff

    # -- pipelines ----------------------------------------------------------------

    def _finish_sanitize(self, eff: Effects, node: int, now: int) -> None:
        if self.pool.get(node) != "sanitizing":
            return
        self.pool[node] = "ready"
        eff.control(node, ("sanitize_done", tuple(self.membership)), now)
        eff.trace("proto", f"sanitized node={node}")

    def _finish_repair(self, eff: Effects, node: int, now: int) -> None:
        if self.pool.get(node) != "repair":
            return
        self.pool[node] = "sanitizing"
        eff.set_timer(("san", node), now + to_us(self.mcfg.sanitize_s))
        eff.trace("proto", f"repaired node={node}")

    def _issue_leave(self, eff: Effects, node: int, now: int) -> None:
        sig = self.ctx.cop.sign(b"leave:" + node.to_bytes(8, "big"))
        leave = LeaveRequest(self.physical, node, sig)
        env = self.seal(leave, list(self.membership))
        for dst in self.membership:
            eff.send(dst, env)
        for i in range(1, self.mcfg.leave_resend + 1):
            eff.set_timer(("leave_rtx", node, i), now + i * to_us(self.mcfg.leave_resend_gap_s))
        eff.trace("proto", f"leave_issued node={node}")

    def _probe(self, eff: Effects, now: int) -> None:
        for node in sorted(self.pool):
            if self.pool[node] == "ready" and self.fault_lookup(node):
                self.pool[node] = "repair"
                eff.set_timer(("repair", node), now + to_us(self.mcfg.repair_s))
                self._issue_leave(eff, node, now)
        if self.mcfg.probe_actives:
            for node in sorted(self.membership):
                if self.fault_lookup(node):
                    self._issue_leave(eff, node, now)
        eff.set_timer(("probe",), now + to_us(self.mcfg.probe_s))

    # -- entry points ---------------------------------------------------------------

    def handle_timer(self, key: tuple, now: int) -> Effects:
        eff = Effects()
        kind = key[0]
        if kind == "key":
            while self.ctx.keys.due(now):
                self.ctx.keys.refresh(now)
            eff.set_timer(("key",), self.ctx.keys.last_refresh_us + self.ctx.keys.refresh_period_us)
        elif kind == "san":
            self._finish_sanitize(eff, key[1], now)
        elif kind == "repair":
            self._finish_repair(eff, key[1], now)
        elif kind == "probe":
            self._probe(eff, now)
        elif kind == "leave_rtx":
            node = key[1]
            if node in self.pool and self.pool[node] == "repair" or node in self.membership:
                sig = self.ctx.cop.sign(b"leave:" + node.to_bytes(8, "big"))
                leave = LeaveRequest(self.physical, node, sig)
                env = self.seal(leave, list(self.membership))
                for dst in self.membership:
                    eff.send(dst, env)
        return eff

    def handle_control(self, payload: tuple, now: int) -> Effects:
        eff = Effects()
        if payload[0] == "bootstrap":
            return self.begin(now)
        if payload[0] == "resume":
            eff.set_timer(("probe",), now + to_us(self.mcfg.probe_s))
        return eff

    def handle_deliver(self, src: int, env: Envelope, now: int) -> Effects:
        eff = Effects()
        msg = env.payload
        if env.auth is None or not self.ctx.keys.verify(encode(msg), env.auth, src):
            return eff
        if isinstance(msg, DemotionReport):
            self._on_demotion_report(eff, src, msg, now)
        return eff

    def _on_demotion_report(self, eff: Effects, src: int, msg: DemotionReport, now: int) -> None:
        if msg.round in self.handled_rounds:
            return
        key = (msg.round, msg.pairs, msg.nodes)
        voters = self.report_tally.setdefault(key, set())
        voters.add(src)
        if len(voters) < self.ctx.config.f + 1:
            return
        self.handled_rounds.add(msg.round)
        for logical, new_physical in msg.pairs:
            self.membership[logical] = new_physical
            self.pool.pop(new_physical, None)
        for node in msg.nodes:
            self.pool[node] = "sanitizing"
            eff.set_timer(("san", node), now + to_us(self.mcfg.sanitize_s))
        eff.trace("proto", f"demotions l={msg.round} nodes={','.join(map(str, msg.nodes))}")
        update = ActiveSetUpdate(self.physical, tuple(self.membership))
        standbys = [n for n, st in sorted(self.pool.items()) if st == "ready"]
        if standbys:
            env = self.seal(update, standbys)
            for dst in standbys:
                eff.send(dst, env)
