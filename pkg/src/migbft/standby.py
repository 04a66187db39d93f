"""Standby-node lifecycle: registration, promotion, and the demoted shell.

A physical node cycles through three programs: ``DemotedProgram`` (inert,
under manager control), ``StandbyProgram`` (registered spare collecting
promotion evidence), and :class:`~migbft.replica.Replica` once promoted.
"""

from __future__ import annotations

from .messages import (
    ActiveSetUpdate,
    CheckpointPackage,
    CheckpointTransfer,
    Envelope,
    FetchCheckpoint,
    JoinApproved,
    JoinRequest,
    MigrateNow,
    RecoveryAck,
    Request,
    digest_of,
    encode,
)
from .replica import NodeContext, Replica
from .simnet import Effects, to_us

JOIN_RETRY_S = 2.0


def _merge(eff: Effects, other: Effects | None) -> None:
    if other is None:
        return
    eff.sends.extend(other.sends)
    eff.timers.extend(other.timers)
    eff.controls.extend(other.controls)
    eff.transitions.extend(other.transitions)
    eff.traces.extend(other.traces)


class _KeyedProgram:
    """Shared plumbing: sealed sends, MAC checks, and key-epoch upkeep."""

    def __init__(self, ctx: NodeContext) -> None:
        self.ctx = ctx
        self.physical = ctx.physical

    def seal(self, msg, receivers) -> Envelope:
        return Envelope(payload=msg, auth=self.ctx.keys.authenticate(encode(msg), receivers))

    def verify(self, src: int, env: Envelope) -> bool:
        if env.auth is None:
            return False
        return self.ctx.keys.verify(encode(env.payload), env.auth, src)

    def arm_key_timer(self, eff: Effects, now: int) -> None:
        eff.set_timer(("key",), self.ctx.keys.last_refresh_us + self.ctx.keys.refresh_period_us)

    def tick_keys(self, eff: Effects, now: int) -> None:
        while self.ctx.keys.due(now):
            self.ctx.keys.refresh(now)
        self.arm_key_timer(eff, now)


class DemotedProgram(_KeyedProgram):
    """A node handed to the configuration manager; ignores the network."""

    def handle_deliver(self, src: int, env: Envelope, now: int) -> Effects | None:
        return None

    def handle_timer(self, key: tuple, now: int) -> Effects:
        eff = Effects()
        if key[0] == "key":
            self.tick_keys(eff, now)
        return eff

    def handle_control(self, payload: tuple, now: int) -> Effects:
        eff = Effects()
        kind = payload[0]
        if kind == "sanitize_done":
            standby = StandbyProgram(self.ctx, actives=tuple(payload[1]))
            eff.become(standby)
            _merge(eff, standby.begin(now))
        elif kind in ("bootstrap", "resume"):
            self.arm_key_timer(eff, now)
        return eff


class StandbyProgram(_KeyedProgram):
    """Sanitized spare node: registers with the actives, then waits to be
    promoted by a quorum of consistent migrate-now messages plus a checkpoint
    whose digest they vouch for."""

    def __init__(self, ctx: NodeContext, actives: tuple[int, ...]) -> None:
        super().__init__(ctx)
        self.actives = tuple(sorted(actives))
        self.registered = False
        self.join_counter = 0
        self.join_tally: dict[tuple[int, int], set[int]] = {}
        self.mn_tally: dict[tuple[int, bytes, tuple], dict[int, int]] = {}
        self.packages: dict[int, tuple[int, CheckpointPackage]] = {}
        self.failed_senders: dict[int, set[int]] = {}
        self.buffered_requests: list[tuple[int, Envelope]] = []

    # -- registration ---------------------------------------------------------

    def begin(self, now: int) -> Effects:
        eff = Effects()
        self.arm_key_timer(eff, now)
        self._send_join(eff, now)
        return eff

    def _send_join(self, eff: Effects, now: int) -> None:
        data = b"join:" + self.physical.to_bytes(8, "big")
        counter, sig = self.ctx.cop.counter_sign(data)
        self.join_counter = counter
        self.join_tally = {}
        join = JoinRequest(self.physical, counter, sig)
        for dst in self.actives:
            eff.send(dst, self.seal(join, [dst]))
        eff.set_timer(("join_retry",), now + to_us(JOIN_RETRY_S))
        eff.trace("proto", f"join_sent l={counter}")

    def handle_timer(self, key: tuple, now: int) -> Effects:
        eff = Effects()
        kind = key[0]
        if kind == "key":
            self.tick_keys(eff, now)
        elif kind == "join_retry":
            if not self.registered:
                self._send_join(eff, now)
        elif kind == "fetch":
            self._fetch_checkpoint(eff, key[1], now)
        return eff

    def handle_control(self, payload: tuple, now: int) -> Effects:
        eff = Effects()
        kind = payload[0]
        if kind in ("bootstrap", "resume"):
            self.arm_key_timer(eff, now)
            if not self.registered:
                self._send_join(eff, now)
        elif kind == "sanitize_done":
            self.actives = tuple(sorted(payload[1]))
            self.registered = False
            self._send_join(eff, now)
        return eff

    def handle_deliver(self, src: int, env: Envelope, now: int) -> Effects:
        eff = Effects()
        msg = env.payload
        if not self.verify(src, env):
            eff.trace("net", f"reject src={src} kind={type(msg).__name__} reason=mac")
            return eff
        if isinstance(msg, JoinApproved):
            self._on_join_approved(eff, src, msg, now)
        elif isinstance(msg, MigrateNow):
            self._on_migrate_now(eff, src, msg, now)
        elif isinstance(msg, CheckpointTransfer):
            self._on_transfer(eff, src, msg, now)
        elif isinstance(msg, ActiveSetUpdate):
            if src == self.ctx.config.manager:
                self.actives = msg.members
        elif isinstance(msg, Request):
            self.buffered_requests.append((src, env))
        return eff

    def _on_join_approved(self, eff: Effects, src: int, msg: JoinApproved, now: int) -> None:
        if msg.counter != self.join_counter or self.registered:
            return
        voters = self.join_tally.setdefault((msg.counter, msg.seq), set())
        voters.add(src)
        if len(voters) >= 2 * self.ctx.config.f + 1:
            self.registered = True
            eff.cancel_timer(("join_retry",))
            eff.trace("proto", f"registered l={msg.counter} n={msg.seq}")
            eff.trace("proto", "key_exchange")

    # -- promotion --------------------------------------------------------------

    def _on_migrate_now(self, eff: Effects, src: int, msg: MigrateNow, now: int) -> None:
        if src not in self.actives and src != msg.sender:
            return
        if not any(d == self.physical for _, d in msg.pairs):
            return
        key = (msg.seq, msg.ckpt_digest, msg.pairs)
        votes = self.mn_tally.setdefault(key, {})
        votes[src] = msg.view
        if len(votes) == 2 * self.ctx.config.f + 1 and msg.seq not in self.packages:
            eff.set_timer(("fetch", msg.seq), now + to_us(self.ctx.config.fetch_timeout_s))
        self._check_promote(eff, now)

    def _on_transfer(self, eff: Effects, src: int, msg: CheckpointTransfer, now: int) -> None:
        self.packages[msg.seq] = (src, msg.package)
        self._check_promote(eff, now)

    def _quorum_key(self) -> tuple[int, bytes, tuple] | None:
        need = 2 * self.ctx.config.f + 1
        for key in sorted(self.mn_tally, key=lambda k: k[0]):
            if len(self.mn_tally[key]) >= need:
                return key
        return None

    def _fetch_checkpoint(self, eff: Effects, seq: int, now: int) -> None:
        key = self._quorum_key()
        if key is None or key[0] != seq or seq in self.packages:
            return
        failed = self.failed_senders.get(seq, set())
        candidates = sorted(s for s in self.mn_tally[key] if s not in failed)
        if not candidates:
            return
        eff.trace("proto", f"fetch_ckpt n={seq} from={candidates[0]}")
        eff.send(candidates[0], self.seal(FetchCheckpoint(self.physical, seq), [candidates[0]]))
        eff.set_timer(("fetch", seq), now + to_us(self.ctx.config.fetch_timeout_s))

    def _check_promote(self, eff: Effects, now: int) -> None:
        key = self._quorum_key()
        if key is None:
            return
        seq, ckpt_digest, pairs = key
        stored = self.packages.get(seq)
        if stored is None:
            return
        provider, package = stored
        if digest_of(package) != ckpt_digest or package.seq != seq:
            eff.trace("proto", f"ckpt_mismatch n={seq} from={provider}")
            self.failed_senders.setdefault(seq, set()).add(provider)
            del self.packages[seq]
            self._fetch_checkpoint(eff, seq, now)
            return
        logical = next(s for s, d in pairs if d == self.physical)
        view = max(self.mn_tally[key].values())
        replica = Replica.from_package(self.ctx, package, view, now)
        eff.trace("proto", f"promoted logical={logical} l={package.middleware.completed_rounds - 1} n={seq}")
        ack = RecoveryAck(self.physical, seq, self.physical)
        others = [p for p in replica.membership if p != self.physical]
        env = self.seal(ack, others)
        for dst in others:
            eff.send(dst, env)
        eff.become(replica)
        eff.cancel_timer(("join_retry",))
        eff.control(self.physical, ("bootstrap",), now)
        for src, request_env in self.buffered_requests:
            _merge(eff, replica.handle_deliver(src, request_env, now))
