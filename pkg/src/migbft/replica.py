"""Active-replica state machine.

One class drives everything a replica does: three-phase total ordering
(pre-prepare / prepare / commit), execution and checkpointing, a simplified
view change, standby-roster maintenance, migration rounds, and client
membership notifications.  Each replica is a deterministic single-threaded
handler: the simulator feeds it (event, time) and applies the returned
effects; handlers are never re-entered.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .authn import Keychain, SecureCoprocessor, SessionKeys
from .messages import (
    ActiveSetUpdate,
    Checkpoint,
    CheckpointPackage,
    CheckpointTransfer,
    ClientRecord,
    Commit,
    DemotionReport,
    Envelope,
    FetchCheckpoint,
    FetchInitMigrations,
    InitMigration,
    JoinApproved,
    JoinRequest,
    LeaveRequest,
    Middleware,
    MigrateNow,
    MigrationRequest,
    NewMembership,
    NewView,
    PrePrepare,
    Prepare,
    PreparedProof,
    RecoveryAck,
    Reply,
    Request,
    Role,
    ViewChange,
    digest_of,
    encode,
    proposal_digest,
)
from .migration import MigrationRound, RoundPhase, pair_sources_targets, select_sources
from .registry import InsufficientStandbys, StandbyRoster
from .simnet import Effects, to_us


@dataclass
class ReplicaConfig:
    """Tunable protocol parameters shared by every replica in a deployment."""

    f: int = 1
    manager: int = 0
    view_change_timeout_s: float = 5.0
    retransmit_interval_s: float = 0.5
    checkpoint_interval: int = 128
    watermark_window: int = 256
    batch_max: int = 16
    pipeline_depth: int = 2
    migration_period_s: float = 70.0
    migration_retry_s: float = 1.0
    key_refresh_s: float = 15.0
    primary_state_threshold: int = 100_000
    fetch_timeout_s: float = 2.0
    state_pad: int = 0
    migration_enabled: bool = True

    @property
    def n_active(self) -> int:
        return 3 * self.f + 1

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1


class EchoApp:
    """Echo service used by the benchmarks.

    The functional state is a rolling digest over executed requests, which
    makes divergence between replicas visible in checkpoint digests.  The
    configured application footprint is modeled as checkpoint padding, so
    transfers pay for it on the wire without materializing it.
    """

    def __init__(self, pad: int = 0) -> None:
        self.state = digest_of(b"genesis")
        self.pad = pad

    def execute(self, payload: bytes) -> bytes:
        self.state = digest_of(self.state + digest_of(payload))
        return payload

    def snapshot(self) -> bytes:
        return self.state

    def restore(self, snap: bytes) -> None:
        self.state = snap


@dataclass
class NodeContext:
    """Per-physical-node plumbing handed to whichever program runs on it."""

    physical: int
    keychain: Keychain
    keys: SessionKeys
    cop: SecureCoprocessor
    roles: dict[int, Role]
    config: ReplicaConfig


@dataclass
class _Slot:
    pp: PrePrepare | None = None
    pp_env: Envelope | None = None
    digest: bytes | None = None
    prepares: dict[int, bytes] = field(default_factory=dict)
    commits: dict[int, bytes] = field(default_factory=dict)
    prepared: bool = False
    committed: bool = False
    executed: bool = False


def _ids(values) -> str:
    return ",".join(str(v) for v in values)


class Replica:
    """One active replica: ordering core plus the recovery machinery."""

    def __init__(self, ctx: NodeContext, membership: tuple[int, ...], view: int = 0) -> None:
        cfg = ctx.config
        if len(membership) != cfg.n_active:
            raise ValueError("membership must list 3f+1 physical nodes")
        self.ctx = ctx
        self.cfg = cfg
        self.physical = ctx.physical
        self.view = view
        self.in_view_change = False
        self.vc_backoff = 0
        self.membership: list[int] = list(membership)

        self.next_seq = 1
        self.last_executed = 0
        self.low_mark = 0
        self.slots: dict[int, _Slot] = {}
        self.app = EchoApp(pad=cfg.state_pad)

        self.client_table: dict[int, ClientRecord] = {}
        self.known_clients: set[int] = set()
        self.request_queue: deque[Request] = deque()
        self.queued_ids: set[tuple[int, int]] = set()
        self.special_queue: deque[tuple[object, tuple[Envelope, ...]]] = deque()
        self.relayed: set[tuple[int, int]] = set()

        self.roster = StandbyRoster()
        self.completed_rounds = 0
        self.next_round_l = 0
        self.last_migration_seq = 0
        self.last_migration_pairs: tuple[tuple[int, int], ...] = ()
        self.last_migration_view = 0
        self.notified: dict[int, int] = {}
        self.round: MigrationRound | None = None
        self.round_vote_envs: dict[int, Envelope] = {}
        self.init_hw: dict[tuple[int, int], int] = {}
        self.on_demand_queue: deque[tuple[int, ...]] = deque()
        self.acks_buffer: dict[int, set[int]] = {}

        self.ckpts: dict[int, CheckpointPackage] = {}
        self.ckpt_tally: dict[int, dict[int, bytes]] = {}
        genesis = self._build_package(0)
        self.ckpts[0] = genesis
        self.stable_digest = digest_of(genesis)

        self.vc_log: dict[int, dict[int, tuple[ViewChange, Envelope]]] = {}
        self.vc_timer_armed = False
        self.rtx_armed = False
        self.executed_log: list[tuple[int, bytes]] = []
        self.pending_relays: set[tuple] = set()
        self.pending_packages: dict[int, CheckpointPackage] = {}
        self._self_migration_pending = False
        self._fetch_votes_at: dict[tuple[int, int], int] = {}

    # -- small helpers -------------------------------------------------------

    @property
    def logical(self) -> int:
        try:
            return self.membership.index(self.physical)
        except ValueError:
            return -1

    def primary_logical(self, view: int | None = None) -> int:
        return (self.view if view is None else view) % self.cfg.n_active

    def primary_physical(self, view: int | None = None) -> int:
        return self.membership[self.primary_logical(view)]

    @property
    def is_primary(self) -> bool:
        return not self.in_view_change and self.primary_physical() == self.physical

    def seal(self, msg, receivers) -> Envelope:
        return Envelope(payload=msg, auth=self.ctx.keys.authenticate(encode(msg), receivers))

    def _others(self) -> list[int]:
        return [p for p in self.membership if p != self.physical]

    def _multicast(self, eff: Effects, msg) -> Envelope:
        others = self._others()
        env = self.seal(msg, others)
        for dst in others:
            eff.send(dst, env)
        return env

    def _send(self, eff: Effects, dst: int, msg) -> None:
        eff.send(dst, self.seal(msg, [dst]))

    def _slot(self, seq: int) -> _Slot:
        slot = self.slots.get(seq)
        if slot is None:
            slot = self.slots[seq] = _Slot()
        return slot

    def _verify(self, src: int, env: Envelope) -> bool:
        if env.auth is None:
            return False
        return self.ctx.keys.verify(encode(env.payload), env.auth, src)

    # -- entry points --------------------------------------------------------

    def handle_control(self, payload: tuple, now: int) -> Effects:
        eff = Effects()
        kind = payload[0]
        if kind == "bootstrap":
            self._arm_basic_timers(eff, now)
        elif kind == "resume":
            self._arm_basic_timers(eff, now)
            self._arm_rtx(eff, now)
            fetch = FetchCheckpoint(self.physical, 0)
            self._multicast(eff, fetch)
        elif kind == "evidence":
            self._trigger_on_demand(eff, tuple(payload[1]), now)
        return eff

    def _arm_basic_timers(self, eff: Effects, now: int) -> None:
        keys = self.ctx.keys
        eff.set_timer(("key",), keys.last_refresh_us + keys.refresh_period_us)
        if self.cfg.migration_enabled and self.round is None:
            eff.set_timer(("mig",), now + to_us(self.cfg.migration_period_s))

    def handle_timer(self, key: tuple, now: int) -> Effects:
        eff = Effects()
        kind = key[0]
        if kind == "key":
            keys = self.ctx.keys
            while keys.due(now):
                keys.refresh(now)
            eff.set_timer(("key",), keys.last_refresh_us + keys.refresh_period_us)
        elif kind == "mig":
            self._on_migration_timer(eff, now)
        elif kind == "vc":
            self.vc_timer_armed = False
            self._start_view_change(eff, self.view + 1, now, reason="timeout")
        elif kind == "rtx":
            self._retransmit(eff, now)
        return eff

    def handle_deliver(self, src: int, env: Envelope, now: int) -> Effects:
        eff = Effects()
        msg = env.payload
        if not self._verify(src, env):
            eff.trace("net", f"reject src={src} kind={type(msg).__name__} reason=mac")
            return eff
        if not self._sender_allowed(src, msg):
            eff.trace("net", f"reject src={src} kind={type(msg).__name__} reason=sender")
            return eff

        if isinstance(msg, Request):
            self._on_request(eff, src, msg, now)
        elif isinstance(msg, PrePrepare):
            self._on_pre_prepare(eff, src, msg, env, now)
        elif isinstance(msg, Prepare):
            self._on_prepare(eff, src, msg, now)
        elif isinstance(msg, Commit):
            self._on_commit(eff, src, msg, now)
        elif isinstance(msg, Checkpoint):
            self._on_checkpoint_msg(eff, src, msg, now)
        elif isinstance(msg, JoinRequest):
            self._on_join_request(eff, src, msg, env, now)
        elif isinstance(msg, LeaveRequest):
            self._on_leave_request(eff, src, msg, env, now)
        elif isinstance(msg, InitMigration):
            self._on_init_migration(eff, src, msg, env, now)
        elif isinstance(msg, FetchInitMigrations):
            self._on_fetch_inits(eff, src, msg, now)
        elif isinstance(msg, FetchCheckpoint):
            self._on_fetch_checkpoint(eff, src, msg, now)
        elif isinstance(msg, CheckpointTransfer):
            self._on_checkpoint_transfer(eff, src, msg, now)
        elif isinstance(msg, RecoveryAck):
            self._on_recovery_ack(eff, src, msg, now)
        elif isinstance(msg, ViewChange):
            self._on_view_change_msg(eff, src, msg, env, now)
        elif isinstance(msg, NewView):
            self._on_new_view(eff, src, msg, now)
        return eff

    def _sender_allowed(self, src: int, msg) -> bool:
        role = self.ctx.roles.get(src)
        if isinstance(msg, Request):
            return role is Role.CLIENT or src in self.membership
        if isinstance(msg, JoinRequest):
            return role is not Role.CLIENT and src != self.cfg.manager
        if isinstance(msg, LeaveRequest):
            return src == self.cfg.manager
        return src in self.membership

    # -- request intake and proposals ----------------------------------------

    def _on_request(self, eff: Effects, src: int, req: Request, now: int) -> None:
        record = self.client_table.get(req.client)
        if record is not None and req.reqid <= record.reqid:
            if src == req.client and req.reqid == record.reqid:
                self._send(eff, req.client,
                           Reply(self.physical, self.view, record.reqid, self.logical, record.reply))
            return
        if self.is_primary:
            key = (req.client, req.reqid)
            if key in self.queued_ids:
                return
            self.queued_ids.add(key)
            self.request_queue.append(req)
            self._try_propose(eff, now)
        else:
            key = (req.client, req.reqid)
            if key not in self.relayed:
                self.relayed.add(key)
                self._send(eff, self.primary_physical(), req)
            self.pending_relays.add(("req", req.client, req.reqid))
            self._arm_vc(eff, now)

    def _in_flight(self) -> int:
        return sum(1 for s in self.slots.values() if s.pp is not None and not s.committed)

    def _try_propose(self, eff: Effects, now: int) -> None:
        if not self.is_primary:
            return
        while self.next_seq <= self.low_mark + self.cfg.watermark_window:
            if self._self_migration_pending:
                return
            if self._in_flight() >= self.cfg.pipeline_depth:
                return
            if self.special_queue:
                special, attachments = self.special_queue.popleft()
                join_time = now if isinstance(special, JoinRequest) else 0
                pp = PrePrepare(self.physical, self.view, self.next_seq,
                                requests=(), special=special, join_time=join_time,
                                attachments=attachments)
            elif self.request_queue:
                batch = []
                while self.request_queue and len(batch) < self.cfg.batch_max:
                    req = self.request_queue.popleft()
                    self.queued_ids.discard((req.client, req.reqid))
                    batch.append(req)
                pp = PrePrepare(self.physical, self.view, self.next_seq,
                                requests=tuple(batch), special=None, join_time=0,
                                attachments=())
            else:
                return
            self.next_seq += 1
            self._store_proposal(eff, pp, self._multicast(eff, pp), now)

    def _store_proposal(self, eff: Effects, pp: PrePrepare, env: Envelope, now: int) -> None:
        slot = self._slot(pp.seq)
        slot.pp = pp
        slot.pp_env = env
        slot.digest = proposal_digest(pp)
        if isinstance(pp.special, MigrationRequest):
            eff.trace("metric", f"mig_pp l={pp.special.round} n={pp.seq}")
            if self.round is not None and self.round.round_l == pp.special.round:
                self.round.phase = RoundPhase.ORDERED
                self.round.sync_seq = pp.seq
            if self.logical in pp.special.sources:
                self._self_migration_pending = True
            eff.trace("proto", f"round_ordered l={pp.special.round} n={pp.seq}")
        self._arm_rtx(eff, now)
        self._check_commit(eff, pp.seq, now)

    # -- three-phase ordering --------------------------------------------------

    def _on_pre_prepare(self, eff: Effects, src: int, pp: PrePrepare, env: Envelope, now: int) -> None:
        if self.in_view_change or pp.view != self.view or src != self.primary_physical():
            return
        if not (self.low_mark < pp.seq <= self.low_mark + self.cfg.watermark_window):
            return
        slot = self._slot(pp.seq)
        digest = proposal_digest(pp)
        if slot.pp is not None:
            if slot.digest != digest:
                eff.trace("proto", f"conflicting_pp n={pp.seq}")
            return
        if not self._validate_special(eff, src, pp, now):
            return
        slot.pp = pp
        slot.pp_env = env
        slot.digest = digest
        if isinstance(pp.special, MigrationRequest):
            self._align_round_to_request(eff, pp.special, pp.seq, now)
            eff.trace("proto", f"round_ordered l={pp.special.round} n={pp.seq}")
        prepare = Prepare(self.physical, self.view, pp.seq, digest)
        self._multicast(eff, prepare)
        slot.prepares[self.physical] = digest
        self._arm_vc(eff, now)
        self._arm_rtx(eff, now)
        self._check_prepared(eff, pp.seq, now)

    def _validate_special(self, eff: Effects, src: int, pp: PrePrepare, now: int) -> bool:
        special = pp.special
        if special is None:
            return True
        if isinstance(special, JoinRequest):
            if not self._join_sig_ok(special):
                eff.trace("proto", f"bad_join_sig node={special.sender}")
                return False
            return True
        if isinstance(special, LeaveRequest):
            if not self.ctx.keychain.verify_signature(
                    special.sender, b"leave:" + special.node.to_bytes(8, "big"), special.sig):
                eff.trace("proto", f"bad_leave_sig node={special.node}")
                return False
            return True
        if isinstance(special, MigrationRequest):
            senders = set()
            for att in pp.attachments:
                vote = att.payload
                if not isinstance(vote, InitMigration):
                    continue
                if (vote.round != special.round or vote.sources != special.sources
                        or vote.targets != special.targets):
                    continue
                if not self._verify(vote.sender, att):
                    continue
                senders.add(vote.sender)
            if len(senders) < self.cfg.quorum:
                eff.trace("proto", f"missing_votes l={special.round} have={len(senders)}")
                key = (self.view, special.round)
                if now - self._fetch_votes_at.get(key, -10**9) >= to_us(0.2):
                    self._fetch_votes_at[key] = now
                    self._send(eff, src, FetchInitMigrations(self.physical, self.view, special.round))
                return False
            return True
        return False

    def _align_round_to_request(self, eff: Effects, mr: MigrationRequest, seq: int, now: int) -> None:
        rnd = self.round
        if rnd is None or rnd.round_l != mr.round or rnd.sources != mr.sources \
                or rnd.targets != mr.targets:
            rnd = MigrationRound(mr.round, mr.sources, mr.targets, started_us=now)
            self.round = rnd
        rnd.request_formed = True
        rnd.phase = RoundPhase.ORDERED
        rnd.sync_seq = seq

    def _on_prepare(self, eff: Effects, src: int, msg: Prepare, now: int) -> None:
        if msg.view != self.view or self.in_view_change:
            return
        if not (self.low_mark < msg.seq <= self.low_mark + self.cfg.watermark_window):
            return
        slot = self._slot(msg.seq)
        slot.prepares.setdefault(src, msg.digest)
        self._check_prepared(eff, msg.seq, now)

    def _check_prepared(self, eff: Effects, seq: int, now: int) -> None:
        slot = self.slots.get(seq)
        if slot is None or slot.pp is None or slot.prepared:
            return
        primary = self.primary_physical()
        matching = sum(1 for s, d in slot.prepares.items()
                       if d == slot.digest and s != primary)
        if matching >= 2 * self.cfg.f:
            slot.prepared = True
            commit = Commit(self.physical, self.view, seq, slot.digest)
            self._multicast(eff, commit)
            slot.commits[self.physical] = slot.digest
            self._check_commit(eff, seq, now)

    def _on_commit(self, eff: Effects, src: int, msg: Commit, now: int) -> None:
        if msg.view != self.view or self.in_view_change:
            return
        if not (self.low_mark < msg.seq <= self.low_mark + self.cfg.watermark_window):
            return
        slot = self._slot(msg.seq)
        slot.commits.setdefault(src, msg.digest)
        self._check_commit(eff, msg.seq, now)

    def _check_commit(self, eff: Effects, seq: int, now: int) -> None:
        slot = self.slots.get(seq)
        if slot is None or slot.pp is None or slot.committed:
            return
        if not slot.prepared:
            return
        matching = sum(1 for d in slot.commits.values() if d == slot.digest)
        if matching >= self.cfg.quorum:
            slot.committed = True
            self._execute_ready(eff, now)

    # -- execution -------------------------------------------------------------

    def _execute_ready(self, eff: Effects, now: int) -> None:
        while True:
            seq = self.last_executed + 1
            slot = self.slots.get(seq)
            if slot is None or not slot.committed or slot.executed:
                break
            slot.executed = True
            self.last_executed = seq
            self.executed_log.append((seq, slot.digest))
            pp = slot.pp
            demoted_self = False
            if pp.special is None:
                for req in pp.requests:
                    self._execute_request(eff, req, seq, now)
            elif isinstance(pp.special, JoinRequest):
                self._execute_join(eff, pp.special, pp.join_time, seq, now)
            elif isinstance(pp.special, LeaveRequest):
                self._execute_leave(eff, pp.special, seq, now)
            elif isinstance(pp.special, MigrationRequest):
                demoted_self = self._execute_migration(eff, pp.special, seq, now)
            if seq % self.cfg.checkpoint_interval == 0:
                self._make_checkpoint(eff, seq, now)
            if demoted_self:
                return
        self._refresh_vc(eff, now)
        if self.is_primary:
            self._try_propose(eff, now)

    def _execute_request(self, eff: Effects, req: Request, seq: int, now: int) -> None:
        record = self.client_table.get(req.client)
        if record is not None and req.reqid <= record.reqid:
            reply_payload = record.reply
        else:
            reply_payload = self.app.execute(req.payload)
            self.client_table[req.client] = ClientRecord(req.client, req.reqid, reply_payload)
        self.pending_relays.discard(("req", req.client, req.reqid))
        self.known_clients.add(req.client)
        self._maybe_notify(eff, req.client, seq)
        self._send(eff, req.client,
                   Reply(self.physical, self.view, req.reqid, self.logical, reply_payload))

    def _maybe_notify(self, eff: Effects, client: int, seq: int) -> None:
        if self.last_migration_seq == 0 or seq <= self.last_migration_seq:
            return
        if self.notified.get(client, 0) >= self.last_migration_seq:
            return
        self.notified[client] = self.last_migration_seq
        self._send(eff, client,
                   NewMembership(self.physical, self.last_migration_view,
                                 self.last_migration_seq, self.last_migration_pairs))
        eff.trace("proto", f"notify client={client} n={self.last_migration_seq}")

    def _execute_join(self, eff: Effects, jr: JoinRequest, join_time: int, seq: int, now: int) -> None:
        if self.roster.admit(jr.sender, jr.counter, join_time):
            eff.trace("proto", f"join_exec node={jr.sender} l={jr.counter} n={seq}")
        self.pending_relays.discard(("join", jr.sender, jr.counter))
        self._send(eff, jr.sender, JoinApproved(self.physical, jr.counter, seq))

    def _execute_leave(self, eff: Effects, lr: LeaveRequest, seq: int, now: int) -> None:
        node = lr.node
        self.pending_relays.discard(("leave", node))
        if node in self.roster:
            self.roster.remove(node)
            eff.trace("proto", f"leave_exec node={node} n={seq}")
            rnd = self.round
            if rnd is not None and node in rnd.targets and rnd.phase is not RoundPhase.COMPLETE:
                self._abort_and_restart(eff, node, now)
        elif node in self.membership:
            eff.trace("proto", f"leave_exec node={node} n={seq} active=1")
            self._trigger_on_demand(eff, (self.membership.index(node),), now)

    def _execute_migration(self, eff: Effects, mr: MigrationRequest, seq: int, now: int) -> bool:
        """Apply a committed migration request; returns True if self demoted."""
        l = mr.round
        self._self_migration_pending = False
        if l < self.next_round_l:
            return False
        if any(d not in self.roster for d in mr.targets):
            eff.trace("proto", f"round_skip l={l} n={seq} reason=stale_targets")
            return False

        pairs = pair_sources_targets(mr.sources, mr.targets)
        my_logical = self.logical
        old_primary_logical = self.primary_logical()
        demoted_physicals = tuple(self.membership[s] for s in mr.sources)
        for s, d in pairs:
            self.membership[s] = d
        for d in mr.targets:
            self.roster.remove(d)
        self.completed_rounds = l + 1
        self.next_round_l = self.completed_rounds
        self.last_migration_seq = seq
        self.last_migration_pairs = pairs
        self.last_migration_view = self.view

        package = self._build_package(seq)
        self.ckpts[seq] = package
        ckpt_digest = digest_of(package)
        eff.trace("proto", f"round_exec l={l} n={seq} pairs={_ids(f'{s}-{d}' for s, d in pairs)}")

        migrate_now = MigrateNow(self.physical, self.view, seq, ckpt_digest, pairs)
        for d in mr.targets:
            self._send(eff, d, migrate_now)

        designated = min(i for i in range(self.cfg.n_active) if i not in mr.sources)
        if my_logical == designated:
            transfer = CheckpointTransfer(self.physical, seq, package)
            for d in mr.targets:
                self._send(eff, d, transfer)
            eff.trace("proto", f"ckpt_sent n={seq} targets={_ids(mr.targets)}")

        if my_logical == old_primary_logical:
            for req in self.request_queue:
                for d in mr.targets:
                    self._send(eff, d, req)

        self._send(eff, self.cfg.manager,
                   DemotionReport(self.physical, l, pairs, demoted_physicals))

        rnd = self.round
        if rnd is None or rnd.round_l != l:
            rnd = MigrationRound(l, mr.sources, mr.targets, started_us=now)
            self.round = rnd
        rnd.phase = RoundPhase.TRANSFERRING
        rnd.sync_seq = seq
        rnd.pending_acks = set(mr.targets)
        buffered = self.acks_buffer.pop(seq, None)
        if buffered:
            rnd.pending_acks -= buffered

        self._checkpoint_announce(eff, seq, ckpt_digest, now)

        if my_logical in mr.sources:
            eff.trace("proto", f"demoted logical={my_logical}")
            from .standby import DemotedProgram  # deferred: standby builds on replica
            eff.become(DemotedProgram(self.ctx))
            return True

        if old_primary_logical in mr.sources:
            state_size = self.cfg.state_pad + len(self.app.snapshot())
            if state_size >= self.cfg.primary_state_threshold:
                self._start_view_change(eff, self.view + 1, now, reason="primary_migrated")
            else:
                for client in sorted(self.known_clients):
                    self.notified[client] = seq
                    self._send(eff, client,
                               NewMembership(self.physical, self.view, seq, pairs))
                    eff.trace("proto", f"notify client={client} n={seq}")
        if not rnd.pending_acks:
            self._finish_round(eff, now)
        return False

    # -- checkpoints -------------------------------------------------------------

    def _build_package(self, seq: int) -> CheckpointPackage:
        middleware = Middleware(
            completed_rounds=self.completed_rounds,
            last_migration_seq=self.last_migration_seq,
            last_migration_pairs=self.last_migration_pairs,
            membership=tuple(self.membership),
            roster=self.roster.snapshot(),
            last_executed=seq,
            clients=tuple(self.client_table[c] for c in sorted(self.client_table)),
            notified=tuple((c, self.notified[c]) for c in sorted(self.notified)),
        )
        return CheckpointPackage(seq=seq, app_state=self.app.snapshot(),
                                 app_pad=self.cfg.state_pad, middleware=middleware)

    def _make_checkpoint(self, eff: Effects, seq: int, now: int) -> None:
        package = self._build_package(seq)
        self.ckpts[seq] = package
        self._checkpoint_announce(eff, seq, digest_of(package), now)

    def _checkpoint_announce(self, eff: Effects, seq: int, digest: bytes, now: int) -> None:
        eff.trace("proto", f"ckpt n={seq} d={digest[:4].hex()}")
        self.ckpt_tally.setdefault(seq, {})[self.physical] = digest
        self._multicast(eff, Checkpoint(self.physical, seq, digest))
        self._check_stable(eff, seq, now)

    def _on_checkpoint_msg(self, eff: Effects, src: int, msg: Checkpoint, now: int) -> None:
        if msg.seq <= self.low_mark:
            return
        self.ckpt_tally.setdefault(msg.seq, {})[src] = msg.digest
        self._check_stable(eff, msg.seq, now)
        if self.pending_packages:
            self._try_install_package(eff, now)

    def _check_stable(self, eff: Effects, seq: int, now: int) -> None:
        if seq <= self.low_mark:
            return
        tally = self.ckpt_tally.get(seq)
        if tally is None:
            return
        mine = tally.get(self.physical)
        if mine is None:
            return
        matching = sum(1 for d in tally.values() if d == mine)
        if matching < self.cfg.quorum:
            return
        self.low_mark = seq
        self.stable_digest = mine
        eff.trace("proto", f"ckpt_stable n={seq}")
        for old in [s for s in self.slots if s <= seq]:
            del self.slots[old]
        for old in [s for s in self.ckpt_tally if s <= seq]:
            del self.ckpt_tally[old]
        for old in [s for s in self.ckpts if s < seq]:
            del self.ckpts[old]

    def _on_fetch_checkpoint(self, eff: Effects, src: int, msg: FetchCheckpoint, now: int) -> None:
        seq = msg.seq if msg.seq != 0 else self.low_mark
        package = self.ckpts.get(seq)
        if package is None or seq == 0:
            return
        if msg.seq == 0:
            # Catch-up: also re-announce the stable certificate for this seq.
            self._send(eff, src, Checkpoint(self.physical, seq, digest_of(package)))
        self._send(eff, src, CheckpointTransfer(self.physical, seq, package))
        eff.trace("proto", f"ckpt_resent n={seq} to={src}")

    def _on_checkpoint_transfer(self, eff: Effects, src: int, msg: CheckpointTransfer, now: int) -> None:
        if msg.package.seq <= self.last_executed:
            return
        self.pending_packages[msg.package.seq] = msg.package
        self._try_install_package(eff, now)

    def _try_install_package(self, eff: Effects, now: int) -> None:
        """Adopt a fetched checkpoint once f+1 peers vouch for its digest."""
        for seq in sorted(self.pending_packages, reverse=True):
            if seq <= self.last_executed:
                del self.pending_packages[seq]
                continue
            package = self.pending_packages[seq]
            digest = digest_of(package)
            tally = self.ckpt_tally.get(seq, {})
            votes = sum(1 for s, d in tally.items() if d == digest and s != self.physical)
            if votes < self.cfg.f + 1:
                continue
            self._install_package(eff, package, now)
            return

    def _install_package(self, eff: Effects, package: CheckpointPackage, now: int) -> None:
        mw = package.middleware
        self.app.restore(package.app_state)
        self.roster = StandbyRoster.restore(mw.roster)
        self.membership = list(mw.membership)
        self.completed_rounds = mw.completed_rounds
        self.next_round_l = mw.completed_rounds
        self.last_migration_seq = mw.last_migration_seq
        self.last_migration_pairs = mw.last_migration_pairs
        self.last_executed = mw.last_executed
        self.low_mark = mw.last_executed
        self.next_seq = max(self.next_seq, mw.last_executed + 1)
        self.stable_digest = digest_of(package)
        self.ckpts = {package.seq: package}
        self.client_table = {rec.client: rec for rec in mw.clients}
        self.known_clients = set(self.client_table)
        self.notified = dict(mw.notified)
        self.round = None
        self.round_vote_envs = {}
        self.pending_packages = {s: p for s, p in self.pending_packages.items()
                                 if s > package.seq}
        for seq in [s for s in self.slots if s <= package.seq]:
            del self.slots[seq]
        for seq in [s for s in self.ckpt_tally if s <= package.seq]:
            del self.ckpt_tally[seq]
        eff.trace("proto", f"ckpt_install n={package.seq}")
        if self.cfg.migration_enabled:
            eff.set_timer(("mig",), now + to_us(self.cfg.migration_period_s))
        self._execute_ready(eff, now)

    # -- standby registration ------------------------------------------------------

    def _join_sig_ok(self, jr: JoinRequest) -> bool:
        data = b"join:" + jr.sender.to_bytes(8, "big")
        return self.ctx.keychain.verify_counter_signature(jr.sender, jr.counter, data, jr.sig)

    def _on_join_request(self, eff: Effects, src: int, jr: JoinRequest, env: Envelope, now: int) -> None:
        if src in self.membership and src != jr.sender:
            pass  # relayed by a backup on the standby's behalf
        elif src != jr.sender:
            return
        if not self._join_sig_ok(jr):
            eff.trace("proto", f"join_reject node={jr.sender} reason=sig")
            return
        if jr.counter <= self.roster.counter_of(jr.sender):
            eff.trace("proto", f"join_reject node={jr.sender} reason=stale l={jr.counter}")
            return
        if self.is_primary:
            if not any(isinstance(s, JoinRequest) and s.sender == jr.sender and s.counter >= jr.counter
                       for s, _ in self.special_queue):
                self.special_queue.append((jr, ()))
                self._try_propose(eff, now)
        else:
            self._send(eff, self.primary_physical(), jr)
            self.pending_relays.add(("join", jr.sender, jr.counter))
            self._arm_vc(eff, now)

    def _on_leave_request(self, eff: Effects, src: int, lr: LeaveRequest, env: Envelope, now: int) -> None:
        if not self.ctx.keychain.verify_signature(
                lr.sender, b"leave:" + lr.node.to_bytes(8, "big"), lr.sig):
            return
        if self.is_primary:
            if not any(isinstance(s, LeaveRequest) and s.node == lr.node for s, _ in self.special_queue):
                self.special_queue.append((lr, ()))
                self._try_propose(eff, now)
        else:
            self._send(eff, self.primary_physical(), lr)
            self.pending_relays.add(("leave", lr.node))
            self._arm_vc(eff, now)

    # -- migration rounds -------------------------------------------------------

    def _on_migration_timer(self, eff: Effects, now: int) -> None:
        if not self.cfg.migration_enabled:
            return
        if self.round is not None:
            eff.set_timer(("mig",), now + to_us(self.cfg.migration_retry_s))
            return
        if self.on_demand_queue:
            self._start_round(eff, self.on_demand_queue[0], True, now)
        else:
            self._start_round(eff, select_sources(self.next_round_l, self.cfg.f), False, now)

    def _start_round(self, eff: Effects, sources: tuple[int, ...], on_demand: bool, now: int) -> None:
        l = self.next_round_l
        try:
            targets = self.roster.least_elapsed(self.cfg.f, now)
        except InsufficientStandbys:
            eff.trace("proto", f"round_postponed l={l} reason=standbys")
            eff.set_timer(("mig",), now + to_us(self.cfg.migration_retry_s))
            return
        self.round = MigrationRound(l, tuple(sorted(sources)), targets,
                                    on_demand=on_demand, started_us=now)
        self.round_vote_envs = {}
        vote = InitMigration(self.physical, self.view, l, self.round.sources, targets)
        # Sealed for the whole membership so the vote stays verifiable by
        # every replica when piggybacked as migration-request evidence.
        env = self.seal(vote, list(self.membership))
        for dst in self._others():
            eff.send(dst, env)
        self.round.add_vote(vote)
        self.round_vote_envs[self.physical] = env
        self.init_hw[(self.view, self.physical)] = l
        kind = "ondemand" if on_demand else "proactive"
        eff.trace("proto",
                  f"round_start l={l} kind={kind} srcs={_ids(self.round.sources)} tgts={_ids(targets)}")
        self._check_votes(eff, now)

    def _expected_sources(self) -> tuple[int, ...] | None:
        if self.on_demand_queue:
            return tuple(sorted(self.on_demand_queue[0]))
        return select_sources(self.next_round_l, self.cfg.f)

    def _on_init_migration(self, eff: Effects, src: int, msg: InitMigration, env: Envelope, now: int) -> None:
        if msg.view != self.view or src != msg.sender:
            return
        if len(msg.sources) != self.cfg.f or len(msg.targets) != self.cfg.f:
            eff.trace("proto", f"vote_reject src={src} reason=arity")
            return
        if self.init_hw.get((self.view, src), -1) >= msg.round:
            eff.trace("proto", f"vote_reject src={src} l={msg.round} reason=replay")
            return
        if msg.round != self.next_round_l:
            eff.trace("proto", f"vote_reject src={src} l={msg.round} reason=round")
            return
        rnd = self.round
        if rnd is None:
            expected = self._expected_sources()
            if expected is None or msg.sources != expected:
                eff.trace("proto", f"vote_reject src={src} l={msg.round} reason=sources")
                return
            try:
                targets = self.roster.least_elapsed(self.cfg.f, now)
            except InsufficientStandbys:
                eff.trace("proto", f"vote_reject src={src} l={msg.round} reason=standbys")
                return
            if msg.targets != targets:
                eff.trace("proto", f"vote_reject src={src} l={msg.round} reason=targets")
                return
            self._start_round(eff, msg.sources, bool(self.on_demand_queue), now)
            rnd = self.round
            if rnd is None:
                return
        elif not rnd.matches(msg):
            eff.trace("proto", f"vote_reject src={src} l={msg.round} reason=mismatch")
            return
        self.init_hw[(self.view, src)] = msg.round
        rnd.add_vote(msg)
        self.round_vote_envs[src] = env
        self._check_votes(eff, now)

    def _check_votes(self, eff: Effects, now: int) -> None:
        rnd = self.round
        if rnd is None or rnd.request_formed:
            return
        if rnd.vote_count() < self.cfg.quorum:
            return
        rnd.request_formed = True
        request = MigrationRequest(self.physical, self.view, rnd.round_l,
                                   rnd.sources, rnd.targets)
        eff.trace("proto", f"request_formed l={rnd.round_l}")
        self._arm_vc(eff, now)
        if self.is_primary:
            attachments = tuple(self.round_vote_envs[s] for s in sorted(rnd.votes))
            self.special_queue.appendleft((request, attachments))
            self._try_propose(eff, now)

    def _on_fetch_inits(self, eff: Effects, src: int, msg: FetchInitMigrations, now: int) -> None:
        for slot in self.slots.values():
            pp = slot.pp
            if pp is not None and isinstance(pp.special, MigrationRequest) \
                    and pp.special.round == msg.round and slot.pp_env is not None:
                eff.send(src, slot.pp_env)
                return

    def _on_recovery_ack(self, eff: Effects, src: int, msg: RecoveryAck, now: int) -> None:
        rnd = self.round
        if rnd is None or rnd.sync_seq != msg.seq:
            self.acks_buffer.setdefault(msg.seq, set()).add(msg.target)
            return
        if msg.target in rnd.pending_acks:
            rnd.pending_acks.discard(msg.target)
            if self.is_primary:
                eff.trace("metric", f"mig_ack l={rnd.round_l} n={msg.seq} target={msg.target}")
        if not rnd.pending_acks:
            self._finish_round(eff, now)

    def _finish_round(self, eff: Effects, now: int) -> None:
        rnd = self.round
        if rnd is None:
            return
        rnd.phase = RoundPhase.COMPLETE
        eff.trace("proto", f"round_done l={rnd.round_l}")
        if rnd.on_demand and self.on_demand_queue:
            self.on_demand_queue.popleft()
        self.round = None
        self.round_vote_envs = {}
        self._refresh_vc(eff, now)
        if self.cfg.migration_enabled:
            if self.on_demand_queue:
                self._start_round(eff, self.on_demand_queue[0], True, now)
            else:
                eff.set_timer(("mig",), now + to_us(self.cfg.migration_period_s))

    def _abort_and_restart(self, eff: Effects, departed: int, now: int) -> None:
        rnd = self.round
        if rnd is None:
            return
        eff.trace("proto", f"round_abort l={rnd.round_l} node={departed}")
        for sender in rnd.votes:
            key = (self.view, sender)
            if self.init_hw.get(key) == rnd.round_l:
                self.init_hw[key] = rnd.round_l - 1
        self.next_round_l = rnd.round_l
        sources = rnd.sources
        on_demand = rnd.on_demand
        self.round = None
        self.round_vote_envs = {}
        self._start_round(eff, sources, on_demand, now)

    def _trigger_on_demand(self, eff: Effects, sources: tuple[int, ...], now: int) -> None:
        sources = tuple(sorted(sources))
        if sources in self.on_demand_queue:
            return
        rnd = self.round
        if rnd is not None and rnd.on_demand and rnd.sources == sources:
            return
        self.on_demand_queue.append(sources)
        eff.trace("proto", f"ondemand srcs={_ids(sources)}")
        if self.round is None:
            self._start_round(eff, sources, True, now)

    # -- view changes ---------------------------------------------------------

    def _pending_work(self) -> bool:
        if self.request_queue or self.special_queue or self.pending_relays:
            return True
        if any(s.pp is not None and not s.executed for s in self.slots.values()):
            return True
        rnd = self.round
        if rnd is not None and rnd.request_formed and rnd.phase in (RoundPhase.INITIATED,
                                                                     RoundPhase.ORDERED):
            return True
        return False

    def _arm_vc(self, eff: Effects, now: int) -> None:
        if self.vc_timer_armed:
            return
        self.vc_timer_armed = True
        timeout = to_us(self.cfg.view_change_timeout_s) * (2 ** min(self.vc_backoff, 6))
        eff.set_timer(("vc",), now + timeout)

    def _refresh_vc(self, eff: Effects, now: int) -> None:
        if self._pending_work():
            self.vc_timer_armed = False
            self._arm_vc(eff, now)
        else:
            self.vc_timer_armed = False
            eff.cancel_timer(("vc",))

    def _start_view_change(self, eff: Effects, target_view: int, now: int, reason: str) -> None:
        if target_view <= self.view:
            return
        self.in_view_change = True
        self.vc_backoff += 1
        self.view = target_view
        eff.trace("proto", f"vc_start v={self.view} reason={reason}")
        prepared = tuple(
            PreparedProof(slot.pp.view, seq, slot.digest, slot.pp)
            for seq, slot in sorted(self.slots.items())
            if slot.prepared and slot.pp is not None and seq > self.low_mark
        )
        vc = ViewChange(self.physical, self.view, self.low_mark, self.stable_digest, prepared)
        env = self._multicast(eff, vc)
        self.vc_log.setdefault(self.view, {})[self.physical] = (vc, env)
        self._arm_vc(eff, now)
        self._try_new_view(eff, now)

    def _on_view_change_msg(self, eff: Effects, src: int, msg: ViewChange, env: Envelope, now: int) -> None:
        if msg.new_view <= self.view and not (msg.new_view == self.view and self.in_view_change):
            return
        self.vc_log.setdefault(msg.new_view, {})[src] = (msg, env)
        if not self.in_view_change or msg.new_view > self.view:
            ahead = {v for v, log in self.vc_log.items() if v > self.view and len(log) > self.cfg.f}
            if ahead:
                self._start_view_change(eff, min(ahead), now, reason="join")
                return
        self._try_new_view(eff, now)

    def _try_new_view(self, eff: Effects, now: int) -> None:
        if not self.in_view_change:
            return
        log = self.vc_log.get(self.view, {})
        if len(log) < self.cfg.quorum:
            return
        if self.primary_physical(self.view) != self.physical:
            return
        senders = sorted(log)[: self.cfg.quorum]
        vcs = [log[s][0] for s in senders]
        envs = tuple(log[s][1] for s in senders)
        pre_prepares = self._assemble_new_view_pps(vcs)
        nv = NewView(self.physical, self.view, envs, pre_prepares)
        self._multicast(eff, nv)
        self._install_new_view(eff, nv, now)

    def _assemble_new_view_pps(self, vcs: list[ViewChange]) -> tuple[PrePrepare, ...]:
        max_stable = max(vc.stable_seq for vc in vcs)
        best: dict[int, PreparedProof] = {}
        for vc in vcs:
            for proof in vc.prepared:
                if proof.seq <= max_stable:
                    continue
                cur = best.get(proof.seq)
                if cur is None or proof.view > cur.view:
                    best[proof.seq] = proof
        top = max(best) if best else max_stable
        out = []
        for seq in range(max_stable + 1, top + 1):
            proof = best.get(seq)
            if proof is None:
                pp = PrePrepare(self.physical, self.view, seq, (), None, 0, ())
            else:
                old = proof.pre_prepare
                pp = PrePrepare(self.physical, self.view, seq, old.requests,
                                old.special, old.join_time, old.attachments)
            out.append(pp)
        return tuple(out)

    def _on_new_view(self, eff: Effects, src: int, msg: NewView, now: int) -> None:
        if msg.new_view < self.view or src == self.physical:
            return
        if msg.new_view == self.view and not self.in_view_change:
            return
        if self.membership[self.primary_logical(msg.new_view)] != src:
            return
        vcs = []
        senders = set()
        for env in msg.view_changes:
            vc = env.payload
            if not isinstance(vc, ViewChange) or vc.new_view != msg.new_view:
                return
            if not self._verify(vc.sender, env):
                return
            senders.add(vc.sender)
            vcs.append(vc)
        if len(senders) < self.cfg.quorum:
            return
        expected = self._assemble_new_view_pps(vcs)
        got = tuple(
            (pp.seq, proposal_digest(pp)) for pp in msg.pre_prepares
        )
        want = tuple((pp.seq, proposal_digest(pp)) for pp in expected)
        if got != want:
            eff.trace("proto", f"new_view_reject v={msg.new_view}")
            return
        self.view = msg.new_view
        self._install_new_view(eff, msg, now)

    def _install_new_view(self, eff: Effects, nv: NewView, now: int) -> None:
        self.in_view_change = False
        self.vc_backoff = 0
        self._self_migration_pending = False
        eff.trace("proto", f"new_view v={self.view} pps={len(nv.pre_prepares)}")
        is_primary = self.is_primary
        max_seq = self.low_mark
        reproposed = {pp.seq for pp in nv.pre_prepares}
        for seq in [s for s, sl in self.slots.items()
                    if s > self.low_mark and s not in reproposed and not sl.executed]:
            del self.slots[seq]
        for pp in nv.pre_prepares:
            max_seq = max(max_seq, pp.seq)
            if pp.seq <= self.low_mark:
                continue
            slot = self._slot(pp.seq)
            if slot.executed:
                continue
            slot.pp = pp
            slot.pp_env = self.seal(pp, self._others()) if is_primary else None
            slot.digest = proposal_digest(pp)
            slot.prepares = {}
            slot.commits = {}
            slot.prepared = False
            slot.committed = False
            if isinstance(pp.special, MigrationRequest):
                self._align_round_to_request(eff, pp.special, pp.seq, now)
                if is_primary and self.logical in pp.special.sources:
                    self._self_migration_pending = True
            if not is_primary:
                prepare = Prepare(self.physical, self.view, pp.seq, slot.digest)
                self._multicast(eff, prepare)
                slot.prepares[self.physical] = slot.digest
            self._check_prepared(eff, pp.seq, now)
        if is_primary:
            self.next_seq = max(max_seq, self.last_executed, self.next_seq - 1) + 1
            rnd = self.round
            if rnd is not None and rnd.request_formed \
                    and rnd.phase in (RoundPhase.INITIATED, RoundPhase.ORDERED) \
                    and not any(isinstance(pp.special, MigrationRequest)
                                and pp.special.round == rnd.round_l
                                for pp in nv.pre_prepares) \
                    and not any(isinstance(s, MigrationRequest) for s, _ in self.special_queue):
                if len(rnd.votes) >= self.cfg.quorum:
                    request = MigrationRequest(self.physical, self.view, rnd.round_l,
                                               rnd.sources, rnd.targets)
                    attachments = tuple(self.round_vote_envs[s]
                                        for s in sorted(rnd.votes)
                                        if s in self.round_vote_envs)
                    if len(attachments) >= self.cfg.quorum:
                        self.special_queue.appendleft((request, attachments))
            self._try_propose(eff, now)
        self._refresh_vc(eff, now)
        self._arm_rtx(eff, now)

    # -- retransmission ----------------------------------------------------------

    def _arm_rtx(self, eff: Effects, now: int) -> None:
        if not self.rtx_armed:
            self.rtx_armed = True
            eff.set_timer(("rtx",), now + to_us(self.cfg.retransmit_interval_s))

    def _retransmit(self, eff: Effects, now: int) -> None:
        self.rtx_armed = False
        if self.in_view_change:
            vc_entry = self.vc_log.get(self.view, {}).get(self.physical)
            if vc_entry is not None:
                others = self._others()
                for dst in others:
                    eff.send(dst, vc_entry[1])
            self._arm_rtx(eff, now)
            return
        outstanding = [s for s, slot in sorted(self.slots.items())
                       if slot.pp is not None and not slot.executed]
        if not outstanding:
            return
        budget = 8
        primary = self.is_primary
        for seq in outstanding:
            if budget <= 0:
                break
            slot = self.slots[seq]
            if primary and slot.pp_env is not None:
                for dst in self._others():
                    eff.send(dst, slot.pp_env)
                budget -= 1
            elif not primary and slot.digest is not None:
                self._multicast(eff, Prepare(self.physical, self.view, seq, slot.digest))
                budget -= 1
            if slot.prepared:
                self._multicast(eff, Commit(self.physical, self.view, seq, slot.digest))
        self._arm_rtx(eff, now)

    # -- promotion support ---------------------------------------------------------

    @classmethod
    def from_package(cls, ctx: NodeContext, package: CheckpointPackage, view: int,
                     now: int) -> "Replica":
        """Build a replica from an installed checkpoint (standby promotion)."""
        mw = package.middleware
        replica = cls(ctx, mw.membership, view=view)
        replica.app.restore(package.app_state)
        replica.roster = StandbyRoster.restore(mw.roster)
        replica.completed_rounds = mw.completed_rounds
        replica.next_round_l = mw.completed_rounds
        replica.last_migration_seq = mw.last_migration_seq
        replica.last_migration_pairs = mw.last_migration_pairs
        replica.last_migration_view = view
        replica.last_executed = mw.last_executed
        replica.low_mark = mw.last_executed
        replica.next_seq = mw.last_executed + 1
        replica.ckpts = {package.seq: package}
        replica.stable_digest = digest_of(package)
        replica.client_table = {rec.client: rec for rec in mw.clients}
        replica.known_clients = set(replica.client_table)
        replica.notified = dict(mw.notified)
        return replica
