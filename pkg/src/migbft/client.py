"""Client state machine: request loop, reply quorum, and membership filtering.

A client only counts replies from physical nodes in its current membership
view, and only moves to a new view after f+1 replicas endorse the same
migration outcome.  Messages from replicas that were migrated out are dropped
once the new membership is installed.
"""

from __future__ import annotations

from .messages import Envelope, NewMembership, Reply, Request, digest_of, encode
from .replica import NodeContext
from .simnet import Effects, to_us


class ClientProgram:
    def __init__(self, ctx: NodeContext, membership: tuple[int, ...],
                 payload_bytes: int = 1024, think_time_s: float = 0.0,
                 retry_timeout_s: float = 2.0, auto: bool = True) -> None:
        self.ctx = ctx
        self.physical = ctx.physical
        self.f = ctx.config.f
        self.membership: list[int] = list(membership)
        self.view = 0
        self.installed_seq = 0
        self.payload_bytes = max(payload_bytes, 16)
        self.think_us = to_us(think_time_s)
        self.retry_us = to_us(retry_timeout_s)
        self.auto = auto
        self.reqid = 0
        self.sent_at = 0
        self.waiting = False
        self.reply_tally: dict[bytes, set[int]] = {}
        self.notif_tally: dict[tuple[int, int, tuple], set[int]] = {}
        self.completed = 0
        self.completions: list[tuple[int, int, int]] = []  # (reqid, done_us, latency_us)

    def seal(self, msg, receivers) -> Envelope:
        return Envelope(payload=msg, auth=self.ctx.keys.authenticate(encode(msg), receivers))

    def _primary(self) -> int:
        return self.membership[self.view % len(self.membership)]

    def _payload(self) -> bytes:
        head = self.reqid.to_bytes(8, "big")
        return head + b"\x00" * (self.payload_bytes - len(head))

    # -- driving ----------------------------------------------------------------

    def begin(self, now: int) -> Effects:
        eff = Effects()
        eff.set_timer(("key",), self.ctx.keys.last_refresh_us + self.ctx.keys.refresh_period_us)
        if self.auto:
            self._next_request(eff, now)
        return eff

    def _next_request(self, eff: Effects, now: int) -> None:
        self.reqid += 1
        self.sent_at = now
        self.waiting = True
        self.reply_tally = {}
        req = Request(self.physical, self.physical, self.reqid, self._payload())
        primary = self._primary()
        eff.send(primary, self.seal(req, [primary]))
        eff.set_timer(("retry",), now + self.retry_us)

    def _retry(self, eff: Effects, now: int) -> None:
        if not self.waiting:
            return
        req = Request(self.physical, self.physical, self.reqid, self._payload())
        env = self.seal(req, list(self.membership))
        for dst in self.membership:
            eff.send(dst, env)
        eff.set_timer(("retry",), now + self.retry_us)

    def handle_timer(self, key: tuple, now: int) -> Effects:
        eff = Effects()
        kind = key[0]
        if kind == "key":
            while self.ctx.keys.due(now):
                self.ctx.keys.refresh(now)
            eff.set_timer(("key",), self.ctx.keys.last_refresh_us + self.ctx.keys.refresh_period_us)
        elif kind == "retry":
            self._retry(eff, now)
        elif kind == "think":
            self._next_request(eff, now)
        return eff

    def handle_control(self, payload: tuple, now: int) -> Effects:
        eff = Effects()
        kind = payload[0]
        if kind == "bootstrap":
            return self.begin(now)
        if kind == "resume":
            eff.set_timer(("key",), self.ctx.keys.last_refresh_us + self.ctx.keys.refresh_period_us)
            if self.waiting:
                self._retry(eff, now)
            elif self.auto:
                self._next_request(eff, now)
        elif kind == "start":
            if self.auto and not self.waiting and self.reqid == 0:
                self._next_request(eff, now)
        return eff

    # -- replies and membership ----------------------------------------------------

    def handle_deliver(self, src: int, env: Envelope, now: int) -> Effects:
        eff = Effects()
        msg = env.payload
        if env.auth is None or not self.ctx.keys.verify(encode(msg), env.auth, src):
            eff.trace("net", f"reject src={src} kind={type(msg).__name__} reason=mac")
            return eff
        if src not in self.membership:
            eff.trace("proto", f"filtered src={src} kind={type(msg).__name__}")
            return eff
        if isinstance(msg, Reply):
            self._on_reply(eff, src, msg, now)
        elif isinstance(msg, NewMembership):
            self._on_new_membership(eff, src, msg, now)
        return eff

    def _on_reply(self, eff: Effects, src: int, msg: Reply, now: int) -> None:
        if not self.waiting or msg.reqid != self.reqid:
            return
        self.view = max(self.view, msg.view)
        voters = self.reply_tally.setdefault(digest_of(msg.payload), set())
        voters.add(src)
        if len(voters) >= self.f + 1:
            self.waiting = False
            self.completed += 1
            latency = now - self.sent_at
            self.completions.append((self.reqid, now, latency))
            eff.trace("metric", f"complete reqid={self.reqid} lat={latency}")
            eff.cancel_timer(("retry",))
            if self.auto:
                if self.think_us == 0:
                    self._next_request(eff, now)
                else:
                    eff.set_timer(("think",), now + self.think_us)

    def _on_new_membership(self, eff: Effects, src: int, msg: NewMembership, now: int) -> None:
        key = (msg.view, msg.seq, msg.pairs)
        voters = self.notif_tally.setdefault(key, set())
        voters.add(src)
        if len(voters) >= self.f + 1 and msg.seq > self.installed_seq:
            for s, d in msg.pairs:
                self.membership[s] = d
            self.installed_seq = msg.seq
            self.view = max(self.view, msg.view)
            self.notif_tally = {k: v for k, v in self.notif_tally.items() if k[1] > msg.seq}
            eff.trace("proto", f"membership_install n={msg.seq} members={','.join(map(str, self.membership))}")
            if self.waiting:
                self._retry(eff, now)
