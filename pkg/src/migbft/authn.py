"""Message authentication: MAC vectors, signatures, and the per-node coprocessor.

Cryptography is simulated with keyed hashing over canonical encodings.  A
single in-process ``Keychain`` stands in for the key-distribution
infrastructure: private keys are only reachable through a node's
``SecureCoprocessor``, and pairwise MAC keys are derived per epoch, so the
trust boundaries of the real scheme are preserved behaviorally.
"""

from __future__ import annotations

import hashlib
import hmac

from .messages import Authenticator

MAC_LEN = 16
SIG_LEN = 32


class AuthError(Exception):
    """Configuration-level authentication failure (unknown node, missing key)."""


def _kdf(secret: bytes, *parts: object) -> bytes:
    material = b"|".join(str(p).encode() for p in parts)
    return hmac.new(secret, material, hashlib.sha256).digest()


class Keychain:
    """Holds all key material for a simulated deployment.

    Protocol code never touches this directly for signing; it goes through a
    node's coprocessor or session-key table, which is the enforcement point
    the adversary model relies on.
    """

    def __init__(self, master: bytes = b"migbft-master") -> None:
        self._master = master
        self._nodes: set[int] = set()

    def register(self, node: int) -> None:
        self._nodes.add(node)

    def knows(self, node: int) -> bool:
        return node in self._nodes

    def _private_key(self, node: int) -> bytes:
        if node not in self._nodes:
            raise AuthError(f"node {node} has no registered key pair")
        return _kdf(self._master, "priv", node)

    def pair_key(self, epoch: int, a: int, b: int) -> bytes:
        if a not in self._nodes or b not in self._nodes:
            raise AuthError(f"no session key between {a} and {b}")
        lo, hi = (a, b) if a <= b else (b, a)
        return _kdf(self._master, "pair", epoch, lo, hi)

    def verify_signature(self, node: int, data: bytes, sig: bytes) -> bool:
        try:
            key = self._private_key(node)
        except AuthError:
            return False
        return hmac.compare_digest(hmac.new(key, data, hashlib.sha256).digest(), sig)

    def verify_counter_signature(self, node: int, counter: int, data: bytes, sig: bytes) -> bool:
        return self.verify_signature(node, counter.to_bytes(8, "big") + data, sig)


class SecureCoprocessor:
    """Tamper-proof signing component with a monotonic counter.

    The counter and key survive crashes of the host node; only this object
    can produce signatures for the node, and it never exposes the key.
    """

    def __init__(self, node: int, keychain: Keychain) -> None:
        self.node = node
        self._keychain = keychain
        self._counter = 0

    @property
    def counter(self) -> int:
        return self._counter

    def sign(self, data: bytes) -> bytes:
        key = self._keychain._private_key(self.node)
        return hmac.new(key, data, hashlib.sha256).digest()

    def counter_sign(self, data: bytes) -> tuple[int, bytes]:
        """Advance the monotonic counter and sign (counter, data) together."""
        self._counter += 1
        sig = self.sign(self._counter.to_bytes(8, "big") + data)
        return self._counter, sig


class SessionKeys:
    """Per-node table of epoch-scoped pairwise MAC keys.

    The epoch advances every ``refresh_period_us``; verification accepts the
    current and the immediately preceding epoch, so a message is never
    invalidated by a refresh that races its delivery.
    """

    def __init__(self, node: int, keychain: Keychain, refresh_period_us: int) -> None:
        self.node = node
        self.keychain = keychain
        self.refresh_period_us = refresh_period_us
        self.epoch = 0
        self.last_refresh_us = 0

    def due(self, now_us: int) -> bool:
        return now_us - self.last_refresh_us >= self.refresh_period_us

    def refresh(self, now_us: int) -> int:
        if not self.due(now_us):
            raise ValueError("refresh before the key period elapsed")
        self.epoch += 1
        self.last_refresh_us += self.refresh_period_us
        return self.epoch

    def _tag(self, epoch: int, peer: int, data: bytes) -> bytes:
        key = self.keychain.pair_key(epoch, self.node, peer)
        return hmac.new(key, data, hashlib.sha256).digest()[:MAC_LEN]

    def authenticate(self, data: bytes, receivers: list[int] | tuple[int, ...]) -> Authenticator:
        """MAC vector with one tag per receiver under the current epoch."""
        tags = tuple((r, self._tag(self.epoch, r, data)) for r in sorted(receivers))
        return Authenticator(epoch=self.epoch, tags=tags)

    def verify(self, data: bytes, auth: Authenticator, sender: int) -> bool:
        if auth.epoch > self.epoch or self.epoch - auth.epoch > 1:
            return False
        tag = auth.tag_for(self.node)
        if tag is None:
            return False
        try:
            expected = self._tag(auth.epoch, sender, data)
        except AuthError:
            return False
        return hmac.compare_digest(expected, tag)
