"""Wire message definitions, node identity, digests, and the canonical codec.

Every message that crosses the simulated network is a frozen dataclass
registered here.  The codec produces a deterministic, self-delimiting byte
form (length-prefixed fields in declaration order) so that MACs and digests
are computed over stable input.  Field layout is documented in docs/wire.md.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields
from enum import Enum

DIGEST_LEN = 32

_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")


class Role(Enum):
    ACTIVE = "active"
    STANDBY = "standby"
    CLIENT = "client"
    MANAGER = "manager"


@dataclass(frozen=True)
class NodeId:
    """Physical node identity. Logical replica ids live in the membership map."""

    id: int
    role: Role

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError("node id must be non-negative")


class CodecError(Exception):
    """Raised when a byte sequence does not decode to a registered message."""


# ---------------------------------------------------------------------------
# Message types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Request:
    sender: int
    client: int
    reqid: int
    payload: bytes


@dataclass(frozen=True)
class Reply:
    sender: int
    view: int
    reqid: int
    logical: int
    payload: bytes


@dataclass(frozen=True)
class PrePrepare:
    """Ordering proposal for one sequence number.

    Carries either a batch of client requests or exactly one special message
    (join/leave/migration).  ``join_time`` is the primary-assigned timestamp
    for an embedded join; ``attachments`` are the supporting vote envelopes
    piggybacked with a migration request.
    """

    sender: int
    view: int
    seq: int
    requests: tuple[Request, ...]
    special: object | None
    join_time: int
    attachments: tuple["Envelope", ...]

    def __post_init__(self) -> None:
        if self.requests and self.special is not None:
            raise ValueError("a proposal is either a batch or one special message")


@dataclass(frozen=True)
class Prepare:
    sender: int
    view: int
    seq: int
    digest: bytes


@dataclass(frozen=True)
class Commit:
    sender: int
    view: int
    seq: int
    digest: bytes


@dataclass(frozen=True)
class Checkpoint:
    sender: int
    seq: int
    digest: bytes


@dataclass(frozen=True)
class PreparedProof:
    """Evidence that a proposal prepared: its pre-prepare plus certificate facts."""

    view: int
    seq: int
    digest: bytes
    pre_prepare: PrePrepare


@dataclass(frozen=True)
class ViewChange:
    sender: int
    new_view: int
    stable_seq: int
    stable_digest: bytes
    prepared: tuple[PreparedProof, ...]


@dataclass(frozen=True)
class NewView:
    sender: int
    new_view: int
    view_changes: tuple["Envelope", ...]
    pre_prepares: tuple[PrePrepare, ...]


@dataclass(frozen=True)
class JoinRequest:
    """Standby registration, signed by the node's secure coprocessor."""

    sender: int
    counter: int
    sig: bytes


@dataclass(frozen=True)
class JoinApproved:
    sender: int
    counter: int
    seq: int


@dataclass(frozen=True)
class LeaveRequest:
    """Deregistration of a node, signed by the configuration manager."""

    sender: int
    node: int
    sig: bytes


@dataclass(frozen=True)
class InitMigration:
    """One replica's vote to start a migration round.

    ``sources`` are logical replica ids (stored sorted); ``targets`` are
    physical standby ids in selection order (freshest-sanitized first).
    """

    sender: int
    view: int
    round: int
    sources: tuple[int, ...]
    targets: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sources", tuple(sorted(self.sources)))
        _check_selection(self.sources, self.targets)


@dataclass(frozen=True)
class MigrationRequest:
    sender: int
    view: int
    round: int
    sources: tuple[int, ...]
    targets: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sources", tuple(sorted(self.sources)))
        _check_selection(self.sources, self.targets)


@dataclass(frozen=True)
class MigrateNow:
    """Checkpoint digest plus source/target pairing, multicast to the targets."""

    sender: int
    view: int
    seq: int
    ckpt_digest: bytes
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError("pairing must not be empty")
        srcs = [s for s, _ in self.pairs]
        if len(set(srcs)) != len(srcs):
            raise ValueError("duplicate source in pairing")


@dataclass(frozen=True)
class RosterEntry:
    node: int
    counter: int
    join_time: int


@dataclass(frozen=True)
class ClientRecord:
    client: int
    reqid: int
    reply: bytes


@dataclass(frozen=True)
class Middleware:
    """Replication-layer state carried inside a checkpoint.

    ``membership`` maps logical id (position) to physical id.  ``notified``
    records, per client, the migration sequence number that client was last
    told about.
    """

    completed_rounds: int
    last_migration_seq: int
    last_migration_pairs: tuple[tuple[int, int], ...]
    membership: tuple[int, ...]
    roster: tuple[RosterEntry, ...]
    last_executed: int
    clients: tuple[ClientRecord, ...]
    notified: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class CheckpointPackage:
    """Application plus middleware snapshot at one sequence number.

    ``app_pad`` is the modeled size in bytes of application state that is not
    materialized; the network charges for it when the package is transferred.
    """

    seq: int
    app_state: bytes
    app_pad: int
    middleware: Middleware


@dataclass(frozen=True)
class CheckpointTransfer:
    sender: int
    seq: int
    package: CheckpointPackage


@dataclass(frozen=True)
class NewMembership:
    sender: int
    view: int
    seq: int
    pairs: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class RecoveryAck:
    """Promotion notice from a target node; also the latency-measurement probe."""

    sender: int
    seq: int
    target: int


@dataclass(frozen=True)
class DemotionReport:
    """Tells the manager which physical nodes round ``round`` replaced."""

    sender: int
    round: int
    pairs: tuple[tuple[int, int], ...]
    nodes: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes)))


@dataclass(frozen=True)
class FetchInitMigrations:
    sender: int
    view: int
    round: int


@dataclass(frozen=True)
class FetchCheckpoint:
    sender: int
    seq: int


@dataclass(frozen=True)
class ActiveSetUpdate:
    """Manager-to-standby refresh of the current active membership."""

    sender: int
    members: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(sorted(self.members)))


@dataclass(frozen=True)
class Authenticator:
    """Vector of per-receiver MAC tags under one key epoch."""

    epoch: int
    tags: tuple[tuple[int, bytes], ...]

    def tag_for(self, receiver: int) -> bytes | None:
        for node, tag in self.tags:
            if node == receiver:
                return tag
        return None


@dataclass(frozen=True)
class Envelope:
    """A message plus the authenticator it was sent under."""

    payload: object
    auth: Authenticator | None


def _check_selection(sources: tuple[int, ...], targets: tuple[int, ...]) -> None:
    if len(sources) != len(targets):
        raise ValueError("source and target sets must have equal size")
    if not sources:
        raise ValueError("selection must not be empty")
    if len(set(sources)) != len(sources) or len(set(targets)) != len(targets):
        raise ValueError("selection contains duplicates")


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------
# Field kinds:
#   u      unsigned 64-bit integer
#   b      length-prefixed bytes
#   us     tuple of u64 (order preserved)
#   pairs  tuple of (u64, u64)
#   msg    nested registered message
#   msg?   optional nested message
#   msgs   tuple of nested messages
#   tags   tuple of (u64, bytes)

_SCHEMA: dict[type, tuple[tuple[str, str], ...]] = {
    Request: (("sender", "u"), ("client", "u"), ("reqid", "u"), ("payload", "b")),
    Reply: (("sender", "u"), ("view", "u"), ("reqid", "u"), ("logical", "u"), ("payload", "b")),
    PrePrepare: (
        ("sender", "u"), ("view", "u"), ("seq", "u"),
        ("requests", "msgs"), ("special", "msg?"), ("join_time", "u"), ("attachments", "msgs"),
    ),
    Prepare: (("sender", "u"), ("view", "u"), ("seq", "u"), ("digest", "b")),
    Commit: (("sender", "u"), ("view", "u"), ("seq", "u"), ("digest", "b")),
    Checkpoint: (("sender", "u"), ("seq", "u"), ("digest", "b")),
    PreparedProof: (("view", "u"), ("seq", "u"), ("digest", "b"), ("pre_prepare", "msg")),
    ViewChange: (
        ("sender", "u"), ("new_view", "u"), ("stable_seq", "u"),
        ("stable_digest", "b"), ("prepared", "msgs"),
    ),
    NewView: (("sender", "u"), ("new_view", "u"), ("view_changes", "msgs"), ("pre_prepares", "msgs")),
    JoinRequest: (("sender", "u"), ("counter", "u"), ("sig", "b")),
    JoinApproved: (("sender", "u"), ("counter", "u"), ("seq", "u")),
    LeaveRequest: (("sender", "u"), ("node", "u"), ("sig", "b")),
    InitMigration: (("sender", "u"), ("view", "u"), ("round", "u"), ("sources", "us"), ("targets", "us")),
    MigrationRequest: (("sender", "u"), ("view", "u"), ("round", "u"), ("sources", "us"), ("targets", "us")),
    MigrateNow: (("sender", "u"), ("view", "u"), ("seq", "u"), ("ckpt_digest", "b"), ("pairs", "pairs")),
    RosterEntry: (("node", "u"), ("counter", "u"), ("join_time", "u")),
    ClientRecord: (("client", "u"), ("reqid", "u"), ("reply", "b")),
    Middleware: (
        ("completed_rounds", "u"), ("last_migration_seq", "u"), ("last_migration_pairs", "pairs"),
        ("membership", "us"), ("roster", "msgs"), ("last_executed", "u"),
        ("clients", "msgs"), ("notified", "pairs"),
    ),
    CheckpointPackage: (("seq", "u"), ("app_state", "b"), ("app_pad", "u"), ("middleware", "msg")),
    CheckpointTransfer: (("sender", "u"), ("seq", "u"), ("package", "msg")),
    NewMembership: (("sender", "u"), ("view", "u"), ("seq", "u"), ("pairs", "pairs")),
    RecoveryAck: (("sender", "u"), ("seq", "u"), ("target", "u")),
    DemotionReport: (("sender", "u"), ("round", "u"), ("pairs", "pairs"), ("nodes", "us")),
    FetchInitMigrations: (("sender", "u"), ("view", "u"), ("round", "u")),
    FetchCheckpoint: (("sender", "u"), ("seq", "u")),
    ActiveSetUpdate: (("sender", "u"), ("members", "us")),
    Authenticator: (("epoch", "u"), ("tags", "tags")),
    Envelope: (("payload", "msg"), ("auth", "msg?")),
}

_TAGS: dict[type, int] = {cls: i + 1 for i, cls in enumerate(_SCHEMA)}
_BY_TAG: dict[int, type] = {tag: cls for cls, tag in _TAGS.items()}

for _cls, _schema in _SCHEMA.items():
    _names = tuple(f.name for f in fields(_cls))
    if _names != tuple(name for name, _ in _schema):
        raise AssertionError(f"schema/field mismatch for {_cls.__name__}")


def _enc_u(out: bytearray, value: int) -> None:
    out += _U64.pack(value)


def _enc_b(out: bytearray, value: bytes) -> None:
    out += _U32.pack(len(value))
    out += value


def encode(msg: object) -> bytes:
    out = bytearray()
    _encode_into(out, msg)
    return bytes(out)


def _encode_into(out: bytearray, msg: object) -> None:
    cls = type(msg)
    try:
        tag = _TAGS[cls]
    except KeyError:
        raise CodecError(f"unregistered message type {cls.__name__}") from None
    out.append(tag)
    for name, kind in _SCHEMA[cls]:
        value = getattr(msg, name)
        if kind == "u":
            _enc_u(out, value)
        elif kind == "b":
            _enc_b(out, value)
        elif kind == "us":
            _enc_u(out, len(value))
            for item in value:
                _enc_u(out, item)
        elif kind == "pairs":
            _enc_u(out, len(value))
            for a, b in value:
                _enc_u(out, a)
                _enc_u(out, b)
        elif kind == "msg":
            _encode_into(out, value)
        elif kind == "msg?":
            if value is None:
                out.append(0)
            else:
                out.append(1)
                _encode_into(out, value)
        elif kind == "msgs":
            _enc_u(out, len(value))
            for item in value:
                _encode_into(out, item)
        elif kind == "tags":
            _enc_u(out, len(value))
            for node, mac in value:
                _enc_u(out, node)
                _enc_b(out, mac)
        else:  # pragma: no cover
            raise AssertionError(f"unknown kind {kind}")


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CodecError("truncated message")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(_U32.unpack(self.take(4))[0])


def decode(data: bytes) -> object:
    reader = _Reader(data)
    msg = _decode_from(reader)
    if reader.pos != len(data):
        raise CodecError("trailing bytes after message")
    return msg


def _decode_from(reader: _Reader) -> object:
    tag = reader.take(1)[0]
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise CodecError(f"unknown message tag {tag}")
    values = []
    for _name, kind in _SCHEMA[cls]:
        if kind == "u":
            values.append(reader.u64())
        elif kind == "b":
            values.append(reader.blob())
        elif kind == "us":
            count = reader.u64()
            values.append(tuple(reader.u64() for _ in range(count)))
        elif kind == "pairs":
            count = reader.u64()
            values.append(tuple((reader.u64(), reader.u64()) for _ in range(count)))
        elif kind == "msg":
            values.append(_decode_from(reader))
        elif kind == "msg?":
            values.append(_decode_from(reader) if reader.take(1)[0] else None)
        elif kind == "msgs":
            count = reader.u64()
            values.append(tuple(_decode_from(reader) for _ in range(count)))
        elif kind == "tags":
            count = reader.u64()
            values.append(tuple((reader.u64(), reader.blob()) for _ in range(count)))
        else:  # pragma: no cover
            raise AssertionError(f"unknown kind {kind}")
    try:
        return cls(*values)
    except (TypeError, ValueError) as exc:
        raise CodecError(f"invalid {cls.__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# Digests
# ---------------------------------------------------------------------------

_DOMAIN = b"migbft.digest:"


def digest_of(value: object) -> bytes:
    """Collision-resistant 32-byte digest of raw bytes or a registered message."""
    if isinstance(value, (bytes, bytearray, memoryview)):
        material = b"raw:" + bytes(value)
    else:
        material = b"msg:" + encode(value)
    return hashlib.sha256(_DOMAIN + material).digest()


def batch_digest(requests: tuple[Request, ...], special: object | None, join_time: int) -> bytes:
    """Digest of a proposal's content, independent of view and sequence number."""
    out = bytearray()
    _enc_u(out, len(requests))
    for req in requests:
        _encode_into(out, req)
    if special is None:
        out.append(0)
    else:
        out.append(1)
        _encode_into(out, special)
    _enc_u(out, join_time)
    return digest_of(bytes(out))


def proposal_digest(pp: PrePrepare) -> bytes:
    return batch_digest(pp.requests, pp.special, pp.join_time)


def wire_size(msg: object) -> int:
    """Bytes the network charges for a message, including modeled padding."""
    size = len(encode(msg))
    size += _padding_of(msg)
    return size


def _padding_of(msg: object) -> int:
    if isinstance(msg, Envelope):
        return _padding_of(msg.payload)
    if isinstance(msg, CheckpointTransfer):
        return msg.package.app_pad
    return 0
