"""Event blocks and their canonical identifiers.

An event block is the basic unit of the protocol: a container of batched
transactions created by one node, carrying one self-reference and up to
k-1 references to other creators' top events.  Its identifier is the
SHA-256 digest of a canonical encoding, so identical content yields the
same id on every node.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

NodeId = int
EventId = bytes  # 32-byte SHA-256 digest

# Sentinel used in serialized form for "no self-ref" (leaf events).
_NO_REF = b"\x00" * 32


def payload_digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


def canonical_encoding(
    creator: NodeId,
    self_ref: EventId | None,
    other_refs: tuple[EventId, ...],
    lamport_ts: int,
    payload: bytes,
    creation_seq: int,
) -> bytes:
    """Fixed-field-order encoding hashed to produce the event id.

    Field order: creator, self_ref, sorted other refs, lamport, payload
    digest, creation sequence.  Sorting the peer refs makes the id
    independent of the order peers were contacted in.
    """
    parts = [
        b"evt1",
        creator.to_bytes(4, "big"),
        self_ref if self_ref is not None else _NO_REF,
        len(other_refs).to_bytes(2, "big"),
    ]
    parts.extend(sorted(other_refs))
    parts.append(lamport_ts.to_bytes(8, "big"))
    parts.append(payload_digest(payload))
    parts.append(creation_seq.to_bytes(8, "big"))
    return b"".join(parts)


def compute_event_id(
    creator: NodeId,
    self_ref: EventId | None,
    other_refs: tuple[EventId, ...],
    lamport_ts: int,
    payload: bytes,
    creation_seq: int,
) -> EventId:
    return hashlib.sha256(
        canonical_encoding(
            creator, self_ref, other_refs, lamport_ts, payload, creation_seq
        )
    ).digest()


@dataclass(frozen=True)
class EventBlock:
    """Immutable event block.

    ``self_ref`` is None exactly for a creator's first block (the leaf),
    which also has ``creation_seq == 0`` and ``lamport_ts == 0``.
    """

    id: EventId
    creator: NodeId
    self_ref: EventId | None
    other_refs: tuple[EventId, ...]
    lamport_ts: int
    payload: bytes
    creation_seq: int

    @property
    def is_leaf(self) -> bool:
        return self.self_ref is None

    @property
    def refs(self) -> tuple[EventId, ...]:
        """All referenced event ids (self-ref first when present)."""
        if self.self_ref is None:
            return self.other_refs
        return (self.self_ref,) + self.other_refs

    def sort_key(self) -> tuple[int, EventId]:
        """Canonical (lamport, id) tie-break key."""
        return (self.lamport_ts, self.id)

    def short(self) -> str:
        return f"{self.creator}:{self.creation_seq}"


def new_event(
    creator: NodeId,
    self_ref: EventId | None,
    other_refs: tuple[EventId, ...],
    lamport_ts: int,
    payload: bytes,
    creation_seq: int,
) -> EventBlock:
    """Build an event block, deriving its id from the canonical encoding."""
    return EventBlock(
        id=compute_event_id(
            creator, self_ref, other_refs, lamport_ts, payload, creation_seq
        ),
        creator=creator,
        self_ref=self_ref,
        other_refs=tuple(other_refs),
        lamport_ts=lamport_ts,
        payload=payload,
        creation_seq=creation_seq,
    )


def make_leaf(creator: NodeId, payload: bytes = b"") -> EventBlock:
    return new_event(creator, None, (), 0, payload, 0)


def make_event(
    creator: NodeId,
    self_parent: EventBlock,
    other_parents: tuple[EventBlock, ...],
    payload: bytes = b"",
) -> EventBlock:
    """Build a non-leaf event on top of resolved parent blocks.

    Computes the Lamport timestamp (1 + max over parents) and the
    creation sequence (self parent's + 1).
    """
    parents = (self_parent,) + tuple(other_parents)
    lamport = 1 + max(p.lamport_ts for p in parents)
    return new_event(
        creator,
        self_parent.id,
        tuple(p.id for p in other_parents),
        lamport,
        payload,
        self_parent.creation_seq + 1,
    )
