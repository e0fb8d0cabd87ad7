"""Per-node append-only event DAG with reachability indices.

The chain stores every accepted event block, keyed by id, together with
incrementally maintained ancestor bitmasks.  Those bitmasks make
happened-before queries, subgraph extraction and fork detection cheap
enough to run inside the consensus pipeline on every step.
"""

from __future__ import annotations

from typing import Iterable, Iterator

from .errors import (
    DuplicateEvent,
    InvalidLamport,
    MissingRef,
    RefShapeViolation,
    UnknownEvent,
)
from .events import EventBlock, EventId, NodeId

KnownMap = dict[NodeId, int]  # per-creator count of known events


class Chain:
    """Append-only OPERA-style DAG held by one node.

    Events are immutable once inserted.  The structure is safe to share
    read-only; mutation is single-writer.
    """

    def __init__(self) -> None:
        self.events: dict[EventId, EventBlock] = {}
        self.by_creator: dict[NodeId, list[EventId]] = {}
        # index of each event in insertion order, used for bitmasks
        self._index: dict[EventId, int] = {}
        self._order: list[EventId] = []
        # ancestor masks exclude the event itself; self-ancestor masks
        # follow only self-ref edges
        self._anc: dict[EventId, int] = {}
        self._self_anc: dict[EventId, int] = {}
        # per-creator self-chain tips: events with no same-creator child
        self._tips: dict[NodeId, set[EventId]] = {}
        # all same-creator concurrent pairs seen so far, (min_id, max_id)
        self._fork_pairs: set[tuple[EventId, EventId]] = set()
        self._fork_victims: set[EventId] = set()

    # -- basics -------------------------------------------------------

    def __len__(self) -> int:
        return len(self.events)

    def __contains__(self, event_id: EventId) -> bool:
        return event_id in self.events

    def get(self, event_id: EventId) -> EventBlock:
        try:
            return self.events[event_id]
        except KeyError:
            raise UnknownEvent(event_id.hex()) from None

    def index_of(self, event_id: EventId) -> int:
        return self._index[event_id]

    def in_insertion_order(self) -> Iterator[EventBlock]:
        for eid in self._order:
            yield self.events[eid]

    def edges(self) -> Iterator[tuple[EventId, EventId]]:
        """All (child, parent) reference edges."""
        for e in self.events.values():
            for ref in e.refs:
                yield (e.id, ref)

    def creators(self) -> list[NodeId]:
        return sorted(self.by_creator)

    # -- insertion ----------------------------------------------------

    def _validate(self, e: EventBlock) -> None:
        if e.id in self.events:
            raise DuplicateEvent(e.id.hex())
        missing = [r for r in e.refs if r not in self.events]
        if missing:
            raise MissingRef(e.id, missing)
        if e.is_leaf:
            if e.creation_seq != 0:
                raise RefShapeViolation(
                    f"leaf {e.short()} must have creation_seq 0"
                )
            if e.other_refs:
                raise RefShapeViolation(f"leaf {e.short()} carries refs")
            if e.lamport_ts != 0:
                raise InvalidLamport(
                    f"leaf {e.short()} claims lamport {e.lamport_ts}, expected 0"
                )
            return
        self_parent = self.events[e.self_ref]
        if self_parent.creator != e.creator:
            raise RefShapeViolation(
                f"{e.short()}: self-ref points at creator {self_parent.creator}"
            )
        if e.creation_seq != self_parent.creation_seq + 1:
            raise RefShapeViolation(
                f"{e.short()}: creation_seq must follow its self parent"
            )
        seen: set[NodeId] = {e.creator}
        for ref in e.other_refs:
            c = self.events[ref].creator
            if c in seen:
                raise RefShapeViolation(
                    f"{e.short()}: more than one ref to creator {c}"
                )
            seen.add(c)
        expected = 1 + max(self.events[r].lamport_ts for r in e.refs)
        if e.lamport_ts != expected:
            raise InvalidLamport(
                f"{e.short()} claims lamport {e.lamport_ts}, expected {expected}"
            )

    def insert(self, e: EventBlock) -> list[tuple[EventId, EventId]]:
        """Insert a validated event; returns any new fork pairs it creates.

        A fork pair is two events by the same creator, neither a
        self-ancestor of the other.  Honest creators never produce one.
        """
        self._validate(e)
        idx = len(self._order)
        anc = 0
        for ref in e.refs:
            anc |= self._anc[ref] | (1 << self._index[ref])
        self_anc = 0
        if e.self_ref is not None:
            self_anc = self._self_anc[e.self_ref] | (1 << self._index[e.self_ref])

        self.events[e.id] = e
        self._index[e.id] = idx
        self._order.append(e.id)
        self._anc[e.id] = anc
        self._self_anc[e.id] = self_anc
        self.by_creator.setdefault(e.creator, []).append(e.id)

        tips = self._tips.setdefault(e.creator, set())
        # extending the creator's sole tip cannot create a fork; anything
        # else (second leaf, stale self parent, or an already-forked
        # creator) needs the concurrency scan
        if e.is_leaf:
            clean = not tips
        else:
            clean = e.self_ref in tips and len(tips) == 1
        tips.discard(e.self_ref)
        tips.add(e.id)

        new_pairs: list[tuple[EventId, EventId]] = []
        if not clean:
            # slow path: the self parent already had another child (or a
            # second leaf appeared); scan this creator for concurrent pairs
            for other_id in self.by_creator[e.creator]:
                if other_id == e.id:
                    continue
                if self._self_related(other_id, e.id):
                    continue
                pair = (min(other_id, e.id), max(other_id, e.id))
                if pair not in self._fork_pairs:
                    self._fork_pairs.add(pair)
                    new_pairs.append(pair)
                    ea, eb = self.events[pair[0]], self.events[pair[1]]
                    self._fork_victims.add(
                        pair[1] if eb.sort_key() > ea.sort_key() else pair[0]
                    )
        return new_pairs

    def _self_related(self, x: EventId, y: EventId) -> bool:
        return (
            self._self_anc[y] >> self._index[x] & 1
            or self._self_anc[x] >> self._index[y] & 1
        )

    # -- queries ------------------------------------------------------

    def happened_before(self, x: EventId, y: EventId) -> bool:
        """True iff x is an ancestor of y (x strictly precedes y)."""
        if x not in self.events:
            raise UnknownEvent(x.hex())
        if y not in self.events:
            raise UnknownEvent(y.hex())
        return bool(self._anc[y] >> self._index[x] & 1)

    def concurrent(self, x: EventId, y: EventId) -> bool:
        return (
            x != y
            and not self.happened_before(x, y)
            and not self.happened_before(y, x)
        )

    def self_ancestor(self, x: EventId, y: EventId) -> bool:
        """True iff x is a self-ancestor of y."""
        if x not in self.events or y not in self.events:
            raise UnknownEvent("unknown event in self_ancestor query")
        return bool(self._self_anc[y] >> self._index[x] & 1)

    def ancestor_mask(self, v: EventId) -> int:
        """Bitmask over insertion indices of v's ancestors plus v itself."""
        return self._anc[v] | (1 << self._index[v])

    def ids_from_mask(self, mask: int) -> set[EventId]:
        out = set()
        i = 0
        while mask:
            low = mask & -mask
            i = low.bit_length() - 1
            out.add(self._order[i])
            mask ^= low
        return out

    def subgraph_under(self, v: EventId) -> set[EventId]:
        """v plus all of its ancestors (closed under refs)."""
        if v not in self.events:
            raise UnknownEvent(v.hex())
        return self.ids_from_mask(self.ancestor_mask(v))

    def tips(self, creator: NodeId) -> set[EventId]:
        return set(self._tips.get(creator, ()))

    def top_event(self, creator: NodeId, avoid: frozenset = frozenset()) -> EventId | None:
        """Canonical tip of a creator's self-chain.

        With forks present there may be several tips; the canonical one is
        the smallest by (lamport, id) outside ``avoid`` so that every node
        picks the same branch.
        """
        tips = self._tips.get(creator)
        if not tips:
            return None
        usable = [t for t in tips if t not in avoid] or list(tips)
        return min(usable, key=lambda t: self.events[t].sort_key())

    @property
    def top_events(self) -> dict[NodeId, EventId]:
        return {
            c: self.top_event(c)
            for c in sorted(self._tips)
            if self._tips[c]
        }

    # -- forks ----------------------------------------------------------

    def detect_forks(self) -> list[tuple[EventId, EventId]]:
        """All same-creator concurrent pairs, each ordered by id."""
        return sorted(self._fork_pairs)

    def fork_victims(self) -> set[EventId]:
        """Later-by-(lamport, id) member of every fork pair.

        This is a pure function of chain content, so any two nodes with
        the same chain exclude the same events from consensus.
        """
        return set(self._fork_victims)

    # -- sync support ---------------------------------------------------

    def known_map(self) -> KnownMap:
        return {c: len(ids) for c, ids in sorted(self.by_creator.items())}

    def diff_events(self, remote: KnownMap) -> list[EventBlock]:
        """Local events the remote side is missing, in causal order.

        An event is included when its creation_seq is at or past the
        remote's per-creator count.  (lamport, id) order is a valid
        topological order because Lamport time strictly increases along
        references.
        """
        out = []
        for creator, ids in self.by_creator.items():
            have = remote.get(creator, 0)
            for eid in ids:
                if self.events[eid].creation_seq >= have:
                    out.append(self.events[eid])
        out.sort(key=EventBlock.sort_key)
        return out

    def closure_of(self, ids: Iterable[EventId]) -> list[EventBlock]:
        """Union of subgraphs under the given ids, in causal order."""
        mask = 0
        for eid in ids:
            if eid in self.events:
                mask |= self.ancestor_mask(eid)
        blocks = [self.events[e] for e in self.ids_from_mask(mask)]
        blocks.sort(key=EventBlock.sort_key)
        return blocks

    def closure_of_limited(self, ids: Iterable[EventId], depth: int = 16) -> list[EventBlock]:
        """Subgraphs under the given ids, truncated ``depth`` hops down.

        Answering an event request with the full past of the wanted events
        is wasteful when the requester misses only a few recent parents;
        it can always re-request whatever the truncated answer still
        left dangling.
        """
        out: dict[EventId, EventBlock] = {}
        frontier = [eid for eid in ids if eid in self.events]
        for _ in range(depth):
            nxt: list[EventId] = []
            for eid in frontier:
                if eid in out:
                    continue
                e = self.events[eid]
                out[eid] = e
                nxt.extend(r for r in e.refs if r not in out)
            if not nxt:
                break
            frontier = nxt
        blocks = sorted(out.values(), key=EventBlock.sort_key)
        return blocks
