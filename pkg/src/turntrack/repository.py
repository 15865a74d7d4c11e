"""Entity-reference repository: the conversation context carried turn to turn.

The repository stores one element per *reference* (several references may
share an entity ID), seeded with the two participants before the first turn.
New entities receive sequential IDs up to a fixed capacity; past capacity,
new spans are dropped and reported rather than aborting the conversation.
All values are immutable; operations return new repositories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .corpus import Conversation, GoldReference
from .errors import RepositoryError

ROLE_SENDER = "sender"
ROLE_RECIPIENT = "recipient"
ROLE_NONE = "none"

DEFAULT_CAPACITY = 20


@dataclass(frozen=True)
class EntityReference:
    entity_id: int
    is_new: bool
    entity_type: str
    gender: str
    number: str
    members: frozenset[int]
    turn_index: int
    span: tuple[int, int]
    span_text: tuple[str, ...]
    role: str = ROLE_NONE


@dataclass(frozen=True)
class Repository:
    refs: tuple[EntityReference, ...]
    next_id: int
    capacity: int

    @property
    def ids_present(self) -> frozenset[int]:
        return frozenset(r.entity_id for r in self.refs)

    def __len__(self) -> int:
        return len(self.refs)


def seed_repository(participants: tuple[str, str], capacity: int = DEFAULT_CAPACITY) -> Repository:
    """Initial repository: participant 0 (sender of turn one) and participant 1."""
    if capacity < 2:
        raise RepositoryError(f"capacity must be at least 2, got {capacity}")
    seeds = tuple(
        EntityReference(
            entity_id=i,
            is_new=True,
            entity_type="person",
            gender="unknown",
            number="singular",
            members=frozenset(),
            turn_index=-1,
            span=(0, 0),
            span_text=(handle,),
            role=ROLE_SENDER if i == 0 else ROLE_RECIPIENT,
        )
        for i, handle in enumerate(participants)
    )
    return Repository(refs=seeds, next_id=2, capacity=capacity)


def assign_new_ids(repo: Repository, new_spans: Sequence[tuple[int, int]]
                   ) -> tuple[Repository, list[int], list[tuple[int, int]]]:
    """Assign the next available IDs to spans left to right; spans beyond
    capacity are dropped and returned so callers can report them."""
    for a, b in zip(new_spans, new_spans[1:]):
        if b[0] < a[0]:
            raise RepositoryError("new spans must be ordered by start index")
    assigned: list[int] = []
    dropped: list[tuple[int, int]] = []
    next_id = repo.next_id
    for span in new_spans:
        if next_id < repo.capacity:
            assigned.append(next_id)
            next_id += 1
        else:
            dropped.append(tuple(span))
    return replace(repo, next_id=next_id), assigned, dropped


def add_references(repo: Repository, refs: Sequence[EntityReference]) -> Repository:
    if not refs:
        return repo
    known = set(r.entity_id for r in repo.refs)
    known.update(r.entity_id for r in refs)
    last_turn = max((r.turn_index for r in repo.refs), default=-1)
    for ref in refs:
        if ref.entity_id >= repo.next_id:
            raise RepositoryError(
                f"reference ID {ref.entity_id} has not been assigned (next_id {repo.next_id})")
        if ref.turn_index < last_turn:
            raise RepositoryError(
                f"reference for turn {ref.turn_index} added after turn {last_turn}")
        for m in sorted(ref.members):
            if m >= repo.next_id or m not in known:
                raise RepositoryError(f"unknown member ID {m}")
    ordered = sorted(refs, key=lambda r: (r.turn_index, r.span[0]))
    return replace(repo, refs=repo.refs + tuple(ordered))


def randomize_ids(conversation: Conversation, offset: int, capacity: int) -> Conversation:
    """Shift every entity ID (and member ID) by offset modulo capacity.

    The map is a bijection on Z_capacity, so co-reference structure is
    preserved.  The result is a training-time view: IDs no longer start at 0,
    so it must not be re-validated against the corpus invariants.
    """
    new_turns = []
    for turn in conversation.turns:
        new_refs = []
        for ref in turn.refs:
            if ref.entity_id >= capacity:
                raise RepositoryError(
                    f"entity ID {ref.entity_id} >= capacity {capacity}")
            for m in ref.members:
                if m >= capacity:
                    raise RepositoryError(f"member ID {m} >= capacity {capacity}")
            new_refs.append(replace(
                ref,
                entity_id=(ref.entity_id + offset) % capacity,
                members=frozenset((m + offset) % capacity for m in ref.members),
            ))
        new_turns.append(replace(turn, refs=tuple(new_refs)))
    return replace(conversation, turns=tuple(new_turns))


def gold_turn_references(conv: Conversation, turn_index: int) -> list[EntityReference]:
    """Materialize a turn's gold annotations as repository references."""
    turn = conv.turns[turn_index]
    return [
        EntityReference(
            entity_id=ref.entity_id,
            is_new=ref.is_new,
            entity_type=ref.entity_type,
            gender=ref.gender,
            number=ref.number,
            members=ref.members,
            turn_index=turn_index,
            span=ref.span,
            span_text=conv.span_text(turn_index, ref),
            role=ROLE_NONE,
        )
        for ref in turn.refs
    ]


def build_gold_repository(conv: Conversation, upto_turn: int,
                          capacity: int = DEFAULT_CAPACITY) -> Repository:
    """Replay gold annotations for turns < upto_turn through the normal
    seed/assign/add path.  Checks that sequential assignment reproduces the
    gold IDs exactly (it must, for a validated conversation)."""
    repo = seed_repository(conv.participants, capacity)
    for ti in range(upto_turn):
        refs = gold_turn_references(conv, ti)
        new_refs = [r for r in refs if r.is_new]
        repo, assigned, dropped = assign_new_ids(repo, [r.span for r in new_refs])
        kept = new_refs[:len(assigned)]
        for ref, got in zip(kept, assigned):
            if ref.entity_id != got:
                raise RepositoryError(
                    f"gold replay mismatch in {conv.id!r} turn {ti}: "
                    f"gold ID {ref.entity_id}, assigned {got}")
        dropped_ids = {r.entity_id for r in new_refs[len(assigned):]}
        addable = [r for r in refs
                   if r.entity_id not in dropped_ids and r.entity_id < repo.next_id]
        repo = add_references(repo, addable)
    return repo


# ---------------------------------------------------------------------------
# snapshot serialization (REPL / debugging / online-contract checks)
# ---------------------------------------------------------------------------

def reference_to_obj(ref: EntityReference) -> dict:
    return {
        "span": [ref.span[0], ref.span[1]],
        "entity_id": ref.entity_id,
        "is_new": ref.is_new,
        "type": ref.entity_type,
        "gender": ref.gender,
        "number": ref.number,
        "members": sorted(ref.members),
        "tokens": list(ref.span_text),
        "turn_index": ref.turn_index,
        "role": ref.role,
    }


def reference_from_obj(obj: dict) -> EntityReference:
    return EntityReference(
        entity_id=obj["entity_id"],
        is_new=obj["is_new"],
        entity_type=obj["type"],
        gender=obj["gender"],
        number=obj["number"],
        members=frozenset(obj["members"]),
        turn_index=obj["turn_index"],
        span=(obj["span"][0], obj["span"][1]),
        span_text=tuple(obj["tokens"]),
        role=obj.get("role", ROLE_NONE),
    )


def serialize_repository(repo: Repository) -> str:
    obj = {
        "next_id": repo.next_id,
        "capacity": repo.capacity,
        "refs": [reference_to_obj(r) for r in repo.refs],
    }
    return json.dumps(obj, separators=(",", ":"))


def parse_repository(text: str) -> Repository:
    obj = json.loads(text)
    return Repository(
        refs=tuple(reference_from_obj(r) for r in obj["refs"]),
        next_id=obj["next_id"],
        capacity=obj["capacity"],
    )
