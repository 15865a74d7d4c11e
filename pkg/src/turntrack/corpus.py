"""Conversation corpus: on-disk format, validation, statistics, name
augmentation and scenario-grouped splitting.

A corpus file is UTF-8 with one JSON record per line:

    {"id": "...", "scenario_id": "...", "participants": ["alice", "bob"],
     "turns": [{"sender": "alice", "tokens": ["how", "did", ...],
                "refs": [{"span": [2, 3], "entity_id": 2, "is_new": true,
                          "type": "person", "gender": "female",
                          "number": "singular", "members": [],
                          "proper_name": false}]}],
     "quality": 4}

Entity IDs 0 and 1 are reserved for the two participants (first sender is 0);
all other IDs are assigned contiguously in order of first mention.  All text
is lowercased at parse time.  Unknown fields are rejected in strict mode and
logged in lenient mode.
"""

from __future__ import annotations

import io
import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CorpusParseError, CorpusValidationError

log = logging.getLogger("turntrack.corpus")

ENTITY_TYPES = ("person", "location")
GENDERS = ("female", "male", "unknown")
NUMBERS = ("singular", "plural")


@dataclass(frozen=True)
class GoldReference:
    """One annotated entity reference span within a turn."""

    span: tuple[int, int]
    entity_id: int
    is_new: bool
    entity_type: str
    gender: str
    number: str
    members: frozenset[int] = frozenset()
    proper_name: bool = False

    @property
    def start(self) -> int:
        return self.span[0]

    @property
    def end(self) -> int:
        return self.span[1]


@dataclass(frozen=True)
class Turn:
    sender: str
    tokens: tuple[str, ...]
    refs: tuple[GoldReference, ...] = ()


@dataclass(frozen=True)
class Conversation:
    id: str
    scenario_id: str
    participants: tuple[str, str]
    turns: tuple[Turn, ...]
    quality: int | None = None

    def max_entity_id(self) -> int:
        ids = {0, 1}
        for turn in self.turns:
            for ref in turn.refs:
                ids.add(ref.entity_id)
        return max(ids)

    def span_text(self, turn_index: int, ref: GoldReference) -> tuple[str, ...]:
        return self.turns[turn_index].tokens[ref.start:ref.end]


@dataclass
class CorpusStats:
    num_conversations: int = 0
    num_turns: int = 0
    total_tokens: int = 0
    mean_tokens_per_turn: float = 0.0
    turns_per_conversation_histogram: dict[int, int] = field(default_factory=dict)
    entities_per_turn_histogram: dict[int, int] = field(default_factory=dict)
    reference_span_counts: dict[str, int] = field(default_factory=dict)

    def top_reference_spans(self, n: int | None = None) -> list[tuple[str, int]]:
        ranked = sorted(self.reference_span_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked if n is None else ranked[:n]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_CONV_KEYS = {"id", "scenario_id", "participants", "turns", "quality"}
_TURN_KEYS = {"sender", "tokens", "refs"}
_REF_KEYS = {"span", "entity_id", "is_new", "type", "gender", "number", "members", "proper_name"}


def _require(cond, message, line, field_path):
    if not cond:
        raise CorpusParseError(message, line=line, field=field_path)


def _check_keys(obj, allowed, line, field_path, strict):
    unknown = set(obj) - allowed
    if unknown:
        if strict:
            raise CorpusParseError(
                f"unknown field(s) {sorted(unknown)}", line=line, field=field_path)
        log.warning("ignoring unknown field(s) %s at line %s (%s)",
                    sorted(unknown), line, field_path)


def _parse_ref(obj, line, path, strict) -> GoldReference:
    _require(isinstance(obj, dict), "reference must be an object", line, path)
    _check_keys(obj, _REF_KEYS, line, path, strict)
    for key in ("span", "entity_id", "is_new", "type", "gender", "number"):
        _require(key in obj, f"missing field {key!r}", line, path)
    span = obj["span"]
    _require(isinstance(span, list) and len(span) == 2
             and all(isinstance(v, int) for v in span),
             "span must be [start, end]", line, f"{path}.span")
    _require(isinstance(obj["entity_id"], int) and obj["entity_id"] >= 0,
             "entity_id must be a non-negative integer", line, f"{path}.entity_id")
    _require(isinstance(obj["is_new"], bool), "is_new must be a boolean",
             line, f"{path}.is_new")
    _require(obj["type"] in ENTITY_TYPES, f"type must be one of {ENTITY_TYPES}",
             line, f"{path}.type")
    _require(obj["gender"] in GENDERS, f"gender must be one of {GENDERS}",
             line, f"{path}.gender")
    _require(obj["number"] in NUMBERS, f"number must be one of {NUMBERS}",
             line, f"{path}.number")
    members = obj.get("members", [])
    _require(isinstance(members, list) and all(isinstance(v, int) for v in members),
             "members must be a list of integers", line, f"{path}.members")
    proper = obj.get("proper_name", False)
    _require(isinstance(proper, bool), "proper_name must be a boolean",
             line, f"{path}.proper_name")
    return GoldReference(
        span=(span[0], span[1]),
        entity_id=obj["entity_id"],
        is_new=obj["is_new"],
        entity_type=obj["type"],
        gender=obj["gender"],
        number=obj["number"],
        members=frozenset(members),
        proper_name=proper,
    )


def _parse_turn(obj, line, path, strict) -> Turn:
    _require(isinstance(obj, dict), "turn must be an object", line, path)
    _check_keys(obj, _TURN_KEYS, line, path, strict)
    for key in ("sender", "tokens"):
        _require(key in obj, f"missing field {key!r}", line, path)
    _require(isinstance(obj["sender"], str) and obj["sender"],
             "sender must be a non-empty string", line, f"{path}.sender")
    tokens = obj["tokens"]
    _require(isinstance(tokens, list) and all(isinstance(t, str) for t in tokens),
             "tokens must be a list of strings", line, f"{path}.tokens")
    refs_raw = obj.get("refs", [])
    _require(isinstance(refs_raw, list), "refs must be a list", line, f"{path}.refs")
    refs = [_parse_ref(r, line, f"{path}.refs[{i}]", strict)
            for i, r in enumerate(refs_raw)]
    refs.sort(key=lambda r: r.span)
    return Turn(
        sender=obj["sender"].lower(),
        tokens=tuple(t.lower() for t in tokens),
        refs=tuple(refs),
    )


def _parse_record(text: str, line: int, strict: bool) -> Conversation:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"invalid JSON: {exc.msg}", line=line, field=None) from exc
    _require(isinstance(obj, dict), "record must be a JSON object", line, None)
    _check_keys(obj, _CONV_KEYS, line, None, strict)
    for key in ("id", "scenario_id", "participants", "turns"):
        _require(key in obj, f"missing field {key!r}", line, key)
    _require(isinstance(obj["id"], str) and obj["id"], "id must be a non-empty string",
             line, "id")
    _require(isinstance(obj["scenario_id"], str) and obj["scenario_id"],
             "scenario_id must be a non-empty string", line, "scenario_id")
    parts = obj["participants"]
    _require(isinstance(parts, list) and len(parts) == 2
             and all(isinstance(p, str) and p for p in parts),
             "participants must be a pair of non-empty strings", line, "participants")
    turns_raw = obj["turns"]
    _require(isinstance(turns_raw, list), "turns must be a list", line, "turns")
    turns = [_parse_turn(t, line, f"turns[{i}]", strict)
             for i, t in enumerate(turns_raw)]
    quality = obj.get("quality")
    if quality is not None:
        _require(isinstance(quality, int), "quality must be an integer", line, "quality")
    return Conversation(
        id=obj["id"],
        scenario_id=obj["scenario_id"],
        participants=(parts[0].lower(), parts[1].lower()),
        turns=tuple(turns),
        quality=quality,
    )


def validate_conversation(conv: Conversation, line: int | None = None) -> None:
    """Check every corpus invariant; raises CorpusValidationError on the first hit."""

    def bad(message, invariant):
        raise CorpusValidationError(message, invariant, line=line, conversation=conv.id)

    if conv.participants[0] == conv.participants[1]:
        bad("participants must be distinct", "participants-distinct")
    for p in conv.participants:
        if any(ch.isspace() for ch in p):
            bad(f"participant handle {p!r} contains whitespace", "handle-whitespace")
    if conv.quality is not None and not 1 <= conv.quality <= 5:
        bad(f"quality {conv.quality} outside 1..5", "quality-range")

    introduced = {0, 1}
    next_new_id = 2
    seen_ids = {0, 1}
    for ti, turn in enumerate(conv.turns):
        where = f"turn {ti}"
        if turn.sender not in conv.participants:
            bad(f"{where}: sender {turn.sender!r} is not a participant",
                "sender-not-participant")
        if not turn.tokens:
            bad(f"{where}: empty token list", "empty-turn")
        for tok in turn.tokens:
            if not tok:
                bad(f"{where}: empty token", "token-empty")
            if any(ch.isspace() for ch in tok):
                bad(f"{where}: token {tok!r} contains whitespace", "token-whitespace")
        prev_end = -1
        for ref in turn.refs:
            rwhere = f"{where} ref at {ref.span}"
            if ref.end <= ref.start:
                bad(f"{rwhere}: end must exceed start", "end-after-start")
            if ref.start < 0 or ref.end > len(turn.tokens):
                bad(f"{rwhere}: span outside [0, {len(turn.tokens)})", "span-bounds")
            if ref.start < prev_end:
                bad(f"{rwhere}: overlaps previous reference", "span-overlap")
            prev_end = ref.end
            if bool(ref.members) != (ref.number == "plural"):
                bad(f"{rwhere}: members must be non-empty iff number is plural",
                    "members-require-plural")
            for m in sorted(ref.members):
                if m not in introduced:
                    bad(f"{rwhere}: member {m} not introduced yet",
                        "member-not-introduced")
            if ref.is_new:
                if ref.entity_id < 2:
                    bad(f"{rwhere}: participant IDs 0/1 are seeded, never first-mentioned",
                        "participant-first-mention")
                if ref.entity_id != next_new_id:
                    bad(f"{rwhere}: first mention got ID {ref.entity_id}, "
                        f"expected {next_new_id} (IDs follow first-mention order)",
                        "id-order-of-first-mention")
                next_new_id += 1
                introduced.add(ref.entity_id)
            elif ref.entity_id not in introduced:
                bad(f"{rwhere}: ID {ref.entity_id} referenced before its first mention",
                    "reference-before-introduction")
            seen_ids.add(ref.entity_id)

    if seen_ids != set(range(max(seen_ids) + 1)):
        bad(f"entity IDs {sorted(seen_ids)} are not contiguous from 0",
            "entity-ids-not-contiguous")


def parse_corpus(stream, strict: bool = True) -> list[Conversation]:
    """Parse and validate a line-delimited corpus from bytes, text or a file."""
    if isinstance(stream, bytes):
        lines = stream.decode("utf-8").splitlines()
    elif isinstance(stream, str):
        lines = stream.splitlines()
    elif isinstance(stream, io.IOBase) or hasattr(stream, "read"):
        data = stream.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        lines = data.splitlines()
    else:
        lines = [l.decode("utf-8") if isinstance(l, bytes) else l for l in stream]

    conversations = []
    for i, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        conv = _parse_record(text, i, strict)
        validate_conversation(conv, line=i)
        conversations.append(conv)
    return conversations


def load_corpus(path, strict: bool = True) -> list[Conversation]:
    with open(path, "rb") as fh:
        return parse_corpus(fh, strict=strict)


# ---------------------------------------------------------------------------
# serialization (canonical, round-trip safe)
# ---------------------------------------------------------------------------

def ref_to_obj(ref: GoldReference) -> dict:
    return {
        "span": [ref.start, ref.end],
        "entity_id": ref.entity_id,
        "is_new": ref.is_new,
        "type": ref.entity_type,
        "gender": ref.gender,
        "number": ref.number,
        "members": sorted(ref.members),
        "proper_name": ref.proper_name,
    }


def serialize_conversation(conv: Conversation) -> str:
    obj = {
        "id": conv.id,
        "scenario_id": conv.scenario_id,
        "participants": list(conv.participants),
        "turns": [
            {
                "sender": t.sender,
                "tokens": list(t.tokens),
                "refs": [ref_to_obj(r) for r in t.refs],
            }
            for t in conv.turns
        ],
    }
    if conv.quality is not None:
        obj["quality"] = conv.quality
    return json.dumps(obj, separators=(",", ":"))


def serialize_corpus(conversations: Iterable[Conversation]) -> str:
    return "".join(serialize_conversation(c) + "\n" for c in conversations)


def save_corpus(conversations: Iterable[Conversation], path) -> None:
    Path(path).write_text(serialize_corpus(conversations), encoding="utf-8")


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def compute_stats(corpus: Sequence[Conversation]) -> CorpusStats:
    stats = CorpusStats()
    turns_hist = Counter()
    entities_hist = Counter()
    spans = Counter()
    for conv in corpus:
        stats.num_conversations += 1
        turns_hist[len(conv.turns)] += 1
        for ti, turn in enumerate(conv.turns):
            stats.num_turns += 1
            stats.total_tokens += len(turn.tokens)
            entities_hist[len({r.entity_id for r in turn.refs})] += 1
            for ref in turn.refs:
                spans[" ".join(conv.span_text(ti, ref))] += 1
    stats.mean_tokens_per_turn = (
        stats.total_tokens / stats.num_turns if stats.num_turns else 0.0)
    stats.turns_per_conversation_histogram = dict(sorted(turns_hist.items()))
    stats.entities_per_turn_histogram = dict(sorted(entities_hist.items()))
    stats.reference_span_counts = dict(spans)
    return stats


# ---------------------------------------------------------------------------
# name augmentation
# ---------------------------------------------------------------------------

def _proper_name_entities(conv: Conversation) -> dict[int, str]:
    """Person entities carrying at least one proper-name span, with the text
    of their first such span (used for the collision rule)."""
    out: dict[int, str] = {}
    for ti, turn in enumerate(conv.turns):
        for ref in turn.refs:
            if ref.entity_type == "person" and ref.proper_name:
                out.setdefault(ref.entity_id, " ".join(conv.span_text(ti, ref)))
    return out


def augment_names(corpus: Sequence[Conversation], name_pool: Sequence[str],
                  seed: int, max_attempts: int = 100) -> list[Conversation]:
    """Replace proper-name person spans with pool names, consistently per
    entity within a conversation.  Deterministic for a given seed."""
    if not name_pool:
        raise ValueError("name_pool must be non-empty")
    for name in name_pool:
        if not name or name != name.lower() or any(ch.isspace() for ch in name):
            raise ValueError(f"pool names must be single lowercase tokens: {name!r}")
    rng = random.Random(seed)
    out = []
    for conv in corpus:
        originals = _proper_name_entities(conv)
        if not originals:
            out.append(conv)
            continue
        entity_ids = sorted(originals)
        assignment = None
        for _ in range(max_attempts):
            draw = {e: rng.choice(name_pool) for e in entity_ids}
            ok = True
            for i, a in enumerate(entity_ids):
                for b in entity_ids[i + 1:]:
                    # a collision is only allowed where the source conversation
                    # already reused the name between those entities
                    if draw[a] == draw[b] and originals[a] != originals[b]:
                        ok = False
            if ok:
                assignment = draw
                break
        if assignment is None:
            raise ValueError(
                f"could not draw non-colliding names for conversation {conv.id!r} "
                f"after {max_attempts} attempts (pool too small)")
        out.append(_apply_names(conv, assignment))
    return out


def _apply_names(conv: Conversation, names: dict[int, str]) -> Conversation:
    new_turns = []
    for turn in conv.turns:
        tokens = list(turn.tokens)
        for ref in turn.refs:
            if (ref.entity_type == "person" and ref.proper_name
                    and ref.entity_id in names):
                for i in range(ref.start, ref.end):
                    tokens[i] = names[ref.entity_id]
        new_turns.append(replace(turn, tokens=tuple(tokens)))
    participants = tuple(
        names.get(pid, handle) for pid, handle in enumerate(conv.participants))
    handle_map = dict(zip(conv.participants, participants))
    new_turns = [replace(t, sender=handle_map.get(t.sender, t.sender))
                 for t in new_turns]
    return replace(conv, participants=participants, turns=tuple(new_turns))


# ---------------------------------------------------------------------------
# scenario-grouped splitting
# ---------------------------------------------------------------------------

def split_corpus(corpus: Sequence[Conversation], eval_fraction: float,
                 seed: int) -> tuple[list[Conversation], list[Conversation]]:
    """Split by scenario so no scenario straddles the train/eval boundary."""
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must lie in (0, 1)")
    by_scenario: dict[str, int] = Counter()
    for conv in corpus:
        by_scenario[conv.scenario_id] += 1
    scenarios = sorted(by_scenario)
    if len(scenarios) < 2:
        raise ValueError("need at least 2 distinct scenarios to split")
    rng = random.Random(seed)
    rng.shuffle(scenarios)
    target = eval_fraction * len(corpus)
    eval_scenarios: set[str] = set()
    count = 0
    for scenario in scenarios:
        if count >= target or len(eval_scenarios) == len(scenarios) - 1:
            break
        eval_scenarios.add(scenario)
        count += by_scenario[scenario]
    train = [c for c in corpus if c.scenario_id not in eval_scenarios]
    eval_set = [c for c in corpus if c.scenario_id in eval_scenarios]
    return train, eval_set
