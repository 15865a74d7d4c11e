"""Turn-by-turn decoding: logits to references, references to repository.

Stage-one logits become new-entity spans through a begin/inside state
machine; the spans receive sequential IDs.  Stage-two logits are decoded per
token (entity ID, properties, members), then merged into references: new
spans consume their tokens, and remaining tokens with equal decoded IDs form
existing-entity references.  Decodes naming IDs the repository has never
assigned are reported, not applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .corpus import Conversation
from .encoding import Encoder, GENDER_INDEX, NUMBER_INDEX, TYPE_INDEX
from .repository import (EntityReference, Repository, ROLE_NONE,
                         add_references, assign_new_ids, gold_turn_references,
                         seed_repository)

TYPE_NAMES = {v: k for k, v in TYPE_INDEX.items()}
GENDER_NAMES = {v: k for k, v in GENDER_INDEX.items()}
NUMBER_NAMES = {v: k for k, v in NUMBER_INDEX.items()}


@dataclass(frozen=True)
class TurnContext:
    """What a model may inspect for one turn besides the encoded rows."""
    repo: Repository
    turn_index: int
    tokens: tuple[str, ...]
    sender_entity: int
    gold_refs: tuple[EntityReference, ...] | None = None


class TurnModel(Protocol):
    def stage1_logits(self, r_rows, u_rows, context: TurnContext) -> np.ndarray: ...

    def stage2_logits(self, r_aug, u_aug, context: TurnContext) -> np.ndarray: ...


@dataclass(frozen=True)
class PredictedReference:
    span: tuple[int, int]
    entity_id: int
    is_new: bool
    entity_type: str
    gender: str
    number: str
    members: frozenset[int]


@dataclass(frozen=True)
class TokenDecode:
    entity_id: int | None
    entity_type: str
    gender: str
    number: str
    members: frozenset[int]


@dataclass(frozen=True)
class TurnPrediction:
    turn_index: int
    refs: tuple[PredictedReference, ...]
    dropped_spans: tuple[tuple[int, int], ...] = ()
    dropped_refs: tuple[PredictedReference, ...] = ()
    evicted_ids: tuple[int, ...] = ()


def decode_new_spans(s1_logits: np.ndarray) -> list[tuple[int, int]]:
    """Begin/inside logits to spans.  A begin logit above threshold always
    opens a span; an inside logit above threshold extends the open span, or
    opens one when nothing is open."""
    spans: list[tuple[int, int]] = []
    start = None
    for j in range(s1_logits.shape[0]):
        begin = s1_logits[j, 0] > 0.0
        inside = s1_logits[j, 1] > 0.0
        if begin:
            if start is not None:
                spans.append((start, j))
            start = j
        elif inside:
            if start is None:
                start = j
        else:
            if start is not None:
                spans.append((start, j))
                start = None
    if start is not None:
        spans.append((start, s1_logits.shape[0]))
    return spans


def decode_stage2(s2_logits: np.ndarray, layout) -> list[TokenDecode]:
    cap = layout.capacity
    t0 = cap
    g0 = t0 + len(TYPE_INDEX)
    n0 = g0 + len(GENDER_INDEX)
    m0 = n0 + len(NUMBER_INDEX)
    out = []
    for row in s2_logits:
        ids = row[:cap]
        entity = int(np.argmax(ids)) if float(ids.max()) > 0.0 else None
        number = NUMBER_NAMES[int(np.argmax(row[n0:m0]))]
        members = (frozenset(int(i) for i in np.flatnonzero(row[m0:m0 + cap] > 0.0))
                   if number == "plural" else frozenset())
        out.append(TokenDecode(
            entity_id=entity,
            entity_type=TYPE_NAMES[int(np.argmax(row[t0:g0]))],
            gender=GENDER_NAMES[int(np.argmax(row[g0:n0]))],
            number=number,
            members=members,
        ))
    return out


def _existing_runs(decodes: Sequence[TokenDecode],
                   consumed: Sequence[bool]) -> list[tuple[int, int, int]]:
    """Maximal runs of unconsumed tokens sharing a decoded entity ID."""
    runs = []
    j = 0
    m = len(decodes)
    while j < m:
        if consumed[j] or decodes[j].entity_id is None:
            j += 1
            continue
        entity = decodes[j].entity_id
        k = j + 1
        while k < m and not consumed[k] and decodes[k].entity_id == entity:
            k += 1
        runs.append((j, k, entity))
        j = k
    return runs


def track_turn(model: TurnModel, encoder: Encoder, repo: Repository,
               tokens: Sequence[str], turn_index: int, sender_entity: int,
               strict: bool = True, teacher_forcing: bool = False,
               gold_refs: Sequence[EntityReference] | None = None,
               ) -> tuple[TurnPrediction, Repository]:
    """Run both stages on one utterance; return the prediction and the
    updated repository (gold-updated under teacher forcing)."""
    lay = encoder.layout
    m = len(tokens)
    r_rows, u_rows, evicted = encoder.encode_turn(
        repo, tokens, turn_index, sender_entity, strict=strict)
    ctx = TurnContext(repo=repo, turn_index=turn_index, tokens=tuple(tokens),
                      sender_entity=sender_entity,
                      gold_refs=tuple(gold_refs) if gold_refs is not None else None)

    s1 = model.stage1_logits(r_rows, u_rows, ctx)
    pred_spans = decode_new_spans(s1)

    token_ids: list[int | None] = [None] * m
    consumed = [False] * m
    if teacher_forcing:
        if gold_refs is None:
            raise ValueError("teacher forcing requires gold references")
        gold_new = [r for r in gold_refs if r.is_new]
        repo2, assigned, dropped = assign_new_ids(repo, [r.span for r in gold_new])
        for ref, entity in zip(gold_new, assigned):
            for j in range(*ref.span):
                token_ids[j] = entity
                consumed[j] = True
        for ref in gold_new[len(assigned):]:
            for j in range(*ref.span):
                consumed[j] = True
        new_ids = list(range(repo.next_id, repo.next_id + len(pred_spans)))
        kept_spans = [(s, i) for (s, i) in zip(pred_spans, new_ids)
                      if i < repo.capacity]
        dropped = tuple(s for s, i in zip(pred_spans, new_ids)
                        if i >= repo.capacity)
    else:
        repo2, assigned, dropped = assign_new_ids(repo, pred_spans)
        kept_spans = list(zip(pred_spans[:len(assigned)], assigned))
        for span, entity in kept_spans:
            for j in range(*span):
                token_ids[j] = entity
        for span in pred_spans:
            for j in range(*span):
                consumed[j] = True
        dropped = tuple(dropped)

    r_aug, u_aug = encoder.augment_for_stage2(r_rows, u_rows, token_ids)
    s2 = model.stage2_logits(r_aug, u_aug, ctx)
    decodes = decode_stage2(s2, lay)

    def attrs(j: int) -> TokenDecode:
        return decodes[j]

    def prune(members: frozenset[int]) -> frozenset[int]:
        return frozenset(i for i in members if i < repo2.next_id)

    refs: list[PredictedReference] = []
    dropped_refs: list[PredictedReference] = []
    for (start, end), entity in kept_spans:
        d = attrs(start)
        refs.append(PredictedReference(
            span=(start, end), entity_id=entity, is_new=True,
            entity_type=d.entity_type, gender=d.gender, number=d.number,
            members=prune(d.members) if d.number == "plural" else frozenset()))
    for start, end, entity in _existing_runs(decodes, consumed):
        d = attrs(start)
        ref = PredictedReference(
            span=(start, end), entity_id=entity, is_new=False,
            entity_type=d.entity_type, gender=d.gender, number=d.number,
            members=prune(d.members) if d.number == "plural" else frozenset())
        if entity < repo2.next_id:
            refs.append(ref)
        else:
            dropped_refs.append(ref)
    refs.sort(key=lambda r: r.span)

    if teacher_forcing:
        addable = [r for r in gold_refs
                   if r.entity_id < repo2.next_id
                   and all(mm < repo2.next_id for mm in r.members)]
        repo_out = add_references(repo2, addable)
    else:
        repo_out = add_references(repo2, [
            EntityReference(
                entity_id=r.entity_id, is_new=r.is_new, entity_type=r.entity_type,
                gender=r.gender, number=r.number, members=r.members,
                turn_index=turn_index, span=r.span,
                span_text=tuple(tokens[r.span[0]:r.span[1]]), role=ROLE_NONE)
            for r in refs])

    prediction = TurnPrediction(
        turn_index=turn_index, refs=tuple(refs), dropped_spans=tuple(dropped),
        dropped_refs=tuple(dropped_refs),
        evicted_ids=tuple(r.entity_id for r in evicted))
    return prediction, repo_out


def track_conversation(model: TurnModel, encoder: Encoder, conv: Conversation,
                       teacher_forcing: bool = False, strict: bool = True,
                       ) -> list[TurnPrediction]:
    repo = seed_repository(conv.participants, encoder.layout.capacity)
    predictions = []
    for ti, turn in enumerate(conv.turns):
        sender = conv.participants.index(turn.sender)
        gold = gold_turn_references(conv, ti)
        pred, repo = track_turn(
            model, encoder, repo, turn.tokens, ti, sender, strict=strict,
            teacher_forcing=teacher_forcing, gold_refs=gold)
        predictions.append(pred)
    return predictions


class OracleModel:
    """Emits clean ±margin logits reconstructing the gold annotation.

    Stands in for a perfect network when testing decoding, evaluation and
    error propagation in isolation.  Note stage two speaks in gold IDs: when
    the running repository has drifted from the gold assignment (say after an
    injected stage-one failure) its answers go stale, which is exactly the
    cascade the propagation study measures.
    """

    def __init__(self, layout, margin: float = 2.0):
        self.layout = layout
        self.margin = margin

    def _gold(self, context: TurnContext):
        if context.gold_refs is None:
            raise ValueError("oracle model requires gold references in context")
        return context.gold_refs

    def stage1_logits(self, r_rows, u_rows, context: TurnContext) -> np.ndarray:
        out = np.full((len(context.tokens), 2), -self.margin)
        for ref in self._gold(context):
            if not ref.is_new:
                continue
            start, end = ref.span
            out[start, 0] = self.margin
            out[start + 1:end, 1] = self.margin
        return out

    def stage2_logits(self, r_aug, u_aug, context: TurnContext) -> np.ndarray:
        lay = self.layout
        cap = lay.capacity
        out = np.full((len(context.tokens), 2 * cap + lay.num_properties),
                      -self.margin)
        for ref in self._gold(context):
            t0 = cap
            g0 = t0 + len(TYPE_INDEX)
            n0 = g0 + len(GENDER_INDEX)
            m0 = n0 + len(NUMBER_INDEX)
            for j in range(*ref.span):
                out[j, ref.entity_id] = self.margin
                out[j, t0 + TYPE_INDEX[ref.entity_type]] = self.margin
                out[j, g0 + GENDER_INDEX[ref.gender]] = self.margin
                out[j, n0 + NUMBER_INDEX[ref.number]] = self.margin
                for member in ref.members:
                    out[j, m0 + member] = self.margin
        return out


class SuppressedStage1:
    """Wraps a model but silences new-span detection in one chosen turn,
    simulating a stage-one failure to study downstream error propagation."""

    def __init__(self, base: TurnModel, turn_index: int, margin: float = 2.0):
        self.base = base
        self.turn_index = turn_index
        self.margin = margin

    def stage1_logits(self, r_rows, u_rows, context: TurnContext) -> np.ndarray:
        if context.turn_index == self.turn_index:
            return np.full((len(context.tokens), 2), -self.margin)
        return self.base.stage1_logits(r_rows, u_rows, context)

    def stage2_logits(self, r_aug, u_aug, context: TurnContext) -> np.ndarray:
        return self.base.stage2_logits(r_aug, u_aug, context)


# ---------------------------------------------------------------------------
# prediction records
# ---------------------------------------------------------------------------

def _pred_ref_to_obj(ref: PredictedReference) -> dict:
    return {
        "span": [ref.span[0], ref.span[1]],
        "entity_id": ref.entity_id,
        "is_new": ref.is_new,
        "type": ref.entity_type,
        "gender": ref.gender,
        "number": ref.number,
        "members": sorted(ref.members),
    }


def _pred_ref_from_obj(obj: dict) -> PredictedReference:
    return PredictedReference(
        span=(obj["span"][0], obj["span"][1]),
        entity_id=obj["entity_id"],
        is_new=obj["is_new"],
        entity_type=obj["type"],
        gender=obj["gender"],
        number=obj["number"],
        members=frozenset(obj["members"]),
    )


def predictions_to_obj(conversation_id: str,
                       predictions: Sequence[TurnPrediction]) -> dict:
    return {
        "conversation": conversation_id,
        "turns": [
            {
                "turn_index": p.turn_index,
                "refs": [_pred_ref_to_obj(r) for r in p.refs],
                "dropped_spans": [list(s) for s in p.dropped_spans],
                "dropped_refs": [_pred_ref_to_obj(r) for r in p.dropped_refs],
                "evicted_ids": list(p.evicted_ids),
            }
            for p in predictions
        ],
    }


def serialize_predictions(conversation_id: str,
                          predictions: Sequence[TurnPrediction]) -> str:
    return json.dumps(predictions_to_obj(conversation_id, predictions),
                      separators=(",", ":"))


def parse_predictions(text: str) -> tuple[str, list[TurnPrediction]]:
    obj = json.loads(text)
    predictions = [
        TurnPrediction(
            turn_index=t["turn_index"],
            refs=tuple(_pred_ref_from_obj(r) for r in t["refs"]),
            dropped_spans=tuple((s[0], s[1]) for s in t["dropped_spans"]),
            dropped_refs=tuple(_pred_ref_from_obj(r) for r in t["dropped_refs"]),
            evicted_ids=tuple(t["evicted_ids"]),
        )
        for t in obj["turns"]
    ]
    return obj["conversation"], predictions
