"""Scoring tracked conversations against gold annotation.

Four endpoints are scored with exact-span matching: detection of new
entities, ID resolution of references to existing entities, the three
property slots, and plural-group membership.  Because a tracker running
free may assign different (but internally consistent) IDs than the gold
annotation, scoring builds a gold-to-predicted ID correspondence from the
span-matched new-entity references as the conversation unfolds; under
teacher forcing the repository follows gold, so the correspondence is the
identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .corpus import Conversation, GoldReference
from .encoding import Encoder
from .inference import PredictedReference, TurnModel, TurnPrediction, track_conversation

ENDPOINTS = ("new_entities", "existing_id", "properties", "membership")


@dataclass
class EndpointMetrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, tp: int = 0, fp: int = 0, fn: int = 0) -> None:
        self.tp += tp
        self.fp += fp
        self.fn += fn

    def merge(self, other: "EndpointMetrics") -> None:
        self.add(other.tp, other.fp, other.fn)

    @property
    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 1.0 if self.fn == 0 else 0.0
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0 if self.fp == 0 else 0.0
        return self.tp / (self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        if p + r == 0.0:
            return 1.0 if self.tp + self.fp + self.fn == 0 else 0.0
        return 2.0 * p * r / (p + r)


@dataclass
class EvaluationResult:
    endpoints: dict[str, EndpointMetrics] = field(
        default_factory=lambda: {name: EndpointMetrics() for name in ENDPOINTS})
    num_conversations: int = 0
    num_turns: int = 0

    def merge(self, other: "EvaluationResult") -> None:
        for name in ENDPOINTS:
            self.endpoints[name].merge(other.endpoints[name])
        self.num_conversations += other.num_conversations
        self.num_turns += other.num_turns


class _IdentityMap:
    def get(self, key, default=None):
        return key

    def __setitem__(self, key, value):
        pass


def _pick_aligned(preds_at_span: list[PredictedReference],
                  gold: GoldReference) -> PredictedReference | None:
    if not preds_at_span:
        return None
    for p in preds_at_span:
        if p.is_new == gold.is_new:
            return p
    return preds_at_span[0]


def score_predictions(conv: Conversation, predictions: Sequence[TurnPrediction],
                      teacher_forcing: bool = False) -> EvaluationResult:
    """Score one conversation's predictions against its gold annotation."""
    if len(predictions) != len(conv.turns):
        raise ValueError(
            f"{len(predictions)} predictions for {len(conv.turns)} turns")
    result = EvaluationResult(num_conversations=1, num_turns=len(conv.turns))
    ep = result.endpoints
    mapping = _IdentityMap() if teacher_forcing else {0: 0, 1: 1}

    for turn, pred in zip(conv.turns, predictions):
        gold_new = [g for g in turn.refs if g.is_new]
        gold_old = [g for g in turn.refs if not g.is_new]
        pred_new = [p for p in pred.refs if p.is_new]
        pred_old = [p for p in pred.refs if not p.is_new]

        # Correspondence links come from this turn's span-matched new
        # entities, before any same-turn reference is scored.
        new_by_span = {p.span: p for p in pred_new}
        for g in gold_new:
            p = new_by_span.get(g.span)
            if p is not None:
                mapping[g.entity_id] = p.entity_id

        gold_new_spans = {g.span for g in gold_new}
        hit = sum(1 for g in gold_new if g.span in new_by_span)
        ep["new_entities"].add(
            tp=hit,
            fp=sum(1 for p in pred_new if p.span not in gold_new_spans),
            fn=len(gold_new) - hit)

        remaining: dict[tuple, list[PredictedReference]] = {}
        for p in pred_old:
            remaining.setdefault(p.span, []).append(p)
        for g in gold_old:
            bucket = remaining.get(g.span)
            if not bucket:
                ep["existing_id"].add(fn=1)
                continue
            p = bucket.pop(0)
            if not bucket:
                del remaining[g.span]
            if mapping.get(g.entity_id) == p.entity_id:
                ep["existing_id"].add(tp=1)
            else:
                ep["existing_id"].add(fp=1, fn=1)
        ep["existing_id"].add(fp=sum(len(b) for b in remaining.values()))

        by_span: dict[tuple, list[PredictedReference]] = {}
        for p in pred.refs:
            by_span.setdefault(p.span, []).append(p)
        for g in turn.refs:
            p = _pick_aligned(by_span.get(g.span, []), g)
            if p is None:
                continue
            for got, want in ((p.entity_type, g.entity_type),
                              (p.gender, g.gender), (p.number, g.number)):
                if got == want:
                    ep["properties"].add(tp=1)
                else:
                    ep["properties"].add(fp=1, fn=1)
            if g.members or p.members:
                mapped = set()
                unmappable = 0
                for member in g.members:
                    mm = mapping.get(member)
                    if mm is None:
                        unmappable += 1
                    else:
                        mapped.add(mm)
                ep["membership"].add(
                    tp=len(p.members & mapped),
                    fp=len(p.members - mapped),
                    fn=len(mapped - p.members) + unmappable)
    return result


def evaluate(model: TurnModel, encoder: Encoder, corpus: Sequence[Conversation],
             teacher_forcing: bool = False, strict: bool = True) -> EvaluationResult:
    """Track every conversation and accumulate endpoint scores."""
    total = EvaluationResult()
    for conv in corpus:
        predictions = track_conversation(
            model, encoder, conv, teacher_forcing=teacher_forcing, strict=strict)
        total.merge(score_predictions(conv, predictions, teacher_forcing))
    return total


def _ref_tracked(g: GoldReference, pred: TurnPrediction, mapping) -> bool:
    for p in pred.refs:
        if p.span == (g.span[0], g.span[1]) and p.is_new == g.is_new:
            return mapping.get(g.entity_id) == p.entity_id
    return False


def error_propagation_study(model: TurnModel, encoder: Encoder,
                            corpus: Sequence[Conversation], rows: int = 10,
                            strict: bool = True) -> list[dict]:
    """Per-turn tracking accuracy, teacher-forced versus free running.

    A gold reference counts as tracked when a same-span, same-newness
    prediction carries the right ID under the mode's correspondence.  Turns
    at index >= rows fold into the last row; rows with no gold references
    report None.  The teacher-forced column shows per-turn model quality
    with a clean context; the free column additionally pays for earlier
    mistakes, so the difference isolates error propagation.
    """
    correct = {"teacher_forced": [0] * rows, "free": [0] * rows}
    totals = [0] * rows
    for conv in corpus:
        for mode, forced in (("teacher_forced", True), ("free", False)):
            predictions = track_conversation(
                model, encoder, conv, teacher_forcing=forced, strict=strict)
            mapping = _IdentityMap() if forced else {0: 0, 1: 1}
            for ti, (turn, pred) in enumerate(zip(conv.turns, predictions)):
                row = min(ti, rows - 1)
                new_by_span = {p.span: p for p in pred.refs if p.is_new}
                for g in turn.refs:
                    if g.is_new and g.span in new_by_span:
                        mapping[g.entity_id] = new_by_span[g.span].entity_id
                for g in turn.refs:
                    if forced:
                        totals[row] += 1
                    if _ref_tracked(g, pred, mapping):
                        correct[mode][row] += 1
    out = []
    for row in range(rows):
        entry: dict = {"turn": row, "gold_refs": totals[row]}
        for mode in ("teacher_forced", "free"):
            entry[mode] = (correct[mode][row] / totals[row]
                           if totals[row] else None)
        entry["difference"] = (entry["teacher_forced"] - entry["free"]
                               if totals[row] else None)
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def render_metrics(result: EvaluationResult) -> str:
    lines = [
        f"conversations: {result.num_conversations}   turns: {result.num_turns}",
        f"{'endpoint':<14} {'P':>7} {'R':>7} {'F1':>7} {'tp':>6} {'fp':>6} {'fn':>6}",
    ]
    for name in ENDPOINTS:
        m = result.endpoints[name]
        lines.append(f"{name:<14} {m.precision:>7.3f} {m.recall:>7.3f} "
                     f"{m.f1:>7.3f} {m.tp:>6} {m.fp:>6} {m.fn:>6}")
    return "\n".join(lines)


def metrics_to_obj(result: EvaluationResult) -> dict:
    return {
        "num_conversations": result.num_conversations,
        "num_turns": result.num_turns,
        "endpoints": {
            name: {
                "tp": m.tp, "fp": m.fp, "fn": m.fn,
                "precision": m.precision, "recall": m.recall, "f1": m.f1,
            }
            for name, m in result.endpoints.items()
        },
    }


def render_propagation(rows: list[dict]) -> str:
    lines = [f"{'turn':<6} {'refs':>6} {'forced':>8} {'free':>8} {'diff':>8}"]
    for entry in rows:
        cells = []
        for key in ("teacher_forced", "free", "difference"):
            value = entry[key]
            cells.append("   -    " if value is None else f"{value:>8.3f}")
        lines.append(f"{entry['turn']:<6} {entry['gold_refs']:>6} "
                     + " ".join(cells))
    return "\n".join(lines)


def _describe_gold(g: GoldReference | None) -> str:
    if g is None:
        return "-"
    mark = "new" if g.is_new else "old"
    members = ("{" + ",".join(str(m) for m in sorted(g.members)) + "}"
               if g.members else "")
    return (f"{mark}#{g.entity_id} {g.entity_type}/{g.gender}/{g.number}"
            f"{members}")


def _describe_pred(p: PredictedReference | None) -> str:
    if p is None:
        return "-"
    mark = "new" if p.is_new else "old"
    members = ("{" + ",".join(str(m) for m in sorted(p.members)) + "}"
               if p.members else "")
    return (f"{mark}#{p.entity_id} {p.entity_type}/{p.gender}/{p.number}"
            f"{members}")


def per_token_report(conv: Conversation, predictions: Sequence[TurnPrediction]) -> str:
    """Token-level gold/predicted comparison for error analysis."""
    if len(predictions) != len(conv.turns):
        raise ValueError(
            f"{len(predictions)} predictions for {len(conv.turns)} turns")
    lines = []
    for ti, (turn, pred) in enumerate(zip(conv.turns, predictions)):
        lines.append(f"turn {ti} ({turn.sender}):")
        gold_at = {}
        for g in turn.refs:
            for j in range(g.span[0], g.span[1]):
                gold_at[j] = g
        pred_at = {}
        for p in pred.refs:
            for j in range(p.span[0], p.span[1]):
                pred_at.setdefault(j, p)
        for j, token in enumerate(turn.tokens):
            g, p = gold_at.get(j), pred_at.get(j)
            if g is None and p is None:
                continue
            gd, pd = _describe_gold(g), _describe_pred(p)
            flag = " " if _token_agrees(g, p) else "*"
            lines.append(f"  {flag} {j:>3} {token:<15} gold {gd:<32} pred {pd}")
        if pred.dropped_spans:
            lines.append(f"    dropped spans (capacity): {list(pred.dropped_spans)}")
        if pred.dropped_refs:
            ids = [r.entity_id for r in pred.dropped_refs]
            lines.append(f"    dropped refs (unknown ID): {ids}")
        if pred.evicted_ids:
            lines.append(f"    evicted from encoding: {list(pred.evicted_ids)}")
    return "\n".join(lines)


def _token_agrees(g: GoldReference | None, p: PredictedReference | None) -> bool:
    if g is None or p is None:
        return False
    return ((g.span[0], g.span[1]) == p.span and g.is_new == p.is_new
            and g.entity_type == p.entity_type and g.gender == p.gender
            and g.number == p.number)
