"""Shared test fixtures.

The central fixture is a hand-annotated two-turn conversation between alice
and bob about their parents' vacation.  It exercises every annotation
feature at once: named people, a proper-name location, a plural group with
members, and later-turn references back to existing entities ("there" to
paris, "pops" to dad).
"""

import json
from fractions import Fraction

import pytest

from turntrack.corpus import parse_corpus
from turntrack.encoding import Encoder, FeatureLayout
from turntrack.inference import PredictedReference, TurnPrediction

VACATION_RECORD = {
    "id": "vacation01",
    "scenario_id": "vacation",
    "participants": ["alice", "bob"],
    "quality": 5,
    "turns": [
        {
            "sender": "alice",
            "tokens": ["how", "did", "mom", "and", "dad", "like", "the",
                       "vacation", "in", "paris", "?"],
            "refs": [
                {"span": [2, 3], "entity_id": 2, "is_new": True,
                 "type": "person", "gender": "female", "number": "singular",
                 "members": [], "proper_name": False},
                {"span": [4, 5], "entity_id": 3, "is_new": True,
                 "type": "person", "gender": "male", "number": "singular",
                 "members": [], "proper_name": False},
                {"span": [9, 10], "entity_id": 4, "is_new": True,
                 "type": "location", "gender": "unknown", "number": "singular",
                 "members": [], "proper_name": True},
            ],
        },
        {
            "sender": "bob",
            "tokens": ["they", "loved", "it", "there", ".", "pops", "did",
                       "not", "want", "to", "leave", "."],
            "refs": [
                {"span": [0, 1], "entity_id": 5, "is_new": True,
                 "type": "person", "gender": "unknown", "number": "plural",
                 "members": [2, 3], "proper_name": False},
                {"span": [3, 4], "entity_id": 4, "is_new": False,
                 "type": "location", "gender": "unknown", "number": "singular",
                 "members": [], "proper_name": False},
                {"span": [5, 6], "entity_id": 3, "is_new": False,
                 "type": "person", "gender": "male", "number": "singular",
                 "members": [], "proper_name": False},
            ],
        },
    ],
}


def vacation_line() -> str:
    return json.dumps(VACATION_RECORD)


@pytest.fixture
def vacation_conversation():
    return parse_corpus(vacation_line())[0]


@pytest.fixture
def small_layout():
    return FeatureLayout(capacity=8, history=4, word_dim=8, context_dim=8)


@pytest.fixture
def small_encoder(small_layout):
    return Encoder(small_layout)


# ---------------------------------------------------------------------------
# hand-counted metric fixture
#
# Two short conversations with hand-built predictions whose endpoint counts
# were tallied by hand.  Every error class appears once: a missed new
# entity, a spurious new span, a wrong existing ID, an extra old prediction,
# a wrong property slot and a half-right membership set.
# ---------------------------------------------------------------------------

def _pred(span, entity_id, is_new, etype="person", gender="unknown",
          number="singular", members=()):
    return PredictedReference(span=span, entity_id=entity_id, is_new=is_new,
                              entity_type=etype, gender=gender, number=number,
                              members=frozenset(members))


METRIC_RECORD_A = {
    "id": "handcount-a", "scenario_id": "hand-a",
    "participants": ["ann", "ben"], "quality": 5,
    "turns": [
        {"sender": "ann",
         "tokens": ["um", "alice", "and", "bob", "came"],
         "refs": [
             {"span": [1, 2], "entity_id": 2, "is_new": True,
              "type": "person", "gender": "female", "number": "singular",
              "members": [], "proper_name": True},
             {"span": [3, 4], "entity_id": 3, "is_new": True,
              "type": "person", "gender": "male", "number": "singular",
              "members": [], "proper_name": True},
         ]},
        {"sender": "ben",
         "tokens": ["they", "left"],
         "refs": [
             {"span": [0, 1], "entity_id": 4, "is_new": True,
              "type": "person", "gender": "unknown", "number": "plural",
              "members": [2, 3], "proper_name": False},
         ]},
        {"sender": "ann",
         "tokens": ["she", "stayed"],
         "refs": [
             {"span": [0, 1], "entity_id": 2, "is_new": False,
              "type": "person", "gender": "female", "number": "singular",
              "members": [], "proper_name": False},
         ]},
    ],
}

METRIC_RECORD_B = {
    "id": "handcount-b", "scenario_id": "hand-b",
    "participants": ["cal", "dee"], "quality": 4,
    "turns": [
        {"sender": "cal",
         "tokens": ["i", "visited", "rome", "."],
         "refs": [
             {"span": [2, 3], "entity_id": 2, "is_new": True,
              "type": "location", "gender": "unknown", "number": "singular",
              "members": [], "proper_name": True},
         ]},
        {"sender": "dee",
         "tokens": ["wow", "there", "!"],
         "refs": [
             {"span": [1, 2], "entity_id": 2, "is_new": False,
              "type": "location", "gender": "unknown", "number": "singular",
              "members": [], "proper_name": False},
         ]},
    ],
}


def hand_metric_fixture():
    """(conversations, predictions per conversation, exact expected rates)."""
    convs = parse_corpus("\n".join(
        json.dumps(r) for r in (METRIC_RECORD_A, METRIC_RECORD_B)))
    preds_a = [
        TurnPrediction(0, refs=(
            _pred((0, 1), 5, True),                       # spurious new span
            _pred((1, 2), 2, True, gender="female"),      # alice found
        )),                                               # bob missed
        TurnPrediction(1, refs=(
            _pred((0, 1), 4, True, number="plural", members={2}),
        )),                                               # half the group
        TurnPrediction(2, refs=(
            _pred((0, 1), 2, False, gender="female"),     # she resolved
        )),
    ]
    preds_b = [
        TurnPrediction(0, refs=(
            _pred((2, 3), 2, True),                       # rome, wrong type
        )),
        TurnPrediction(1, refs=(
            _pred((0, 1), 3, False, etype="location"),    # extra old ref
            _pred((1, 2), 3, False, etype="location"),    # there, wrong ID
        )),
    ]
    # hand tally: new tp3 fp1 fn1; existing tp1 fp2 fn1;
    # properties tp14 fp1 fn1; membership tp1 fp0 fn1
    expected = {
        "new_entities": (Fraction(3, 4), Fraction(3, 4), Fraction(3, 4)),
        "existing_id": (Fraction(1, 3), Fraction(1, 2), Fraction(2, 5)),
        "properties": (Fraction(14, 15), Fraction(14, 15), Fraction(14, 15)),
        "membership": (Fraction(1, 1), Fraction(1, 2), Fraction(2, 3)),
    }
    return convs, [preds_a, preds_b], expected
