"""Corpus parsing, validation, statistics, augmentation and splitting."""

import json
import logging

import pytest

from conftest import VACATION_RECORD, vacation_line
from corpusgen import make_corpus
from turntrack.corpus import (CorpusParseError, CorpusValidationError,
                              augment_names, compute_stats, load_corpus,
                              parse_corpus, save_corpus, serialize_corpus,
                              split_corpus, validate_conversation)


def record(**overrides):
    obj = json.loads(vacation_line())
    obj.update(overrides)
    return obj


def parse_one(obj):
    return parse_corpus(json.dumps(obj))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def test_parse_vacation(vacation_conversation):
    conv = vacation_conversation
    assert conv.id == "vacation01"
    assert conv.participants == ("alice", "bob")
    assert len(conv.turns) == 2
    assert conv.turns[0].tokens[2] == "mom"
    refs = conv.turns[1].refs
    assert [r.entity_id for r in refs] == [5, 4, 3]
    assert refs[0].members == frozenset({2, 3})
    assert conv.max_entity_id() == 5
    assert conv.span_text(1, refs[2]) == ("pops",)


def test_parse_lowercases_text():
    obj = record()
    obj["participants"] = ["Alice", "BOB"]
    obj["turns"][0]["tokens"][2] = "Mom"
    obj["turns"][0]["sender"] = "ALICE"
    conv = parse_one(obj)[0]
    assert conv.participants == ("alice", "bob")
    assert conv.turns[0].tokens[2] == "mom"
    assert conv.turns[0].sender == "alice"


def test_parse_sorts_refs_by_span():
    obj = record()
    obj["turns"][1]["refs"] = list(reversed(obj["turns"][1]["refs"]))
    conv = parse_one(obj)[0]
    assert [r.span for r in conv.turns[1].refs] == [(0, 1), (3, 4), (5, 6)]


def test_parse_skips_blank_lines():
    text = "\n" + vacation_line() + "\n\n"
    assert len(parse_corpus(text)) == 1


def test_parse_accepts_bytes_and_streams(tmp_path):
    data = vacation_line().encode()
    assert len(parse_corpus(data)) == 1
    path = tmp_path / "c.jsonl"
    path.write_bytes(data)
    assert len(load_corpus(path)) == 1


def test_parse_rejects_bad_json():
    with pytest.raises(CorpusParseError, match="line 1"):
        parse_corpus("{not json")


def test_parse_rejects_missing_field():
    obj = record()
    del obj["scenario_id"]
    with pytest.raises(CorpusParseError, match="scenario_id"):
        parse_one(obj)


def test_parse_rejects_unknown_field_strict():
    obj = record(extra=1)
    with pytest.raises(CorpusParseError, match="extra"):
        parse_one(obj)


def test_parse_allows_unknown_field_lenient(caplog):
    obj = record(extra=1)
    with caplog.at_level(logging.WARNING, logger="turntrack.corpus"):
        convs = parse_corpus(json.dumps(obj), strict=False)
    assert len(convs) == 1
    assert "extra" in caplog.text


def test_parse_rejects_bad_span_shape():
    obj = record()
    obj["turns"][0]["refs"][0]["span"] = [2]
    with pytest.raises(CorpusParseError, match="span"):
        parse_one(obj)


def test_parse_rejects_bad_enum_values():
    for field, value in (("type", "animal"), ("gender", "f"), ("number", "two")):
        obj = record()
        obj["turns"][0]["refs"][0][field] = value
        with pytest.raises(CorpusParseError, match=field):
            parse_one(obj)


def test_roundtrip_serialization(vacation_conversation):
    text = serialize_corpus([vacation_conversation])
    again = parse_corpus(text)
    assert again == [vacation_conversation]


def test_save_and_load(tmp_path, vacation_conversation):
    path = tmp_path / "corpus.jsonl"
    save_corpus([vacation_conversation], path)
    assert load_corpus(path) == [vacation_conversation]


# ---------------------------------------------------------------------------
# validation invariants
# ---------------------------------------------------------------------------

def expect_invariant(obj, invariant):
    with pytest.raises(CorpusValidationError) as err:
        parse_one(obj)
    assert err.value.invariant == invariant


def test_invariant_participants_distinct():
    obj = record(participants=["alice", "alice"])
    obj["turns"][1]["sender"] = "alice"
    expect_invariant(obj, "participants-distinct")


def test_invariant_handle_whitespace():
    obj = record(participants=["al ice", "bob"])
    expect_invariant(obj, "handle-whitespace")


def test_invariant_quality_range():
    expect_invariant(record(quality=9), "quality-range")


def test_invariant_sender_not_participant():
    obj = record()
    obj["turns"][0]["sender"] = "carol"
    expect_invariant(obj, "sender-not-participant")


def test_invariant_empty_turn():
    obj = record()
    obj["turns"][1] = {"sender": "bob", "tokens": [], "refs": []}
    expect_invariant(obj, "empty-turn")


def test_invariant_token_empty():
    obj = record()
    obj["turns"][0]["tokens"][0] = ""
    expect_invariant(obj, "token-empty")


def test_invariant_token_whitespace():
    obj = record()
    obj["turns"][0]["tokens"][0] = "a b"
    expect_invariant(obj, "token-whitespace")


def test_invariant_end_after_start():
    obj = record()
    obj["turns"][0]["refs"][0]["span"] = [2, 2]
    expect_invariant(obj, "end-after-start")


def test_invariant_span_bounds():
    obj = record()
    obj["turns"][0]["refs"][2]["span"] = [9, 12]
    expect_invariant(obj, "span-bounds")


def test_invariant_span_overlap():
    obj = record()
    obj["turns"][0]["refs"][0]["span"] = [2, 5]
    expect_invariant(obj, "span-overlap")


def test_invariant_members_require_plural():
    obj = record()
    obj["turns"][1]["refs"][0]["members"] = []
    expect_invariant(obj, "members-require-plural")
    obj = record()
    obj["turns"][0]["refs"][0]["members"] = [3]
    expect_invariant(obj, "members-require-plural")


def test_invariant_member_not_introduced():
    obj = record()
    obj["turns"][1]["refs"][0]["members"] = [2, 7]
    expect_invariant(obj, "member-not-introduced")


def test_invariant_participant_first_mention():
    obj = record()
    obj["turns"][0]["refs"][0]["entity_id"] = 1
    obj["turns"][0]["refs"][0]["is_new"] = True
    expect_invariant(obj, "participant-first-mention")


def test_invariant_id_order_of_first_mention():
    obj = record()
    obj["turns"][0]["refs"][0]["entity_id"] = 3
    expect_invariant(obj, "id-order-of-first-mention")


def test_invariant_reference_before_introduction():
    obj = record()
    obj["turns"][1]["refs"][2]["entity_id"] = 9
    expect_invariant(obj, "reference-before-introduction")


def test_validate_accepts_good_conversation(vacation_conversation):
    validate_conversation(vacation_conversation)


# ---------------------------------------------------------------------------
# statistics (hand-counted on the vacation fixture)
# ---------------------------------------------------------------------------

def test_stats_hand_counted(vacation_conversation):
    stats = compute_stats([vacation_conversation])
    assert stats.num_conversations == 1
    assert stats.num_turns == 2
    assert stats.total_tokens == 11 + 12
    assert stats.mean_tokens_per_turn == 23 / 2
    assert stats.turns_per_conversation_histogram == {2: 1}
    assert stats.entities_per_turn_histogram == {3: 2}
    assert stats.reference_span_counts == {
        "mom": 1, "dad": 1, "paris": 1, "they": 1, "there": 1, "pops": 1}
    # all counts tie at 1, so ranking falls back to alphabetical
    assert stats.top_reference_spans(3) == [("dad", 1), ("mom", 1), ("paris", 1)]


def test_stats_empty():
    stats = compute_stats([])
    assert stats.num_turns == 0
    assert stats.mean_tokens_per_turn == 0.0


# ---------------------------------------------------------------------------
# name augmentation
# ---------------------------------------------------------------------------

POOL = ["vera", "wade", "xena", "yuri", "zora"]


def test_augment_replaces_consistently():
    corpus = make_corpus(4, seed=11)
    out = augment_names(corpus, POOL, seed=3)
    assert len(out) == len(corpus)
    for before, after in zip(corpus, out):
        validate_conversation(after)
        chosen = {}
        for ti, turn in enumerate(after.turns):
            assert turn.sender in after.participants
            for ref in turn.refs:
                if ref.entity_type == "person" and ref.proper_name:
                    text = after.span_text(ti, ref)
                    assert all(t in POOL for t in text)
                    chosen.setdefault(ref.entity_id, text)
                    assert chosen[ref.entity_id] == text
        # distinct people got distinct pool names
        assert len(set(chosen.values())) == len(chosen)
        # non-name tokens are untouched
        for bt, at in zip(before.turns, after.turns):
            named = {j for ref in bt.refs if ref.proper_name
                     and ref.entity_type == "person"
                     for j in range(ref.span[0], ref.span[1])}
            for j, tok in enumerate(bt.tokens):
                if j not in named:
                    assert at.tokens[j] == tok


def test_augment_deterministic():
    corpus = make_corpus(3, seed=5)
    assert augment_names(corpus, POOL, seed=7) == augment_names(corpus, POOL, seed=7)
    assert augment_names(corpus, POOL, seed=7) != augment_names(corpus, POOL, seed=8)


def test_augment_leaves_nameless_conversation_alone(vacation_conversation):
    # mom/dad are not proper names and paris is a location, so nothing changes
    out = augment_names([vacation_conversation], POOL, seed=0)
    assert out == [vacation_conversation]


def test_augment_rejects_bad_pool():
    corpus = make_corpus(1, seed=0)
    with pytest.raises(ValueError):
        augment_names(corpus, [], seed=0)
    with pytest.raises(ValueError):
        augment_names(corpus, ["Vera"], seed=0)
    with pytest.raises(ValueError):
        augment_names(corpus, ["two words"], seed=0)


def test_augment_pool_too_small():
    corpus = make_corpus(1, seed=0)
    # one name cannot cover two distinct people without a collision
    with pytest.raises(ValueError, match="non-colliding"):
        augment_names(corpus, ["vera"], seed=0)


# ---------------------------------------------------------------------------
# scenario-grouped splitting
# ---------------------------------------------------------------------------

def test_split_scenarios_disjoint():
    corpus = make_corpus(20, seed=2)
    train, eval_set = split_corpus(corpus, 0.3, seed=0)
    assert len(train) + len(eval_set) == len(corpus)
    train_sc = {c.scenario_id for c in train}
    eval_sc = {c.scenario_id for c in eval_set}
    assert not (train_sc & eval_sc)
    assert len(eval_set) >= 0.3 * len(corpus)
    assert train  # never empties the training side


def test_split_deterministic():
    corpus = make_corpus(12, seed=2)
    assert split_corpus(corpus, 0.25, seed=9) == split_corpus(corpus, 0.25, seed=9)


def test_split_rejects_bad_fraction():
    corpus = make_corpus(4, seed=0)
    for frac in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            split_corpus(corpus, frac, seed=0)


def test_split_needs_two_scenarios(vacation_conversation):
    with pytest.raises(ValueError, match="scenario"):
        split_corpus([vacation_conversation], 0.5, seed=0)
