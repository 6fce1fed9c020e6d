import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spancycle.errors import DataError
from spancycle.schema import (A2A, AS, SPECIAL_IDS, SPECIAL_TOKENS, TA, UNK_ID, GoldAnswer, GoldTuple, Vocab,
                              build_graph_labels, build_input, build_label_vectors, load_dataset, parse_record,
                              tokenize)

from util import FIXTURES

NER_I = "Please identify possible entities from the given text and determine their types"
ENT = {"ent": ["person", "location", "organization"]}


def test_special_token_ids_are_fixed():
    assert SPECIAL_TOKENS == ("[PAD]", "[I]", "[LM]", "[LR]", "[LC]", "[TL]", "[TP]", "[B]")
    assert [SPECIAL_IDS[t] for t in SPECIAL_TOKENS] == list(range(8))
    assert UNK_ID == 8
    v = Vocab(["Tom", "tom", "Paris"])
    assert v.itos[:9] == list(SPECIAL_TOKENS) + ["[UNK]"]
    assert v.id("TOM") == v.id("tom") and v.id("zzz") == UNK_ID


def test_tokenize_single_and_empty():
    seq = tokenize("Tom")
    assert seq.surface == ("Tom",) and seq.char_spans == ((0, 3),)
    assert len(tokenize("")) == 0


def test_tokenize_count_matches_whitespace_oracle():
    text = "Jerry Smith is a friend of Tom"
    assert len(tokenize(text)) == len(text.split()) == 7


def test_tokenize_splits_punctuation():
    assert tokenize("Tesla, Elon").surface == ("Tesla", ",", "Elon")


@given(st.text(max_size=60))
def test_tokenize_round_trip(text):
    seq = tokenize(text)
    assert seq.reconstruct() == text
    ends = [e for _, e in seq.char_spans]
    starts = [s for s, _ in seq.char_spans]
    assert all(e0 <= s1 for e0, s1 in zip(ends, starts[1:]))
    assert len(seq.tokens) == len(seq.surface) == len(seq.char_spans)


def test_layout_known_schema():
    inp = build_input(NER_I, ENT, "Jerry Smith is a friend of Tom", "ner")
    assert inp.rendered() == (
        "[I] Please identify possible entities from the given text and determine their types "
        "[LM] person [LM] location [LM] organization [TL] Jerry Smith is a friend of Tom")
    assert [a.kind for a in inp.anchors] == ["LM"] * 3
    for a in inp.anchors:
        assert inp.seq.tokens[a.position] == SPECIAL_IDS["[LM]"]


def test_layout_unknown_schema_uses_tp():
    inp = build_input(NER_I, None, "Jerry Smith is a friend of Tom", "ner")
    assert inp.rendered() == (
        "[I] Please identify possible entities from the given text and determine their types "
        "[TP] Jerry Smith is a friend of Tom")
    assert inp.anchors == () and inp.mode == "TP"


def test_layout_cls_with_empty_instruction():
    inp = build_input("", {"cls": ["correct", "wrong"]}, "Paris is in France", "cls")
    assert inp.rendered() == "[I] [LC] correct [LC] wrong [B] Paris is in France"
    assert [a.kind for a in inp.anchors] == ["LC", "LC"]


def test_layout_is_deterministic():
    a = build_input("x", ENT, "Tom met Bob", "ner")
    b = build_input("x", ENT, "Tom met Bob", "ner")
    assert a == b


@pytest.mark.parametrize("kwargs, message", [
    (dict(schema=ENT, task="pos"), "unknown task"),
    (dict(schema={"ent": ["per[LM]son"]}, task="ner"), "reserved"),
    (dict(schema=ENT, task="re"), "requires"),
    (dict(schema={"ent": ["a", "a"]}, task="ner"), "duplicate"),
])
def test_build_input_errors(kwargs, message):
    with pytest.raises(DataError, match=message):
        build_input("go", text="Tom", **kwargs)


def test_empty_text_and_overlength_are_errors():
    with pytest.raises(DataError, match="empty"):
        build_input("go", ENT, "   ", "ner")
    with pytest.raises(DataError, match="max_len"):
        build_input("go", ENT, "a " * 20, "ner", max_len=16)


def _tom():
    inp = build_input("", {"ent": ["person"]}, "Tom", "ner")
    return inp, inp.anchors[0].position, inp.text_start


def test_graph_labels_single_token():
    inp, a, p = _tom()
    G = build_graph_labels(inp, GoldAnswer("ner", (GoldTuple("person", ((p, p),)),)))
    assert G[TA, a, p] == 1 and G[TA, p, a] == 1 and G[AS, p, p] == 1
    assert G.sum() == 3


def test_label_vectors_single_token():
    inp, a, p = _tom()
    L = build_label_vectors(inp, GoldAnswer("ner", (GoldTuple("person", ((p, p),)),)))
    expected_ta = np.zeros(len(inp))
    expected_ta[[a, p]] = 1
    expected_as = np.zeros(len(inp))
    expected_as[p] = 1
    np.testing.assert_array_equal(L[TA], expected_ta)
    np.testing.assert_array_equal(L[AS], expected_as)
    np.testing.assert_array_equal(L[A2A], np.zeros(len(inp)))


def test_label_vectors_empty_gold():
    inp, _, _ = _tom()
    assert not build_label_vectors(inp, GoldAnswer("ner")).any()


def _by_text(inp, word):
    return inp.text_start + list(inp.text_seq.surface).index(word)


def test_graph_labels_nested():
    inst = load_dataset(FIXTURES / "ner_nested.jsonl")[0]
    inp = inst.input
    G = build_graph_labels(inp, inst.gold)
    title = inp.anchor_for("title").position
    apple, ceo = _by_text(inp, "Apple"), _by_text(inp, "CEO")
    assert G[TA, title, apple] == 1 and G[TA, ceo, title] == 1 and G[AS, apple, ceo] == 1


def test_graph_labels_discontinuous():
    inst = load_dataset(FIXTURES / "ner_discontinuous.jsonl")[0]
    inp = inst.input
    G = build_graph_labels(inp, inst.gold)
    person = inp.anchor_for("person").position
    ceo, tesla, elon, musk = (_by_text(inp, w) for w in ("CEO", "Tesla", "Elon", "Musk"))
    assert G[TA, person, ceo] == 1
    assert G[AS, ceo, tesla] == 1
    assert G[A2A, tesla, elon] == 1
    assert G[AS, elon, musk] == 1
    assert G[TA, musk, person] == 1
    assert G[A2A].sum() == 1


def test_cls_keep_vector_marks_anchor_not_label_text():
    inst = load_dataset(FIXTURES / "cls.jsonl")[0]
    inp = inst.input
    L = build_label_vectors(inp, inst.gold)
    correct = inp.anchor_for("correct")
    assert L[TA, correct.position] == 1
    assert L[TA, correct.label_span[0]] == 0
    assert L[TA, inp.anchor_for("wrong").position] == 0
    # the mode token closes the class loop and is marked as well
    assert L[TA, inp.mode_position] == 1 and L[AS, inp.mode_position] == 1
    assert L[:, inp.text_start:].sum() == 0


ALL_FIXTURES = ["ner_flat", "ner_nested", "ner_discontinuous", "re", "ee", "absa", "cls", "mrc", "mixed",
                "multimodal"]


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_label_graph_consistency(name):
    for inst in load_dataset(FIXTURES / f"{name}.jsonl"):
        inp = inst.input
        G = build_graph_labels(inp, inst.gold)
        L = build_label_vectors(inp, inst.gold)
        assert set(np.unique(G)) <= {0.0, 1.0} and set(np.unique(L)) <= {0.0, 1.0}
        anchors = {a.position for a in inp.anchors} | {inp.mode_position}
        text = set(inp.text_positions())
        for r, i, j in zip(*np.nonzero(G)):
            assert L[r, i] == 1 and L[r, j] == 1
            assert {int(i), int(j)} <= text | anchors | set(inp.trigger_positions())
        for i, j in zip(*np.nonzero(G[AS])):
            assert i <= j
        for a in inp.anchors:
            s, e = a.label_span
            assert not L[:, s:e].any()


def test_unknown_schema_has_no_anchors():
    for inst in load_dataset(FIXTURES / "mrc.jsonl"):
        assert inst.input.anchors == () and inst.input.mode == "TP"


def test_load_dataset_one_line(tmp_path):
    path = tmp_path / "one.jsonl"
    path.write_text((FIXTURES / "ner_flat.jsonl").read_text().splitlines()[0] + "\n")
    assert len(load_dataset(path)) == 1


def test_load_dataset_span_out_of_range():
    with pytest.raises(DataError, match="line 1"):
        load_dataset(FIXTURES / "bad_span.jsonl")


def test_load_dataset_mixed_tasks():
    data = load_dataset(FIXTURES / "mixed.jsonl")
    assert [x.input.task for x in data] == ["ner", "re", "ner"]


def test_load_dataset_reports_bad_json_and_duplicates(tmp_path):
    good = (FIXTURES / "ner_flat.jsonl").read_text().splitlines()[0]
    path = tmp_path / "bad.jsonl"
    path.write_text(good + "\n{not json\n")
    with pytest.raises(DataError, match="line 2"):
        load_dataset(path)
    path.write_text(good + "\n\n" + good + "\n")
    with pytest.raises(DataError, match="line 3: duplicate"):
        load_dataset(path)


def test_misaligned_span_is_an_error():
    rec = json.loads((FIXTURES / "ner_flat.jsonl").read_text().splitlines()[0])
    rec["answers"] = [{"label": "person", "spans": [[1, 5]]}]
    with pytest.raises(DataError, match="token boundaries"):
        parse_record(rec)


def test_label_outside_schema_is_an_error():
    rec = json.loads((FIXTURES / "ner_flat.jsonl").read_text().splitlines()[0])
    rec["answers"][0]["label"] = "animal"
    with pytest.raises(DataError, match="not in the schema"):
        parse_record(rec)


def test_load_dataset_leaves_file_untouched():
    path = FIXTURES / "mixed.jsonl"
    before = path.read_bytes()
    load_dataset(path)
    assert path.read_bytes() == before
