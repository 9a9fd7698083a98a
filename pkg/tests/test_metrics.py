import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longtail_qa.metrics import (aggregate, bleu, f1_token_overlap, map_to_option,
                                 rouge_l, score_prediction, write_score_csv)
from longtail_qa.tasks import TaskSpec, downsample_tasks
from longtail_qa.text import Vocab, normalize, serialize_instance, tokenize
from longtail_qa.tasks import QAInstance

WORDS = st.lists(st.sampled_from("cat dog sat the a ran blue".split()),
                 min_size=1, max_size=8).map(" ".join)


def test_normalize_and_tokenize():
    assert normalize("  The CAT, sat!  ") == "the cat sat"
    assert tokenize("Don't stop') me") == ["dont", "stop", "me"]
    assert tokenize("...") == []


def test_serialize_plain_and_choice():
    inst = QAInstance("t", "yes_no", "Water covers earth.", "Is water wet?",
                      "Yes", uid="t#0")
    pair = serialize_instance(inst)
    assert pair.target_text == "yes"
    assert pair.source_text == "is water wet?\nwater covers earth."

    mc = QAInstance("t", "multiple_choice", "ctx", "Pick one", "Y",
                    options=("X", "Y"), uid="t#1")
    src = serialize_instance(mc).source_text
    assert "(a) x (b) y" in src
    assert serialize_instance(mc) == serialize_instance(mc)


def test_f1_fixtures():
    assert f1_token_overlap("the cat", "the cat") == 1.0
    assert abs(f1_token_overlap("a cat sat", "the cat") - 0.4) < 1e-9
    assert f1_token_overlap("", "yes") == 0.0
    with pytest.raises(ValueError):
        f1_token_overlap("x", "")


@settings(max_examples=60, deadline=None)
@given(WORDS, WORDS)
def test_f1_symmetric_and_bounded(p, g):
    assert abs(f1_token_overlap(p, g) - f1_token_overlap(g, p)) < 1e-12
    assert 0.0 <= f1_token_overlap(p, g) <= 1.0


def test_rouge_fixture():
    assert abs(rouge_l("a b c", "a c") - 0.8) < 1e-9
    assert rouge_l("same words here", "same words here") == 1.0
    assert rouge_l("zzz", "a b") == 0.0


def test_bleu_fixtures():
    assert abs(bleu("the cat sat on mats", "the cat sat on mats") - 1.0) < 1e-9
    assert bleu("", "gold words") == 0.0
    assert bleu("unrelated", "gold words") == 0.0
    assert 0.0 < bleu("the cat sat down", "the cat sat on mats") < 1.0


def test_score_prediction_dispatch():
    assert score_prediction("accuracy", "B", "b") == 1.0
    assert score_prediction("accuracy", "  b ", "b") == 1.0
    assert score_prediction("f1_overlap", "a cat sat", "the cat") == pytest.approx(0.4)
    assert score_prediction("rouge_l", "a b c", "a c") == pytest.approx(0.8)
    with pytest.raises(ValueError):
        score_prediction("nope", "a", "b")


def test_accuracy_snaps_free_text_to_option():
    options = ("the red door", "a blue window")
    assert map_to_option("blue window please", options) == "a blue window"
    assert score_prediction("accuracy", "blue window", "a blue window",
                            options) == 1.0
    assert score_prediction("accuracy", "red door", "a blue window",
                            options) == 0.0
    # zero overlap leaves the prediction unmapped
    assert score_prediction("accuracy", "zzz", "a blue window", options) == 0.0


def _manifest():
    registry = [TaskSpec(f"t{i}", "extractive", "f1_overlap", 100 - 10 * i)
                for i in range(5)]
    return downsample_tasks(registry, 1.0, 64, seed=0,
                            unseen_task_ids=["t3", "t4"])


def test_aggregate_head_tail_and_means():
    m = _manifest()
    per_task = {"t0": 60.0, "t1": 40.0, "t2": 20.0, "t3": 10.0, "t4": 30.0}
    s = aggregate(per_task, m, m=1, n=1)
    assert s.head_at_m == 60.0            # t0 has the largest sample
    assert s.tail_at_n == 20.0            # t2 the smallest
    assert s.a_seen == pytest.approx(40.0)
    assert s.a_unseen == pytest.approx(20.0)


def test_aggregate_constant_scores():
    m = _manifest()
    per_task = {t: 50.0 for t in m.all_task_ids()}
    s = aggregate(per_task, m, m=2, n=2)
    assert s.a_seen == s.a_unseen == s.head_at_m == s.tail_at_n == 50.0


def test_aggregate_validation():
    m = _manifest()
    per_task = {t: 50.0 for t in m.all_task_ids()}
    with pytest.raises(ValueError):
        aggregate(per_task, m, m=4, n=1)
    with pytest.raises(ValueError):
        aggregate({"t0": 1.0}, m, m=1, n=1)


def test_score_csv(tmp_path):
    m = _manifest()
    per_task = {t: 50.0 for t in m.all_task_ids()}
    s = aggregate(per_task, m, m=1, n=1)
    out = tmp_path / "scores.csv"
    write_score_csv(out, s, m, {t: "f1_overlap" for t in m.all_task_ids()})
    text = out.read_text(encoding="utf-8")
    assert "a_seen" in text and "t0" in text and "unseen" in text


def test_vocab_roundtrip():
    v = Vocab.build(["the cat sat", "the dog ran"])
    ids = v.encode("the cat flew")
    assert ids[-1] == Vocab.UNK
    assert v.decode(v.encode("the cat")) == "the cat"
    assert len(Vocab.build(["a b c"], max_size=5)) == 5
