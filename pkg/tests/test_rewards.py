import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from reformulator.model import Trajectory
from reformulator.rewards import (
    BowIntentClassifier,
    ConstantEnvironment,
    HierLabel,
    ICEnvironment,
    ICRecord,
    QAEnvironment,
    QARecord,
    composite_reward,
    env_answer,
    fluency_reward,
    ic_reward,
    load_ic_corpus,
    load_qa_corpus,
    save_ic_corpus,
    save_qa_corpus,
    token_f1,
)

words = st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=6).map(" ".join)


def test_f1_examples():
    assert token_f1("nobel prize", "nobel") == 2 / 3
    assert token_f1("nobel prize", "nobel prize") == 1.0
    assert token_f1("a b", "c d") == 0.0
    assert token_f1("a", "") == 0.0


@given(words, words)
def test_f1_symmetric_and_bounded(a, b):
    f = token_f1(a, b)
    assert 0.0 <= f <= 1.0
    assert f == pytest.approx(token_f1(b, a))


def test_fluency_reward():
    assert fluency_reward([math.log(0.5), math.log(0.5)]) == pytest.approx(1 / (1 + math.log(2)), abs=1e-12)
    assert fluency_reward(Trajectory([4, 2], [0.0, 0.0])) == 1.0
    with pytest.raises(ValueError):
        fluency_reward([])


@given(st.lists(st.floats(-50, 0), min_size=1, max_size=10))
def test_fluency_in_unit_interval(lps):
    assert 0.0 < fluency_reward(lps) <= 1.0


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 10))
def test_composite_reward_bounded(r, f, w):
    c = composite_reward(r, f, w)
    assert min(r, f) - 1e-12 <= c <= max(r, f) + 1e-12


def test_composite_rejects_negative_weight():
    with pytest.raises(ValueError):
        composite_reward(0.5, 0.5, -1)


@pytest.mark.parametrize(
    "pred,gold,value",
    [("acct/open", "acct/open", 1.0), ("acct/close", "acct/open", 0.5), ("card/open", "acct/open", 0.0), ("card/close", "acct/open", 0.0)],
)
def test_ic_truth_table(pred, gold, value):
    assert ic_reward(pred, gold) == value
    assert ic_reward(HierLabel.parse(pred), HierLabel.parse(gold)) == value


def test_hier_label_parse():
    assert HierLabel.parse("a/b") == HierLabel("a", "b")
    assert str(HierLabel("a", "b")) == "a/b"
    with pytest.raises(ValueError):
        HierLabel("")


def qa_record():
    return QARecord("q1", "who invented the telephone", "bell", "the telephone was invented by bell in boston")


def test_qa_record_validation():
    with pytest.raises(ValueError):
        QARecord("x", "q", "", "ctx")
    with pytest.raises(ValueError):
        QARecord("x", "q", "paris", "the city of lyon")


def test_env_trigger_changes_answer():
    rec = qa_record()
    assert env_answer("telephone invented", rec) != "bell"
    assert env_answer("telephone invented name", rec) == "bell"
    env = QAEnvironment([rec])
    assert env.reward("telephone invented name", "q1") == 1.0
    assert env.reward("telephone invented place", "q1") == 0.0


def test_env_deterministic_and_unknown_qid(caplog):
    env = QAEnvironment([qa_record()])
    assert env.reward("who invented", "q1") == env.reward("who invented", "q1")
    assert env.reward("x", "nope") == 0.0
    assert "nope" in caplog.text


def test_qa_corpus_round_trip(tmp_path):
    recs = [qa_record()]
    save_qa_corpus(recs, tmp_path / "qa.jsonl")
    assert load_qa_corpus(tmp_path / "qa.jsonl") == recs
    (tmp_path / "qa.tsv").write_text("q2\twho\tbell\tby bell\n")
    assert load_qa_corpus(tmp_path / "qa.tsv")[0].answer == "bell"
    (tmp_path / "bad.tsv").write_text("q2\twho\n")
    with pytest.raises(ValueError):
        load_qa_corpus(tmp_path / "bad.tsv")


def _ic_data():
    texts = ["open account", "close account", "open card", "close card", "account status", "card status"] * 5
    labels = ["acct/open", "acct/close", "card/open", "card/close", "acct/status", "card/status"] * 5
    return texts, labels


def test_bow_classifier_and_environment():
    texts, labels = _ic_data()
    clf = BowIntentClassifier().fit(texts, labels)
    assert str(clf.classify("please open my account")) == "acct/open"
    env = ICEnvironment(clf, {"a": "acct/open", "b": "card/close"})
    assert env.reward("open account", "a") == 1.0
    assert env.reward("close account", "a") == 0.5
    assert env.reward("close card", "a") == 0.0
    assert env.reward("open account", "missing") == 0.0


def test_bow_fallback_on_empty_and_unknown():
    texts, labels = _ic_data()
    clf = BowIntentClassifier().fit(texts, labels)
    assert clf.classify("") == clf.fallback
    assert clf.classify("zzz qqq") == clf.fallback
    with pytest.raises(RuntimeError):
        BowIntentClassifier().classify("x")


def test_ic_corpus_round_trip(tmp_path):
    recs = [ICRecord("1", "open account", HierLabel("acct", "open"))]
    save_ic_corpus(recs, tmp_path / "ic.jsonl")
    assert load_ic_corpus(tmp_path / "ic.jsonl") == recs


def test_constant_environment():
    assert ConstantEnvironment(0.25).reward("x", "y") == 0.25
    with pytest.raises(ValueError):
        ConstantEnvironment(2.0)
