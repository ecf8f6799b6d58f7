import numpy as np

from reformulator.rewards import BowIntentClassifier, ICEnvironment, QAEnvironment
from reformulator.synthetic import (
    KEYWORDS,
    NOISE_OPS,
    TYPE_KEYWORD,
    damage,
    ic_records,
    identity_pairs,
    qa_answer_type,
    qa_records,
    random_question,
    rated_queries,
    reformulation_pairs,
    synonym_swap,
)
from reformulator.wellformedness import RATINGS


def test_generators_are_seeded():
    assert qa_records(20, seed=3) == qa_records(20, seed=3)
    assert rated_queries(20, seed=3) == rated_queries(20, seed=3)
    assert reformulation_pairs(20, seed=3) == reformulation_pairs(20, seed=3)
    assert identity_pairs(20, seed=3) == identity_pairs(20, seed=3)


def test_keyword_qa_fixture_has_known_optimum():
    recs = qa_records(300, seed=0)
    env = QAEnvironment(recs)
    assert all(env.reward(r.question, r.qid) == 0.0 for r in recs)
    assert all(env.reward(r.question + " " + TYPE_KEYWORD[qa_answer_type(r)], r.qid) == 1.0 for r in recs)
    for r in recs[:50]:
        wrong = [k for k in KEYWORDS if k != TYPE_KEYWORD[qa_answer_type(r)]]
        assert env.reward(r.question + " " + wrong[0], r.qid) == 0.0


def test_identity_vocab_size():
    pairs = identity_pairs(500, vocab_size=150)
    assert len({t for s, _ in pairs for t in s.split()}) <= 150
    assert all(s == t for s, t in pairs)


def test_rated_corpus_covers_all_classes():
    data = rated_queries(600, seed=0)
    assert {q.rating for q in data} == set(RATINGS)
    clean = [q for q in data if q.text.endswith("?") and q.text.split()[2] == "the"]
    assert np.mean([q.rating for q in clean]) > np.mean([q.rating for q in data])


def test_damage_ops_are_distinct():
    rng = np.random.default_rng(0)
    q = random_question(rng)
    outs = {damage(q, {op}, np.random.default_rng(1)) for op in NOISE_OPS}
    assert len(outs) == len(NOISE_OPS) and q.text() not in outs
    assert damage(q, set(), rng) == q.text()


def test_ic_world_classifier_and_synonyms():
    recs = ic_records(600, seed=0)
    clf = BowIntentClassifier().fit([r.text for r in recs], [r.label for r in recs])
    env = ICEnvironment(clf, {r.qid: r.label for r in recs})
    test = ic_records(200, seed=1, prefix="t")
    env_t = ICEnvironment(clf, {r.qid: r.label for r in test})
    assert np.mean([env_t.reward(r.text, r.qid) for r in test]) > 0.9
    rng = np.random.default_rng(0)
    swapped = synonym_swap("open account", rng)
    assert swapped != "open account" and len(swapped.split()) == 2
    assert {env.reward(r.text, r.qid) for r in recs} <= {0.0, 0.5, 1.0}
