import zipfile

import numpy as np
import pytest

from reformulator.checkpoint import CheckpointError
from reformulator.rewards import BowIntentClassifier, ConstantEnvironment, ICEnvironment, QAEnvironment
from reformulator.synthetic import ic_records, qa_records, reformulation_pairs
from reformulator.text import build_vocab
from reformulator.training import (
    CURVE_COLUMNS,
    EpochRecord,
    RunLog,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    emit_curves,
    evaluate,
    mean_step_entropy,
    train_rl,
    train_supervised,
)

SMALL = dict(d=16, h=32, lr=1.0, batch_size=16, max_len=14, seed=0)


@pytest.fixture(scope="module")
def sft_model():
    pairs = reformulation_pairs(400, seed=0)
    model, log = train_supervised(TrainConfig(epochs=6, **SMALL), pairs)
    return model, log


@pytest.fixture(scope="module")
def qa_setup():
    recs = qa_records(96, seed=2)
    env = QAEnvironment(recs)
    queries = [(r.qid, r.question) for r in recs]
    return env, queries[:64], queries[64:]


def fresh(model):
    return type(model)(model.params.copy(), model.vocab, model.prefix, model.max_len)


def rl_config(**kw):
    base = dict(SMALL, rl_lr=0.1, epochs=2, patience=5)
    base.update(kw)
    return TrainConfig(**base)


class MemoryEnv:
    def __init__(self, gold):
        self.gold = gold

    def reward(self, text, qid):
        return 1.0 if text == self.gold[qid] else 0.0


class FlakyEnv:
    def __init__(self, inner, bad):
        self.inner, self.bad = inner, bad

    def reward(self, text, qid):
        if qid in self.bad:
            raise RuntimeError("backend down")
        return self.inner.reward(text, qid)


# -- config and run log -------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError, match="PG, AC, SC, UL, MIXED"):
        TrainConfig(algorithm="PPO")
    with pytest.raises(ValueError, match="critic_lr"):
        TrainConfig(algorithm="AC", critic_lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(temperature=0)
    with pytest.raises(ValueError):
        TrainConfig(algorithm="MIXED", mixed_weights=(1.0,))
    assert TrainConfig().max_len == 50 and TrainConfig().patience == 5


def test_runlog_epochs_increase():
    log = RunLog()
    log.add(EpochRecord(1, "train", 0, 0, 0, 0, 0))
    log.add(EpochRecord(1, "dev", 0, 0, 0, 0, 0))
    with pytest.raises(ValueError):
        log.add(EpochRecord(1, "train", 0, 0, 0, 0, 0))


def test_curves_header_only_for_empty_log(tmp_path):
    emit_curves(RunLog(), tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == ",".join(CURVE_COLUMNS) + "\n"
    assert CURVE_COLUMNS == ("epoch", "split", "mean_reward", "mean_loss", "mean_len", "mean_fluency", "seconds")


def test_curves_rows_and_byte_identical(tmp_path, sft_model, qa_setup):
    env, train, dev = qa_setup
    _, log, _ = train_rl(rl_config(epochs=3, patience=10), env, fresh(sft_model[0]), train, dev)
    emit_curves(log, tmp_path / "a.csv")
    emit_curves(log, tmp_path / "b.csv")
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    rows = a.decode().splitlines()[1:]
    assert len(rows) == 2 * 3
    assert [r.split(",")[1] for r in rows] == ["train", "dev"] * 3


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, sft_model):
    model, _ = sft_model
    checkpoint_save(model, tmp_path / "m.npz")
    back, critic = checkpoint_load(tmp_path / "m.npz")
    assert critic is None and back.vocab == model.vocab and back.prefix == model.prefix
    for a, b in zip(model.params.parameters(), back.params.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    qs = [q for q, _ in reformulation_pairs(100, seed=9)]
    assert back.reformulate(qs) == model.reformulate(qs)


def test_checkpoint_with_critic(tmp_path, sft_model, qa_setup):
    env, train, dev = qa_setup
    model, log, critic = train_rl(rl_config(algorithm="AC", epochs=1, critic_lr=0.05), env, fresh(sft_model[0]), train, dev)
    checkpoint_save(model, tmp_path / "m.npz", critic)
    _, back = checkpoint_load(tmp_path / "m.npz")
    for a, b in zip(critic.parameters(), back.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_rejects_tampering(tmp_path, sft_model):
    model, _ = sft_model
    path = tmp_path / "m.npz"
    checkpoint_save(model, path)
    with zipfile.ZipFile(path) as z:
        members = {n: z.read(n) for n in z.namelist()}
    with zipfile.ZipFile(tmp_path / "t.npz", "w") as z:
        for n, data in members.items():
            if n == "p.policy.out_b.npy":
                arr = bytearray(data)
                arr[-1] ^= 0xFF
                data = bytes(arr)
            z.writestr(n, data)
    with pytest.raises(CheckpointError, match="hash"):
        checkpoint_load(tmp_path / "t.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "junk.npz")


def test_checkpoint_rejects_other_vocab(tmp_path, sft_model):
    model, _ = sft_model
    checkpoint_save(model, tmp_path / "m.npz")
    with pytest.raises(CheckpointError, match="vocabulary"):
        checkpoint_load(tmp_path / "m.npz", vocab=build_vocab(["something else"]))


# -- supervised ---------------------------------------------------------------


def test_supervised_loss_decreases_on_memorisable_fixture():
    pairs = [(f"w{i} w{i + 1} w{i + 2}", f"w{i + 2} w{i}") for i in range(16)]
    _, log = train_supervised(TrainConfig(epochs=5, **dict(SMALL, lr=0.5, batch_size=4)), pairs)
    losses = [r.mean_loss for r in log.split("train")]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_two_stage_schedule():
    a = reformulation_pairs(60, seed=1)
    b = [(s, s) for s, _ in reformulation_pairs(60, seed=2)]
    model, log = train_supervised(TrainConfig(**SMALL), [("para", a, 2), ("denoise", b, 3)], dev_pairs=a[:10])
    assert [(r.epoch, r.stage) for r in log.split("train")] == [(1, "para"), (2, "para"), (3, "denoise"), (4, "denoise"), (5, "denoise")]
    assert len(log.split("dev")) == 5


def test_unk_warning(sft_model):
    model, _ = sft_model
    with pytest.warns(RuntimeWarning, match="out of vocabulary"):
        train_supervised(TrainConfig(epochs=1, **SMALL), [("zz yy", "xx ww")], model=model)


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train_supervised(TrainConfig(**SMALL), [])


def test_memorised_model_scores_one():
    pairs = [(f"w{i} w{i + 1}", f"w{i + 1} w{i}") for i in range(8)]
    model, _ = train_supervised(TrainConfig(epochs=300, **dict(SMALL, batch_size=8)), pairs)
    env = MemoryEnv({str(i): t for i, (_, t) in enumerate(pairs)})
    dev = [(str(i), s) for i, (s, _) in enumerate(pairs)]
    first = evaluate(model, env, dev)
    second = evaluate(model, env, dev)
    assert first.mean_reward == 1.0
    assert (first.mean_reward, first.mean_fluency, first.mean_len) == (second.mean_reward, second.mean_fluency, second.mean_len)


# -- RL -----------------------------------------------------------------------


@pytest.mark.parametrize("algo", ["PG", "AC", "SC", "UL", "MIXED"])
def test_every_algorithm_runs(algo, sft_model, qa_setup):
    env, train, dev = qa_setup
    model, log, _ = train_rl(rl_config(algorithm=algo, epochs=1), env, fresh(sft_model[0]), train, dev)
    assert len(log.split("train")) == len(log.split("dev")) == 1
    assert model.params.all_finite()
    assert all(r.mean_len <= 50 for r in log.records)


def test_rl_is_deterministic(sft_model, qa_setup):
    env, train, dev = qa_setup
    a = train_rl(rl_config(), env, fresh(sft_model[0]), train, dev)[1]
    b = train_rl(rl_config(), env, fresh(sft_model[0]), train, dev)[1]
    assert a.comparable() == b.comparable()


def test_threaded_rewards_match_serial(sft_model, qa_setup):
    env, train, dev = qa_setup
    a = train_rl(rl_config(epochs=1), env, fresh(sft_model[0]), train, dev)[1]
    b = train_rl(rl_config(epochs=1, workers=3), env, fresh(sft_model[0]), train, dev)[1]
    assert a.comparable() == b.comparable()


def test_sc_and_pg_logs_differ(sft_model, qa_setup):
    env, train, dev = qa_setup
    a = train_rl(rl_config(algorithm="PG"), env, fresh(sft_model[0]), train, dev)[1]
    b = train_rl(rl_config(algorithm="SC"), env, fresh(sft_model[0]), train, dev)[1]
    assert a.comparable() != b.comparable()


def test_zero_reward_keeps_entropy(sft_model, qa_setup):
    _, train, dev = qa_setup
    model = fresh(sft_model[0])
    env = ConstantEnvironment(0.0)
    texts = [t for _, t in dev]
    before = mean_step_entropy(model, texts, model.greedy(texts))
    model, log, _ = train_rl(rl_config(epochs=3, entropy_lambda=0.05), env, model, train, dev)
    assert log.dev_rewards() == [0.0, 0.0, 0.0]
    after = mean_step_entropy(model, texts, model.greedy(texts))
    assert after >= before > 0.01


def test_early_stopping_bound(sft_model, qa_setup):
    _, train, dev = qa_setup
    model, log, _ = train_rl(rl_config(epochs=20, patience=2), ConstantEnvironment(0.0), fresh(sft_model[0]), train, dev)
    assert log.stopped_early
    assert len(log.split("dev")) <= log.best_epoch + 2


def test_environment_failures_get_zero(sft_model, qa_setup, caplog):
    env, train, dev = qa_setup
    bad = {q for q, _ in train[:5]}
    _, log, _ = train_rl(rl_config(epochs=1), FlakyEnv(env, bad), fresh(sft_model[0]), train, dev)
    assert log.failures >= 5
    assert "backend down" in caplog.text


def test_ic_environment_reward_set(sft_model):
    recs = ic_records(80, seed=0)
    clf = BowIntentClassifier().fit([r.text for r in recs], [r.label for r in recs])
    env = ICEnvironment(clf, {r.qid: r.label for r in recs})
    queries = [(r.qid, r.text) for r in recs]
    _, log, _ = train_rl(rl_config(epochs=1), env, fresh(sft_model[0]), queries[:60], queries[60:])
    assert log.observed_rewards <= {0.0, 0.5, 1.0}


def test_evaluate_empty_dev(sft_model):
    res = evaluate(sft_model[0], ConstantEnvironment(1.0), [])
    assert np.isnan(res.mean_reward)
