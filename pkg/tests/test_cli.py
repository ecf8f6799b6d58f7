import json

import numpy as np
import pytest

from reformulator.cli import main
from reformulator.rewards import save_ic_corpus, save_qa_corpus
from reformulator.synthetic import ic_records, identity_pairs, qa_records, rated_queries, reformulation_pairs
from reformulator.wellformedness import RATING_STRINGS, save_rated_corpus

BASE = {"d": 16, "h": 32, "lr": 1.0, "batch_size": 16, "max_len": 14, "seed": 0}


def write_pairs(path, pairs):
    path.write_text("".join(f"{s}\t{t}\n" for s, t in pairs))
    return str(path)


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def sft_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("sft")
    cfg = dict(BASE, epochs=10, train_corpus=write_pairs(d / "train.tsv", reformulation_pairs(600)), dev_corpus=write_pairs(d / "dev.tsv", reformulation_pairs(20, seed=5)), out_dir=str(d / "out"))
    conf = write_config(d / "sft.json", cfg)
    assert main(["train-sft", "--config", conf]) == 0
    return d, conf


@pytest.fixture(scope="module")
def identity_model(tmp_path_factory):
    d = tmp_path_factory.mktemp("ident")
    pairs = identity_pairs(400, vocab_size=20, min_len=2, max_len=4, seed=0)
    cfg = dict(BASE, epochs=25, lr=1.0, train_corpus=write_pairs(d / "train.tsv", pairs), out_dir=str(d / "out"))
    assert main(["train-sft", "--config", write_config(d / "c.json", cfg)]) == 0
    return d / "out" / "model.npz", pairs


@pytest.fixture(scope="module")
def wf_model(tmp_path_factory):
    d = tmp_path_factory.mktemp("wf")
    data = rated_queries(700, seed=1)
    save_rated_corpus(data[:600], d / "train.tsv")
    save_rated_corpus(data[600:], d / "test.tsv")
    cfg = {"train_corpus": str(d / "train.tsv"), "test_corpus": str(d / "test.tsv"), "out_dir": str(d / "out"), "max_epochs": 20}
    assert main(["train-wf", "--config", write_config(d / "c.json", cfg)]) == 0
    assert (d / "out" / "wf_report.txt").read_text().startswith("Score Category | Count")
    return d / "out" / "wf_model.npz", data


def test_train_sft_outputs(sft_run):
    d, _ = sft_run
    assert (d / "out" / "model.npz").is_file()
    rows = (d / "out" / "curves.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 10


def test_train_sft_deterministic(sft_run, tmp_path, capsys):
    d, conf = sft_run
    main(["train-sft", "--config", conf, "--out", str(tmp_path / "a")])
    first = capsys.readouterr().out.splitlines()[0]
    main(["train-sft", "--config", conf, "--out", str(tmp_path / "b")])
    second = capsys.readouterr().out.splitlines()[0]
    assert first == second and first.startswith("final dev loss")


def test_missing_corpus_reports_path(tmp_path, capsys):
    conf = write_config(tmp_path / "c.json", dict(BASE, train_corpus=str(tmp_path / "nope.tsv"), out_dir=str(tmp_path / "o")))
    assert main(["train-sft", "--config", conf]) != 0
    assert "nope.tsv" in capsys.readouterr().err
    assert not (tmp_path / "o" / "model.npz").exists()


def test_unknown_and_missing_keys(tmp_path, capsys):
    conf = write_config(tmp_path / "c.json", {"lr": 0.1, "bogus": 1, "another": 2})
    assert main(["train-sft", "--config", conf]) != 0
    err = capsys.readouterr().err
    assert "bogus" in err and "another" in err
    conf = write_config(tmp_path / "d.json", {"lr": 0.1})
    assert main(["train-sft", "--config", conf]) != 0
    err = capsys.readouterr().err
    assert "train_corpus" in err and "out_dir" in err


def test_invalid_value_names_key(tmp_path, capsys):
    conf = write_config(tmp_path / "c.json", {"algorithm": "AC", "critic_lr": 0, "train_corpus": "x", "out_dir": "y"})
    assert main(["train-sft", "--config", conf]) != 0
    assert "critic_lr" in capsys.readouterr().err


def test_train_rl_pg_improves(sft_run, tmp_path):
    d, _ = sft_run
    recs = qa_records(120, seed=3)
    save_qa_corpus(recs, tmp_path / "qa.jsonl")
    conf = write_config(tmp_path / "rl.json", dict(BASE, rl_lr=0.1, epochs=4, out_dir=str(tmp_path / "rl")))
    rc = main(["train-rl", "--config", conf, "--checkpoint", str(d / "out" / "model.npz"), "--env", f"qa:{tmp_path / 'qa.jsonl'}", "--algo", "PG"])
    assert rc == 0
    summary = json.loads((tmp_path / "rl" / "summary.json").read_text())
    assert summary["best_dev_reward"] > summary["initial_dev_reward"]
    assert (tmp_path / "rl" / "curves.csv").is_file()


def test_train_rl_unknown_algorithm(sft_run, tmp_path, capsys):
    d, _ = sft_run
    conf = write_config(tmp_path / "rl.json", dict(BASE, out_dir=str(tmp_path / "rl")))
    rc = main(["train-rl", "--config", conf, "--checkpoint", str(d / "out" / "model.npz"), "--env", "qa:x", "--algo", "DQN"])
    assert rc != 0
    err = capsys.readouterr().err
    assert all(a in err for a in ("PG", "AC", "SC", "UL", "MIXED"))


def test_train_rl_ic_rewards(sft_run, tmp_path):
    d, _ = sft_run
    save_ic_corpus(ic_records(60, seed=0), tmp_path / "ic.jsonl")
    conf = write_config(tmp_path / "rl.json", dict(BASE, rl_lr=0.05, epochs=1, out_dir=str(tmp_path / "rl")))
    assert main(["train-rl", "--config", conf, "--checkpoint", str(d / "out" / "model.npz"), "--env", f"ic:{tmp_path / 'ic.jsonl'}"]) == 0
    summary = json.loads((tmp_path / "rl" / "summary.json").read_text())
    assert set(summary["observed_rewards"]) <= {0.0, 0.5, 1.0}


def test_train_rl_wf_env(sft_run, wf_model, tmp_path):
    d, _ = sft_run
    (tmp_path / "q.txt").write_text("".join(f"{i}\t{s}\n" for i, (s, _) in enumerate(reformulation_pairs(30, seed=8))))
    conf = write_config(tmp_path / "rl.json", dict(BASE, rl_lr=0.05, epochs=1, queries=str(tmp_path / "q.txt"), out_dir=str(tmp_path / "rl")))
    assert main(["train-rl", "--config", conf, "--checkpoint", str(d / "out" / "model.npz"), "--env", f"wf:{wf_model[0]}"]) == 0


def test_reformulate_identity(identity_model, tmp_path):
    path, pairs = identity_model
    lines = [s for s, _ in pairs[:30]]
    (tmp_path / "in.txt").write_text("\n".join(lines) + "\n")
    assert main(["reformulate", "--checkpoint", str(path), "--input", str(tmp_path / "in.txt"), "--out", str(tmp_path / "g.txt")]) == 0
    out = (tmp_path / "g.txt").read_text().splitlines()
    assert np.mean([a == b for a, b in zip(out, lines)]) >= 0.9
    assert main(["reformulate", "--checkpoint", str(path), "--input", str(tmp_path / "in.txt"), "--mode", "beam:1", "--out", str(tmp_path / "b1.txt")]) == 0
    beam1 = [l.split("\t")[0] for l in (tmp_path / "b1.txt").read_text().splitlines()]
    assert beam1 == out
    assert main(["reformulate", "--checkpoint", str(path), "--input", str(tmp_path / "in.txt"), "--mode", "beam:3", "--out", str(tmp_path / "b3.txt")]) == 0
    rows = (tmp_path / "b3.txt").read_text().splitlines()
    assert len(rows) == 3 * len(lines)
    scores = [float(r.split("\t")[1]) for r in rows[:3]]
    assert scores == sorted(scores, reverse=True)


def test_reformulate_empty_input(identity_model, tmp_path):
    (tmp_path / "empty.txt").write_text("")
    assert main(["reformulate", "--checkpoint", str(identity_model[0]), "--input", str(tmp_path / "empty.txt"), "--out", str(tmp_path / "o.txt")]) == 0
    assert (tmp_path / "o.txt").read_text() == ""


def test_reformulate_bad_mode(identity_model, tmp_path, capsys):
    (tmp_path / "in.txt").write_text("w001\n")
    assert main(["reformulate", "--checkpoint", str(identity_model[0]), "--input", str(tmp_path / "in.txt"), "--mode", "beam:0"]) != 0


def test_score_wf(wf_model, tmp_path, capsys):
    path, data = wf_model
    clean = [q.text for q in data[600:] if q.rating == 1.0]
    noisy = [q.text for q in data[600:] if q.rating == 0.0]
    means = []
    for name, lines in (("clean", clean), ("noisy", noisy)):
        (tmp_path / f"{name}.txt").write_text("\n".join(lines) + "\n")
        assert main(["score-wf", "--checkpoint", str(path), "--input", str(tmp_path / f"{name}.txt"), "--out", str(tmp_path / f"{name}.out")]) == 0
        scores = (tmp_path / f"{name}.out").read_text().splitlines()
        assert len(scores) == len(lines) and set(scores) <= set(RATING_STRINGS)
        means.append(float(capsys.readouterr().out.split()[3]))
    assert means[0] >= means[1]
    (tmp_path / "one.txt").write_text(clean[0] + "\n")
    main(["score-wf", "--checkpoint", str(path), "--input", str(tmp_path / "one.txt"), "--out", str(tmp_path / "one.out")])
    single = float((tmp_path / "one.out").read_text().strip())
    assert float(capsys.readouterr().out.split()[3]) == pytest.approx(single)


def test_eval(sft_run, wf_model, tmp_path, capsys):
    d, _ = sft_run
    recs = qa_records(20, seed=4)
    save_qa_corpus(recs, tmp_path / "qa.jsonl")
    conf = write_config(tmp_path / "e.json", {"wf_model": str(wf_model[0])})
    assert main(["eval", "--config", conf, "--checkpoint", str(d / "out" / "model.npz"), "--env", f"qa:{tmp_path / 'qa.jsonl'}"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n"] == 20 and 0 <= res["mean_reward"] <= 1 and 0 <= res["mean_wf"] <= 1


def test_bad_env_spec(sft_run, tmp_path, capsys):
    d, _ = sft_run
    assert main(["eval", "--checkpoint", str(d / "out" / "model.npz"), "--env", "zz:foo"]) != 0
    assert "env" in capsys.readouterr().err


def test_corrupt_checkpoint(tmp_path, capsys):
    (tmp_path / "bad.npz").write_bytes(b"xx")
    (tmp_path / "in.txt").write_text("a\n")
    assert main(["reformulate", "--checkpoint", str(tmp_path / "bad.npz"), "--input", str(tmp_path / "in.txt")]) != 0
    assert "checkpoint" in capsys.readouterr().err
