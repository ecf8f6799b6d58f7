"""Command-line entry point: one subcommand per pipeline stage.

Configs are JSON objects.  Corpora are line oriented:

* supervised pairs: ``source<TAB>target`` or JSONL ``{"source", "target"}``
* query files: ``qid<TAB>text`` or bare ``text`` (qid = line number)
* QA / IC corpora: see :mod:`reformulator.rewards`
* rated queries: ``text<TAB>rating``
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, atomic_write_text
from .rewards import BowIntentClassifier, ICEnvironment, QAEnvironment, load_ic_corpus, load_qa_corpus
from .training import ALGORITHMS, TrainConfig, checkpoint_load, checkpoint_save, emit_curves, evaluate, train_rl, train_supervised
from .wellformedness import WfConfig, WfEnvironment, WfModel, load_rated_corpus, wf_report, wf_score_batch, wf_train, render_rating

log = logging.getLogger("reformulator")


class UsageError(Exception):
    """Bad config, arguments or inputs; reported without a traceback."""


TRAIN_FIELDS = set(TrainConfig.field_names())
WF_FIELDS = {f.name for f in fields(WfConfig)}
PATH_KEYS = {
    "train-sft": {"train_corpus", "dev_corpus", "out_dir"},
    "train-rl": {"env", "queries", "dev_queries", "dev_fraction", "out_dir"},
    "eval": {"env", "dev_queries", "wf_model", "out_dir"},
    "train-wf": {"train_corpus", "val_corpus", "test_corpus", "out_dir"},
}
REQUIRED = {
    "train-sft": ["train_corpus", "out_dir"],
    "train-rl": ["out_dir"],
    "eval": [],
    "train-wf": ["train_corpus", "out_dir"],
}


def load_config(path: str | None, command: str, overrides: dict) -> dict:
    cfg = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            cfg = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(cfg, dict):
            raise UsageError(f"{p}: top level must be an object")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    allowed = (WF_FIELDS if command == "train-wf" else TRAIN_FIELDS) | PATH_KEYS[command]
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    missing = [k for k in REQUIRED[command] if k not in cfg]
    if missing:
        raise UsageError(f"missing required config key(s): {', '.join(missing)}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in TRAIN_FIELDS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _read_lines(path: str) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p.read_text(encoding="utf-8").splitlines()


def read_pairs(path: str) -> list[tuple[str, str]]:
    out = []
    for n, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        if line.lstrip().startswith("{"):
            d = json.loads(line)
            out.append((d["source"], d["target"]))
        elif "\t" in line:
            s, t = line.split("\t", 1)
            out.append((s, t))
        else:
            raise UsageError(f"{path}:{n}: expected 'source<TAB>target'")
    return out


def read_queries(path: str) -> list[tuple[str, str]]:
    out = []
    for n, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        qid, sep, text = line.partition("\t")
        out.append((qid, text) if sep else (str(n), line))
    return out


def make_env(spec: str):
    """``qa:<corpus>``, ``ic:<corpus>`` or ``wf:<model>`` -> (environment, queries)."""
    kind, sep, path = spec.partition(":")
    if not sep or not path:
        raise UsageError(f"bad env spec {spec!r}; expected qa:<corpus>, ic:<corpus> or wf:<model>")
    if not Path(path).is_file():
        raise UsageError(f"env corpus not found: {path}")
    if kind == "qa":
        records = load_qa_corpus(path)
        return QAEnvironment(records), [(r.qid, r.question) for r in records]
    if kind == "ic":
        records = load_ic_corpus(path)
        clf = BowIntentClassifier().fit([r.text for r in records], [r.label for r in records])
        return ICEnvironment(clf, {r.qid: r.label for r in records}), [(r.qid, r.text) for r in records]
    if kind == "wf":
        return WfEnvironment(WfModel.load(path)), []
    raise UsageError(f"unknown env kind {kind!r}; expected qa, ic or wf")


def _split_queries(cfg: dict, env_queries):
    if "queries" in cfg:
        train = read_queries(cfg["queries"])
    else:
        train = list(env_queries)
    if "dev_queries" in cfg:
        return train, read_queries(cfg["dev_queries"])
    if not train:
        raise UsageError("no queries: set 'queries' (and optionally 'dev_queries') in the config")
    n_dev = max(1, int(round(float(cfg.get("dev_fraction", 0.2)) * len(train))))
    return train[:-n_dev], train[-n_dev:]


def _out_dir(cfg: dict, args) -> Path:
    out = Path(args.out or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _overrides(args) -> dict:
    return {"seed": getattr(args, "seed", None), "algorithm": getattr(args, "algo", None), "out_dir": getattr(args, "out", None)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train_sft(args) -> int:
    cfg = load_config(args.config, "train-sft", _overrides(args))
    tc = train_config(cfg)
    corpus = cfg["train_corpus"]
    if isinstance(corpus, list):
        stages = []
        for i, st in enumerate(corpus):
            if not isinstance(st, dict) or "path" not in st:
                raise UsageError(f"train_corpus[{i}] must be an object with 'path' (and optional 'name', 'epochs')")
            stages.append((st.get("name", f"stage{i + 1}"), read_pairs(st["path"]), int(st.get("epochs", tc.epochs))))
        pairs = stages
    else:
        pairs = read_pairs(corpus)
    dev = read_pairs(cfg["dev_corpus"]) if "dev_corpus" in cfg else []
    model = None
    if args.checkpoint:
        model, _ = checkpoint_load(args.checkpoint)
    try:
        model, run = train_supervised(tc, pairs, model, dev)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(cfg, args)
    checkpoint_save(model, out / "model.npz")
    emit_curves(run, out / "curves.csv")
    dev_rows = run.split("dev")
    if dev_rows:
        print(f"final dev loss {dev_rows[-1].mean_loss!r} exact match {dev_rows[-1].mean_reward:.4f}")
    print(f"wrote {out / 'model.npz'} and {out / 'curves.csv'}")
    return 0


def cmd_train_rl(args) -> int:
    if args.algo is not None and args.algo not in ALGORITHMS:
        raise UsageError(f"unknown algorithm {args.algo!r}; valid: {', '.join(ALGORITHMS)}")
    cfg = load_config(args.config, "train-rl", _overrides(args))
    tc = train_config(cfg)
    if not args.checkpoint:
        raise UsageError("train-rl needs --checkpoint (a supervised model)")
    spec = args.env or cfg.get("env")
    if not spec:
        raise UsageError("train-rl needs --env or an 'env' config key")
    model, critic = checkpoint_load(args.checkpoint)
    env, env_queries = make_env(spec)
    train, dev = _split_queries(cfg, env_queries)
    model, run, critic = train_rl(tc, env, model, train, dev, critic)
    out = _out_dir(cfg, args)
    checkpoint_save(model, out / "model.npz", critic)
    emit_curves(run, out / "curves.csv")
    summary = {
        "algorithm": tc.algorithm,
        "initial_dev_reward": run.initial_dev.get("mean_reward"),
        "best_dev_reward": max(run.dev_rewards(), default=float("nan")),
        "best_epoch": run.best_epoch,
        "stopped_early": run.stopped_early,
        "observed_rewards": sorted(run.observed_rewards),
        "env_failures": run.failures,
    }
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def _parse_mode(mode: str) -> int:
    if mode == "greedy":
        return 0
    if mode.startswith("beam:"):
        try:
            k = int(mode[5:])
        except ValueError:
            k = 0
        if k >= 1:
            return k
    raise UsageError(f"bad mode {mode!r}; expected greedy or beam:<k>")


def cmd_reformulate(args) -> int:
    k = _parse_mode(args.mode)
    if not args.checkpoint:
        raise UsageError("reformulate needs --checkpoint")
    model, _ = checkpoint_load(args.checkpoint)
    lines = _read_lines(args.input)
    if k == 0:
        out = model.reformulate(lines) if lines else []
    else:
        out = []
        for line in lines:
            hyps = model.beam(line, k)
            out.extend(f"{text}\t{score!r}" for text, score in hyps)
    text = "".join(o + "\n" for o in out)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_score_wf(args) -> int:
    if not args.checkpoint:
        raise UsageError("score-wf needs --checkpoint (a well-formedness model)")
    model = WfModel.load(args.checkpoint)
    lines = _read_lines(args.input)
    scores = wf_score_batch(model, lines) if lines else []
    body = "".join(f"{render_rating(s)}\n" for s in scores)
    if args.out:
        atomic_write_text(args.out, body)
    else:
        sys.stdout.write(body)
    mean = float(np.mean(scores)) if scores else float("nan")
    print(f"mean wf score {mean:.4f} over {len(scores)} queries", file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_train_wf(args) -> int:
    cfg = load_config(args.config, "train-wf", {"seed": args.seed, "out_dir": args.out})
    try:
        wc = WfConfig(**{k: v for k, v in cfg.items() if k in WF_FIELDS})
    except TypeError as exc:
        raise UsageError(f"invalid wf config: {exc}") from exc
    corpus = load_rated_corpus(_check(cfg["train_corpus"]))
    val = load_rated_corpus(_check(cfg["val_corpus"])) if "val_corpus" in cfg else None
    try:
        model, hist = wf_train(corpus, wc, val)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(cfg, args)
    model.save(out / "wf_model.npz")
    if "test_corpus" in cfg:
        report = wf_report(model, load_rated_corpus(_check(cfg["test_corpus"])))
        atomic_write_text(out / "wf_report.txt", report.format_table() + "\n")
        print(report.format_table())
    print(f"best epoch {hist.best_epoch}; wrote {out / 'wf_model.npz'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, "eval", {"out_dir": args.out})
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    spec = args.env or cfg.get("env")
    if not spec:
        raise UsageError("eval needs --env or an 'env' config key")
    model, _ = checkpoint_load(args.checkpoint)
    env, env_queries = make_env(spec)
    dev = read_queries(cfg["dev_queries"]) if "dev_queries" in cfg else env_queries
    wf_model = WfModel.load(_check(cfg["wf_model"])) if "wf_model" in cfg else None
    res = evaluate(model, env, dev, wf_model)
    result = {"mean_reward": res.mean_reward, "mean_fluency": res.mean_fluency, "mean_wf": res.mean_wf, "mean_len": res.mean_len, "n": len(dev)}
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        atomic_write_text(Path(args.out) / "eval.json" if Path(args.out).is_dir() else args.out, text)
    print(text, end="")
    return 0


def _check(path: str) -> str:
    if not Path(path).is_file():
        raise UsageError(f"file not found: {path}")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reformulator", description="Query reformulation: supervised + RL fine-tuning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-sft", help="supervised fine-tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="continue from this model")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.set_defaults(func=cmd_train_sft)

    p = sub.add_parser("train-rl", help="RL fine-tuning against an environment")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", help="qa:<corpus> | ic:<corpus> | wf:<model>")
    p.add_argument("--algo", help="/".join(ALGORITHMS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("reformulate", help="reformulate one query per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", default="greedy", help="greedy or beam:<k>")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reformulate)

    p = sub.add_parser("score-wf", help="rate query well-formedness, one per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score_wf)

    p = sub.add_parser("train-wf", help="train the well-formedness rater")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_wf)

    p = sub.add_parser("eval", help="greedy evaluation on a dev split")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
