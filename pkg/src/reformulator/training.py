"""Supervised and RL fine-tuning loops, evaluation, checkpoints and curves."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import atomic_write_text, load_arrays, save_arrays
from .model import (
    Seq2SeqParams,
    Trajectory,
    beam_search,
    decode_teacher_forced,
    encode_query,
    greedy_decode_batch,
    sample_trajectories,
    step_log_probs,
    trajectories_to_batch,
)
from .numerics import Tape, Tensor, backward, clip_grad_norm, sgd_step, zero_grad
from .objectives import (
    AdvantageBatch,
    CriticParams,
    critic_baseline,
    critic_update,
    entropy_regularizer,
    mean_baseline,
    mixed_objective,
    mle_loss,
    reinforce_surrogate_loss,
    self_critical_baseline,
    unlikelihood_loss,
)
from .rewards import RewardEnvironment, composite_reward, fluency_reward
from .text import (
    DEFAULT_MAX_LEN,
    PARAPHRASE_PREFIX,
    SequenceBatch,
    Vocabulary,
    build_vocab,
    decode,
    encode_batch,
    unk_rate,
)

log_ = logging.getLogger(__name__)

ALGORITHMS = ("PG", "AC", "SC", "UL", "MIXED")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3  # supervised policy learning rate
    rl_lr: float = 1e-4
    critic_lr: float = 1e-3
    max_len: int = DEFAULT_MAX_LEN
    algorithm: str = "PG"
    entropy_lambda: float = 0.01
    ul_alpha: float = 1.0
    fluency_weight: float = 0.5
    mixed_weights: tuple[float, float] = (0.5, 0.5)
    epochs: int = 10
    stage_epochs: tuple[int, ...] = ()
    patience: int = 5
    seed: int = 0
    prefix: str = PARAPHRASE_PREFIX
    clip: float = 5.0
    temperature: float = 1.0
    d: int = 64
    h: int = 128
    critic_hidden: int = 64
    vocab_size: int = 16000
    workers: int = 1
    keep_best: bool = True

    def __post_init__(self):
        self.mixed_weights = tuple(self.mixed_weights)
        self.stage_epochs = tuple(self.stage_epochs)
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; valid: {', '.join(ALGORITHMS)}")
        if self.algorithm == "AC" and not self.critic_lr > 0:
            raise ValueError("algorithm AC requires a positive critic_lr")
        if self.algorithm == "MIXED" and len(self.mixed_weights) != 2:
            raise ValueError("mixed_weights must hold two numbers (w_pg, w_sc)")
        if self.batch_size < 1 or self.max_len < 2:
            raise ValueError("batch_size must be >= 1 and max_len >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.entropy_lambda < 0 or self.ul_alpha < 0 or self.fluency_weight < 0:
            raise ValueError("entropy_lambda, ul_alpha and fluency_weight must be non-negative")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Reformulator:
    """A policy together with the vocabulary and task prefix it was trained with."""

    params: Seq2SeqParams
    vocab: Vocabulary
    prefix: str = PARAPHRASE_PREFIX
    max_len: int = DEFAULT_MAX_LEN

    def encode(self, texts: Sequence[str]) -> SequenceBatch:
        return encode_batch(texts, self.vocab, self.prefix, self.max_len)

    def decode(self, traj: Trajectory) -> str:
        return decode(traj.tokens, self.vocab)

    def greedy(self, texts: Sequence[str], batch_size: int = 256) -> list[Trajectory]:
        out = []
        for i in range(0, len(texts), batch_size):
            enc = encode_query(self.encode(texts[i : i + batch_size]), self.params)
            out.extend(greedy_decode_batch(enc, self.params, self.max_len))
        return out

    def reformulate(self, texts: Sequence[str]) -> list[str]:
        return [self.decode(t) for t in self.greedy(list(texts))]

    def beam(self, text: str, k: int) -> list[tuple[str, float]]:
        enc = encode_query(self.encode([text]), self.params)
        return [(self.decode(t), t.total_log_prob) for t in beam_search(enc, self.params, k, self.max_len)]


# ---------------------------------------------------------------------------
# run log and curves
# ---------------------------------------------------------------------------

CURVE_COLUMNS = ("epoch", "split", "mean_reward", "mean_loss", "mean_len", "mean_fluency", "seconds")


@dataclass
class EpochRecord:
    epoch: int
    split: str  # train | dev
    mean_reward: float
    mean_loss: float
    mean_len: float
    mean_fluency: float
    seconds: float
    stage: str = ""


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    initial_dev: dict = field(default_factory=dict)
    best_epoch: int = -1
    stopped_early: bool = False
    observed_rewards: set = field(default_factory=set)
    failures: int = 0

    def add(self, rec: EpochRecord) -> None:
        same = [r.epoch for r in self.records if r.split == rec.split]
        if same and rec.epoch <= same[-1]:
            raise ValueError(f"{rec.split} epochs must increase ({rec.epoch} after {same[-1]})")
        self.records.append(rec)

    def split(self, name: str) -> list[EpochRecord]:
        return [r for r in self.records if r.split == name]

    def dev_rewards(self) -> list[float]:
        return [r.mean_reward for r in self.split("dev")]

    def comparable(self) -> list[tuple]:
        """Records without wall-clock time, for determinism checks."""
        def norm(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return [tuple(norm(v) for k, v in asdict(r).items() if k != "seconds") for r in self.records]


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x)) if isinstance(x, float) else str(x)


def curves_csv(log: RunLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in log.records:
        w.writerow([r.epoch, r.split] + [_fmt(getattr(r, c)) for c in CURVE_COLUMNS[2:]])
    return buf.getvalue()


def emit_curves(log: RunLog, path: str | Path) -> None:
    atomic_write_text(path, curves_csv(log))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_save(model: Reformulator, path: str | Path, critic: CriticParams | None = None) -> None:
    arrays = {f"policy.{k}": v.data for k, v in model.params.named_parameters().items()}
    if critic is not None:
        arrays.update({f"critic.{k}": v.data for k, v in critic.named_parameters().items()})
    save_arrays(path, "reformulator", arrays, model.vocab, {"prefix": model.prefix, "max_len": model.max_len})


def checkpoint_load(path: str | Path, vocab: Vocabulary | None = None) -> tuple[Reformulator, CriticParams | None]:
    arrays, stored_vocab, cfg = load_arrays(path, "reformulator", vocab)
    policy = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("policy.")}
    params = Seq2SeqParams(**{k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in policy.items()})
    critic = None
    crit = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("critic.")}
    if crit:
        critic = CriticParams(**{k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in crit.items()})
    model = Reformulator(params, stored_vocab, cfg.get("prefix", PARAPHRASE_PREFIX), int(cfg.get("max_len", DEFAULT_MAX_LEN)))
    return model, critic


# ---------------------------------------------------------------------------
# supervised stage
# ---------------------------------------------------------------------------


def new_reformulator(config: TrainConfig, texts: Sequence[str]) -> Reformulator:
    vocab = build_vocab(texts, config.vocab_size, extra=[config.prefix])
    params = Seq2SeqParams.init(len(vocab), config.d, config.h, config.seed)
    return Reformulator(params, vocab, config.prefix, config.max_len)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, size):
        yield order[s : s + size]


def supervised_loss(model: Reformulator, sources: Sequence[str], targets: Sequence[str]) -> Tensor:
    src = model.encode(sources)
    tgt = encode_batch(targets, model.vocab, "", model.max_len).trim()
    enc = encode_query(src, model.params)
    dists = decode_teacher_forced(enc, tgt, model.params)
    return mle_loss(dists, tgt.ids, tgt.mask)


def exact_match(model: Reformulator, pairs: Sequence[tuple[str, str]]) -> float:
    if not pairs:
        return float("nan")
    outs = model.reformulate([s for s, _ in pairs])
    return float(np.mean([o == " ".join(t.lower().split()) for o, (_, t) in zip(outs, pairs)]))


def train_supervised(
    config: TrainConfig,
    pairs,
    model: Reformulator | None = None,
    dev_pairs: Sequence[tuple[str, str]] = (),
) -> tuple[Reformulator, RunLog]:
    """Minibatch SGD on the masked NLL of target given source.

    ``pairs`` is either one list of (source, target) pairs trained for
    ``config.epochs`` or a list of stages ``(name, pairs, epochs)`` run in
    order (e.g. a paraphrase corpus, then a denoising corpus).  Epoch numbers
    keep increasing across stages.  Dev rows record exact match as
    ``mean_reward`` and the dev NLL as ``mean_loss``.
    """
    if pairs and isinstance(pairs[0], tuple) and len(pairs[0]) == 3 and not isinstance(pairs[0][1], str):
        stages = [(name, list(p), int(e)) for name, p, e in pairs]
    else:
        stages = [("sft", list(pairs), config.epochs)]
    if not any(p for _, p, _ in stages):
        raise ValueError("supervised corpus is empty")
    if model is None:
        texts = [t for _, p, _ in stages for pair in p for t in pair]
        model = new_reformulator(config, texts)
    for name, p, _ in stages:
        rate = unk_rate([t for pair in p for t in pair], model.vocab)
        if rate > 0.5:
            warnings.warn(f"stage {name!r}: {rate:.0%} of tokens are out of vocabulary", RuntimeWarning)
    rng = np.random.default_rng(config.seed)
    params = model.params.parameters()
    log = RunLog()
    epoch = 0
    for name, stage_pairs, n_epochs in stages:
        for _ in range(n_epochs):
            epoch += 1
            t0 = time.perf_counter()
            losses = []
            for idx in _batches(len(stage_pairs), config.batch_size, rng):
                src = [stage_pairs[i][0] for i in idx]
                tgt = [stage_pairs[i][1] for i in idx]
                zero_grad(params)
                with Tape() as tape:
                    loss = supervised_loss(model, src, tgt)
                backward(loss, tape)
                clip_grad_norm(params, config.clip)
                sgd_step(params, config.lr)
                losses.append(loss.item())
            log.add(EpochRecord(epoch, "train", float("nan"), float(np.mean(losses)), float("nan"), float("nan"), time.perf_counter() - t0, name))
            if dev_pairs:
                t1 = time.perf_counter()
                log.add(_supervised_dev_record(model, dev_pairs, epoch, name, t1))
            log_.info("sft %s epoch %d loss %.4f", name, epoch, np.mean(losses))
    return model, log


def _supervised_dev_record(model, dev_pairs, epoch, stage, t0) -> EpochRecord:
    dev_loss = []
    for s in range(0, len(dev_pairs), 256):
        chunk = dev_pairs[s : s + 256]
        dev_loss.append(supervised_loss(model, [a for a, _ in chunk], [b for _, b in chunk]).item() * len(chunk))
    trajs = model.greedy([s for s, _ in dev_pairs])
    outs = [model.decode(t) for t in trajs]
    em = float(np.mean([o == " ".join(t.lower().split()) for o, (_, t) in zip(outs, dev_pairs)]))
    return EpochRecord(
        epoch,
        "dev",
        em,
        float(sum(dev_loss) / len(dev_pairs)),
        float(np.mean([len(t) for t in trajs])),
        float(np.mean([fluency_reward(t) for t in trajs])),
        time.perf_counter() - t0,
        stage,
    )


# ---------------------------------------------------------------------------
# RL stage
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    mean_reward: float
    mean_fluency: float
    mean_wf: float
    mean_len: float
    mean_entropy: float
    outputs: list[str] = field(default_factory=list, repr=False)


def _rewards(env: RewardEnvironment, texts: Sequence[str], qids: Sequence[str], workers: int = 1) -> tuple[list[float], int]:
    def one(args):
        text, qid = args
        try:
            r = float(env.reward(text, qid))
        except Exception as exc:  # noqa: BLE001 - black-box environment
            log_.warning("environment failed on %r: %s; reward 0", qid, exc)
            return 0.0, 1
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"environment returned reward {r} outside [0, 1]")
        return r, 0

    items = list(zip(texts, qids))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(x) for x in items]
    return [r for r, _ in results], sum(f for _, f in results)


def mean_step_entropy(model: Reformulator, texts: Sequence[str], trajs: Sequence[Trajectory]) -> float:
    """Average per-step entropy of the policy along the given trajectories."""
    enc = encode_query(model.encode(texts), model.params)
    tgt = trajectories_to_batch(trajs, model.max_len).trim()
    dists = decode_teacher_forced(enc, tgt, model.params).data
    ent = -(dists * np.log(np.maximum(dists, 1e-12))).sum(axis=2)
    return float((ent * tgt.mask).sum() / tgt.mask.sum())


def evaluate(model: Reformulator, env: RewardEnvironment, dev: Sequence[tuple[str, str]], wf_model=None, workers: int = 1) -> EvalResult:
    """Greedy-decode every dev query (qid, text); side-effect free.

    Returns mean environment reward, mean fluency R_f, mean well-formedness
    score (nan without a wf model), mean length and mean per-step entropy.
    """
    if not dev:
        nan = float("nan")
        return EvalResult(nan, nan, nan, nan, nan)
    qids = [q for q, _ in dev]
    texts = [t for _, t in dev]
    trajs = model.greedy(texts)
    outs = [model.decode(t) for t in trajs]
    rewards, _ = _rewards(env, outs, qids, workers)
    wf = float("nan")
    if wf_model is not None:
        from .wellformedness import wf_score_batch

        wf = float(np.mean(wf_score_batch(wf_model, outs)))
    ent = np.mean([mean_step_entropy(model, texts[i : i + 256], trajs[i : i + 256]) for i in range(0, len(texts), 256)])
    return EvalResult(
        float(np.mean(rewards)),
        float(np.mean([fluency_reward(t) for t in trajs])),
        wf,
        float(np.mean([len(t) for t in trajs])),
        float(ent),
        outs,
    )


def _policy_loss(config: TrainConfig, dists: Tensor, tgt: SequenceBatch, adv: AdvantageBatch, adv_sc: AdvantageBatch | None) -> Tensor:
    if config.algorithm == "UL":
        loss = unlikelihood_loss(dists, tgt.ids, tgt.mask, config.ul_alpha, weights=adv.advantages)
    else:
        lp = step_log_probs(dists, tgt)
        loss = reinforce_surrogate_loss(lp, tgt.mask, adv.advantages)
        if config.algorithm == "MIXED":
            loss = mixed_objective(loss, reinforce_surrogate_loss(lp, tgt.mask, adv_sc.advantages), config.mixed_weights)
    if config.entropy_lambda > 0:
        loss = loss + entropy_regularizer(dists, tgt.mask, config.entropy_lambda)
    return loss


def train_rl(
    config: TrainConfig,
    env: RewardEnvironment,
    model: Reformulator,
    train: Sequence[tuple[str, str]],
    dev: Sequence[tuple[str, str]],
    critic: CriticParams | None = None,
) -> tuple[Reformulator, RunLog, CriticParams | None]:
    """Policy-gradient fine-tuning against a black-box environment.

    ``train`` and ``dev`` hold (query id, query text).  Per batch: sample
    one trajectory per query, fetch terminal rewards, form advantages with
    the configured baseline, take one SGD step on the surrogate loss plus
    the entropy term.  Each epoch is followed by a greedy dev evaluation;
    training stops after ``patience`` epochs without a new best dev reward.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = model.params.parameters()
    algo = config.algorithm
    if algo == "AC" and critic is None:
        critic = CriticParams.init(model.params.dims[2], config.critic_hidden, seed=config.seed)
    log = RunLog()
    first = evaluate(model, env, dev, workers=config.workers)
    log.initial_dev = {"mean_reward": first.mean_reward, "mean_fluency": first.mean_fluency, "mean_len": first.mean_len}
    best, best_state, since = first.mean_reward, [p.data.copy() for p in params], 0
    log.best_epoch = 0
    train = list(train)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        ep_rewards, ep_losses, ep_lens, ep_flu = [], [], [], []
        for idx in _batches(len(train), config.batch_size, rng):
            qids = [train[i][0] for i in idx]
            texts = [train[i][1] for i in idx]
            src = model.encode(texts)
            enc = encode_query(src, model.params)
            trajs = sample_trajectories(enc, model.params, rng, model.max_len, config.temperature)
            outs = [model.decode(t) for t in trajs]
            env_r, fails = _rewards(env, outs, qids, config.workers)
            log.failures += fails
            log.observed_rewards.update(env_r)
            flu = [fluency_reward(t) for t in trajs]
            r = np.array(env_r)
            if algo == "MIXED":
                r = np.array([composite_reward(a, f, config.fluency_weight) for a, f in zip(env_r, flu)])
            adv_sc = None
            if algo in ("PG", "UL", "MIXED"):
                adv = mean_baseline(r)
            elif algo == "AC":
                critic_update(critic, enc.pooled.data, r, config.critic_lr)
                adv = AdvantageBatch.from_baselines(r, critic_baseline(enc.pooled.data, critic), "critic")
            if algo in ("SC", "MIXED"):
                greedy = greedy_decode_batch(enc, model.params, model.max_len)
                g_r, fails = _rewards(env, [model.decode(t) for t in greedy], qids, config.workers)
                log.failures += fails
                if algo == "MIXED":
                    g_r = [composite_reward(a, fluency_reward(t), config.fluency_weight) for a, t in zip(g_r, greedy)]
                    adv_sc = self_critical_baseline(r, g_r)
                else:
                    adv = self_critical_baseline(r, g_r)
            for t, a, rr in zip(trajs, adv.advantages, r):
                t.reward, t.advantage = float(rr), float(a)
            tgt = trajectories_to_batch(trajs, model.max_len).trim()
            zero_grad(params)
            with Tape() as tape:
                enc_t = encode_query(src, model.params)
                dists = decode_teacher_forced(enc_t, tgt, model.params)
                loss = _policy_loss(config, dists, tgt, adv, adv_sc)
            backward(loss, tape)
            clip_grad_norm(params, config.clip)
            sgd_step(params, config.rl_lr)
            ep_rewards.extend(env_r)
            ep_losses.append(loss.item())
            ep_lens.extend(len(t) for t in trajs)
            ep_flu.extend(flu)
        log.add(EpochRecord(epoch, "train", float(np.mean(ep_rewards)), float(np.mean(ep_losses)), float(np.mean(ep_lens)), float(np.mean(ep_flu)), time.perf_counter() - t0, algo))
        t1 = time.perf_counter()
        ev = evaluate(model, env, dev, workers=config.workers)
        log.add(EpochRecord(epoch, "dev", ev.mean_reward, float("nan"), ev.mean_len, ev.mean_fluency, time.perf_counter() - t1, algo))
        log_.info("rl %s epoch %d train reward %.4f dev reward %.4f", algo, epoch, np.mean(ep_rewards), ev.mean_reward)
        if ev.mean_reward > best:
            best, since, log.best_epoch = ev.mean_reward, 0, epoch
            best_state = [p.data.copy() for p in params]
        else:
            since += 1
            if since >= config.patience:
                log.stopped_early = True
                break
    if config.keep_best:
        for p, d in zip(params, best_state):
            p.data = d.copy()
    return model, log, critic
