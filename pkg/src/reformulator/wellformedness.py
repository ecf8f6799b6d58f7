"""Six-way query well-formedness rater.

Ratings are averages of five binary human judgements, so they take one of
six values.  The model is a GRU text encoder (same recurrence as the
reformulator's encoder) with a six-way softmax head; scoring renders the
argmax class as its rating string, e.g. ``"0.8"``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import atomic_write_text, load_arrays, save_arrays
from .model import run_gru_encoder
from .numerics import Tape, Tensor, backward, clip_grad_norm, log_softmax, matmul, pick, sgd_step, zero_grad
from .text import WELLFORMED_PREFIX, Vocabulary, build_vocab, encode_batch

log = logging.getLogger(__name__)

RATINGS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
RATING_STRINGS = ("0.0", "0.2", "0.4", "0.6", "0.8", "1.0")
WELL_FORMED_THRESHOLD = 0.8


def rating_class(rating: float) -> int:
    k = int(round(rating * 5))
    if not 0 <= k <= 5 or abs(rating - RATINGS[k]) > 1e-9:
        raise ValueError(f"rating {rating!r} is not one of {RATING_STRINGS}")
    return k


def render_rating(rating: float) -> str:
    return RATING_STRINGS[rating_class(rating)]


def parse_rating(text: str) -> float:
    text = text.strip()
    if text not in RATING_STRINGS:
        raise ValueError(f"rating string {text!r} is not one of {RATING_STRINGS}")
    return RATINGS[RATING_STRINGS.index(text)]


def wf_binary(rating: float) -> bool:
    """Well-formed iff the rating is at least 0.8."""
    return RATINGS[rating_class(rating)] >= WELL_FORMED_THRESHOLD - 1e-9


@dataclass(frozen=True)
class RatedQuery:
    text: str
    rating: float

    def __post_init__(self):
        rating_class(self.rating)


def save_rated_corpus(items: Iterable[RatedQuery], path: str | Path) -> None:
    atomic_write_text(path, "".join(f"{q.text}\t{render_rating(q.rating)}\n" for q in items))


def load_rated_corpus(path: str | Path) -> list[RatedQuery]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{n}: expected 'text<TAB>rating'")
        text, rating = line.rsplit("\t", 1)
        out.append(RatedQuery(text, parse_rating(rating)))
    return out


@dataclass
class WfConfig:
    d: int = 32
    h: int = 64
    lr: float = 1.0
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.15
    clip: float = 5.0
    max_len: int = 50
    vocab_size: int = 16000
    seed: int = 0


PARAM_NAMES = ("embed", "wx", "wh", "bx", "bh", "head_w", "head_b")


class WfModel:
    def __init__(self, vocab: Vocabulary, d: int = 32, h: int = 64, seed: int = 0, max_len: int = 50):
        rng = np.random.default_rng(seed)
        V = len(vocab)
        shapes = {
            "embed": (V, d),
            "wx": (d, 3 * h),
            "wh": (h, 3 * h),
            "bx": (3 * h,),
            "bh": (3 * h,),
            "head_w": (h, len(RATINGS)),
            "head_b": (len(RATINGS),),
        }
        self.params = {k: Tensor(rng.uniform(-0.08, 0.08, size=s), requires_grad=True, name=k) for k, s in shapes.items()}
        self.vocab = vocab
        self.max_len = max_len

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in PARAM_NAMES]

    def log_probs(self, texts: Sequence[str]) -> Tensor:
        """Class log-probabilities [b, 6]."""
        batch = encode_batch(texts, self.vocab, WELLFORMED_PREFIX, self.max_len).trim()
        p = self.params
        _, pooled = run_gru_encoder(batch.ids, batch.mask, p["embed"], p["wx"], p["wh"], p["bx"], p["bh"])
        return log_softmax(matmul(pooled, p["head_w"]) + p["head_b"])

    def probs(self, texts: Sequence[str]) -> np.ndarray:
        return np.exp(self.log_probs(texts).data)

    def predict_classes(self, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
        out = [self.log_probs(texts[i : i + batch_size]).data.argmax(axis=1) for i in range(0, len(texts), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def save(self, path: str | Path) -> None:
        arrays = {k: v.data for k, v in self.params.items()}
        save_arrays(path, "wellformedness", arrays, self.vocab, {"max_len": self.max_len})

    @classmethod
    def load(cls, path: str | Path) -> "WfModel":
        arrays, vocab, cfg = load_arrays(path, "wellformedness")
        d = arrays["embed"].shape[1]
        h = arrays["wh"].shape[0]
        model = cls(vocab, d, h, max_len=int(cfg.get("max_len", 50)))
        for k, v in arrays.items():
            model.params[k].data = v.copy()
        return model


@dataclass
class WfHistory:
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def _accuracy(model: WfModel, items: Sequence[RatedQuery]) -> float:
    if not items:
        return 0.0
    pred = model.predict_classes([q.text for q in items])
    gold = np.array([rating_class(q.rating) for q in items])
    return float((pred == gold).mean())


def wf_train(
    corpus: Sequence[RatedQuery],
    config: WfConfig | None = None,
    val: Sequence[RatedQuery] | None = None,
) -> tuple[WfModel, WfHistory]:
    """Cross-entropy training over six classes with patience-based early stopping.

    When ``val`` is not given, ``config.val_fraction`` of ``corpus`` is held
    out.  The returned model carries the parameters of the best validation
    epoch.
    """
    cfg = config or WfConfig()
    corpus = list(corpus)
    if len({rating_class(q.rating) for q in corpus}) < 2:
        raise ValueError("well-formedness corpus must cover at least two rating classes")
    rng = np.random.default_rng(cfg.seed)
    if val is None:
        order = rng.permutation(len(corpus))
        n_val = max(1, int(round(cfg.val_fraction * len(corpus))))
        val = [corpus[i] for i in order[:n_val]]
        train = [corpus[i] for i in order[n_val:]]
    else:
        train = corpus
    vocab = build_vocab([q.text for q in train], cfg.vocab_size, extra=[WELLFORMED_PREFIX])
    model = WfModel(vocab, cfg.d, cfg.h, cfg.seed, cfg.max_len)
    params = model.parameters()
    hist = WfHistory()
    best_acc, best_state, since = -1.0, None, 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            items = [train[i] for i in order[start : start + cfg.batch_size]]
            gold = np.array([rating_class(q.rating) for q in items])
            zero_grad(params)
            with Tape() as tape:
                loss = -pick(model.log_probs([q.text for q in items]), gold).mean()
            backward(loss, tape)
            clip_grad_norm(params, cfg.clip)
            sgd_step(params, cfg.lr)
            losses.append(loss.item())
        hist.train_loss.append(float(np.mean(losses)))
        hist.train_acc.append(_accuracy(model, train))
        acc = _accuracy(model, val)
        hist.val_acc.append(acc)
        log.info("wf epoch %d loss %.4f train %.3f val %.3f", epoch, hist.train_loss[-1], hist.train_acc[-1], acc)
        if acc > best_acc:
            best_acc, since, hist.best_epoch = acc, 0, epoch
            best_state = [p.data.copy() for p in params]
        else:
            since += 1
            if since >= cfg.patience:
                hist.stopped_early = True
                break
    for p, d in zip(params, best_state):
        p.data = d
    return model, hist


def wf_score(model: WfModel, text: str) -> tuple[float, str]:
    """(rating, rating string) of the most probable class."""
    k = int(model.predict_classes([text])[0])
    return RATINGS[k], RATING_STRINGS[k]


def wf_score_batch(model: WfModel, texts: Sequence[str]) -> list[float]:
    return [RATINGS[k] for k in model.predict_classes(list(texts))]


@dataclass
class ClassRow:
    rating: str
    count: int
    accuracy: float
    mad: float  # mean |predicted - gold| over the class


@dataclass
class WfReport:
    rows: list[ClassRow]
    accuracy: float
    binary_accuracy: float
    mean_score: float

    def to_dict(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        lines = ["Score Category | Count | Accuracy | Average Absolute Difference"]
        for r in self.rows:
            lines.append(f"{r.rating} | {r.count} | {r.accuracy:.3f} | {r.mad:.3f}")
        lines.append(f"6-way accuracy {self.accuracy:.4f}; binary accuracy (>= 0.8) {self.binary_accuracy:.4f}; mean score {self.mean_score:.4f}")
        return "\n".join(lines)


def report_from_predictions(pred: Sequence[float], gold: Sequence[float]) -> WfReport:
    pc = np.array([rating_class(x) for x in pred])
    gc = np.array([rating_class(x) for x in gold])
    if gc.size == 0:
        raise ValueError("wf_report needs a non-empty dataset")
    rows = []
    for k, name in enumerate(RATING_STRINGS):
        sel = gc == k
        n = int(sel.sum())
        acc = float((pc[sel] == k).mean()) if n else 0.0
        mad = float(np.abs(pc[sel] - k).mean() * 0.2) if n else 0.0
        rows.append(ClassRow(name, n, acc, mad))
    pv = np.array(RATINGS)[pc]
    gv = np.array(RATINGS)[gc]
    binary = float(((pv >= WELL_FORMED_THRESHOLD - 1e-9) == (gv >= WELL_FORMED_THRESHOLD - 1e-9)).mean())
    return WfReport(rows, float((pc == gc).mean()), binary, float(pv.mean()))


def wf_report(model: WfModel, dataset: Sequence[RatedQuery]) -> WfReport:
    """Per-class count, accuracy and mean absolute difference, plus
    binary accuracy at 0.8 and the dataset's mean predicted score."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("wf_report needs a non-empty dataset")
    pred = wf_score_batch(model, [q.text for q in dataset])
    return report_from_predictions(pred, [q.rating for q in dataset])


class WfEnvironment:
    """Reward = predicted well-formedness rating of the reformulation."""

    def __init__(self, model: WfModel):
        self.model = model

    def reward(self, text: str, qid: str) -> float:
        return wf_score(self.model, text)[0]
