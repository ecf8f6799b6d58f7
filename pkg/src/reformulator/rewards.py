"""Reward functions and simulated black-box environments.

Environments map (reformulation text, query id) to one scalar in [0, 1].
They are immutable after construction, so a trainer may call them from
several threads at once.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import _kernels
from .text import tokenize

log = logging.getLogger(__name__)


class RewardEnvironment(Protocol):
    def reward(self, text: str, qid: str) -> float: ...


# ---------------------------------------------------------------------------
# scalar rewards
# ---------------------------------------------------------------------------


def token_f1(gold: str, predicted: str) -> float:
    """Set-based token F1 between two answers; 0 when nothing overlaps."""
    g, p = set(tokenize(gold)), set(tokenize(predicted))
    common = len(g & p)
    if common == 0:
        return 0.0
    precision = common / len(p)
    recall = common / len(g)
    return 2.0 * precision * recall / (precision + recall)


def fluency_reward(log_probs) -> float:
    """R_f = 1 / (1 + H) with H the negative mean per-step log-probability.

    Accepts a Trajectory or a sequence of per-step log-probabilities.
    """
    lps = getattr(log_probs, "log_probs", log_probs)
    lps = np.asarray(lps, dtype=np.float64)
    if lps.size == 0:
        raise ValueError("fluency_reward needs at least one step")
    H = -lps.mean()
    return 1.0 / (1.0 + H)


def composite_reward(base: float, fluency: float, w_f: float = 0.5) -> float:
    """(base + w_f * fluency) / (1 + w_f): stays in [0, 1]."""
    if w_f < 0:
        raise ValueError("fluency weight must be non-negative")
    return (base + w_f * fluency) / (1.0 + w_f)


# ---------------------------------------------------------------------------
# extractive QA stand-in
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QARecord:
    qid: str
    question: str
    answer: str
    context: str

    def __post_init__(self):
        if not self.answer.strip():
            raise ValueError(f"record {self.qid}: empty gold answer")
        a, c = tokenize(self.answer), tokenize(self.context)
        if not any(c[i : i + len(a)] == a for i in range(len(c) - len(a) + 1)):
            raise ValueError(f"record {self.qid}: answer not found verbatim in context")


DEFAULT_TRIGGERS: Mapping[str, str] = {"name": "by", "place": "in", "year": "during"}


def env_answer(
    question: str,
    record: QARecord,
    triggers: Mapping[str, str] = DEFAULT_TRIGGERS,
    max_span: int = 3,
    window: int = 2,
    bonus: float = 10.0,
) -> str:
    """Keyword-driven span extraction.

    Every span of up to ``max_span`` context tokens is scored by its overlap
    with the question (tokens inside the span count double, tokens within
    ``window`` of it once).  For every trigger keyword present in the
    question, spans that start right after the keyword's cue token get
    ``bonus`` on top.  Deterministic; ties go to the earliest, shortest span.
    """
    ctx = tokenize(record.context)
    if not ctx:
        return ""
    q = set(tokenize(question))
    in_q = np.array([1.0 if t in q else 0.0 for t in ctx])
    extra = np.zeros(len(ctx))
    cues = {triggers[k] for k in q if k in triggers}
    for i in range(1, len(ctx)):
        if ctx[i - 1] in cues:
            extra[i] += bonus
    s, e = _kernels.best_span(in_q, extra, max_span, window)
    return " ".join(ctx[s:e])


class QAEnvironment:
    """Black-box QA reward: token F1 of the extracted answer against gold."""

    def __init__(self, records: Iterable[QARecord], triggers: Mapping[str, str] = DEFAULT_TRIGGERS, **answer_kw):
        self.records = {r.qid: r for r in records}
        self.triggers = dict(triggers)
        self.answer_kw = answer_kw

    def __len__(self) -> int:
        return len(self.records)

    def answer(self, question: str, qid: str) -> str | None:
        rec = self.records.get(qid)
        if rec is None:
            return None
        return env_answer(question, rec, self.triggers, **self.answer_kw)

    def reward(self, text: str, qid: str) -> float:
        rec = self.records.get(qid)
        if rec is None:
            log.warning("QA environment has no document for query id %r; reward 0", qid)
            return 0.0
        return token_f1(rec.answer, env_answer(text, rec, self.triggers, **self.answer_kw))


def save_qa_corpus(records: Iterable[QARecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.qid, "question": r.question, "answer": r.answer, "context": r.context}) + "\n")


def load_qa_corpus(path: str | Path) -> list[QARecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                d = json.loads(line)
                out.append(QARecord(str(d["id"]), d["question"], d["answer"], d["context"]))
            else:
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{n}: expected 4 tab-separated fields (id, question, answer, context)")
                out.append(QARecord(*parts))
    return out


# ---------------------------------------------------------------------------
# hierarchical intent classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HierLabel:
    parent: str
    child: str = ""

    def __post_init__(self):
        if not self.parent:
            raise ValueError("HierLabel needs a non-empty parent")

    @classmethod
    def parse(cls, text: str) -> "HierLabel":
        parent, _, child = text.partition("/")
        return cls(parent, child)

    def __str__(self) -> str:
        return f"{self.parent}/{self.child}"


def ic_reward(predicted: HierLabel | str, gold: HierLabel | str) -> float:
    """1 for an exact intent match, 0.5 when only the parent matches, else 0."""
    p = HierLabel.parse(predicted) if isinstance(predicted, str) else predicted
    g = HierLabel.parse(gold) if isinstance(gold, str) else gold
    if p == g:
        return 1.0
    if p.parent == g.parent:
        return 0.5
    return 0.0


class BowIntentClassifier:
    """Bag-of-words multinomial logistic regression over HierLabels."""

    def __init__(self, l2: float = 1e-3, lr: float = 0.5, epochs: int = 300):
        self.l2, self.lr, self.epochs = l2, lr, epochs
        self.features: dict[str, int] = {}
        self.labels: list[HierLabel] = []
        self.W: np.ndarray | None = None
        self.fallback: HierLabel | None = None

    def _featurize(self, texts: Sequence[str]) -> np.ndarray:
        X = np.zeros((len(texts), len(self.features) + 1))
        X[:, -1] = 1.0
        for i, text in enumerate(texts):
            for tok in tokenize(text):
                j = self.features.get(tok)
                if j is not None:
                    X[i, j] = 1.0
        return X

    def fit(self, texts: Sequence[str], labels: Sequence[HierLabel | str]) -> "BowIntentClassifier":
        labels = [HierLabel.parse(l) if isinstance(l, str) else l for l in labels]
        self.labels = sorted(set(labels), key=str)
        self.fallback = Counter(labels).most_common(1)[0][0] if labels else None
        self.features = {t: i for i, t in enumerate(sorted({t for x in texts for t in tokenize(x)}))}
        X = self._featurize(texts)
        index = {l: i for i, l in enumerate(self.labels)}
        Y = np.zeros((len(texts), len(self.labels)))
        Y[np.arange(len(texts)), [index[l] for l in labels]] = 1.0
        W = np.zeros((X.shape[1], len(self.labels)))
        for _ in range(self.epochs):
            P = _kernels.softmax_rows(np.ascontiguousarray(X @ W))
            W -= self.lr * (X.T @ (P - Y) / len(texts) + self.l2 * W)
        self.W = W
        return self

    def classify(self, text: str) -> HierLabel:
        if self.W is None:
            raise RuntimeError("classifier is not fitted")
        if not tokenize(text) or not any(t in self.features for t in tokenize(text)):
            return self.fallback
        scores = self._featurize([text])[0] @ self.W
        return self.labels[int(np.argmax(scores))]


class ICEnvironment:
    def __init__(self, classifier: BowIntentClassifier, gold: Mapping[str, HierLabel | str]):
        self.classifier = classifier
        self.gold = {k: HierLabel.parse(v) if isinstance(v, str) else v for k, v in gold.items()}

    def reward(self, text: str, qid: str) -> float:
        g = self.gold.get(qid)
        if g is None:
            log.warning("IC environment has no gold intent for query id %r; reward 0", qid)
            return 0.0
        return ic_reward(self.classifier.classify(text), g)


@dataclass(frozen=True)
class ICRecord:
    qid: str
    text: str
    label: HierLabel


def save_ic_corpus(records: Iterable[ICRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.qid, "text": r.text, "label": str(r.label)}) + "\n")


def load_ic_corpus(path: str | Path) -> list[ICRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                d = json.loads(line)
                out.append(ICRecord(str(d.get("id", n)), d["text"], HierLabel.parse(d["label"])))
            else:
                text, label = line.rstrip("\n").rsplit("\t", 1)
                out.append(ICRecord(str(n), text, HierLabel.parse(label)))
    return out


class ConstantEnvironment:
    """Returns the same reward for everything; handy for no-signal runs."""

    def __init__(self, value: float = 0.0):
        if not 0.0 <= value <= 1.0:
            raise ValueError("reward must lie in [0, 1]")
        self.value = value

    def reward(self, text: str, qid: str) -> float:
        return self.value
