"""Seeded desk-scale corpora that stand in for the real datasets.

One small "world" is shared by all generators so that every model sees the
same vocabulary:

* well-formed questions follow ``<wh> <aux> the <modifier> <noun> <relation> ?``
  where the relation word fixes the answer type (person / place / year) and
  the usual wh-word;
* noisy search-style queries are keyword salads of the same content words;
* QA contexts hold one answer per type, each right after a cue word, plus the
  query's content words as a distractor span;
* rated queries are templates damaged by up to five distinct noise operations
  and rated by five simulated annotators;
* intent-classification texts carry hierarchical ``parent/child`` labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rewards import DEFAULT_TRIGGERS, HierLabel, ICRecord, QARecord
from .wellformedness import RATINGS, RatedQuery

MODIFIERS = (
    "nobel", "old", "black", "famous", "first", "great", "royal", "silver", "grand", "modern",
    "ancient", "national", "golden", "little", "new", "red", "northern", "green", "lost", "wild",
)
NOUNS = (
    "prize", "film", "river", "tower", "bridge", "novel", "opera", "company", "temple", "museum",
    "statue", "railway", "painting", "theory", "vaccine", "engine", "festival", "palace", "stadium", "telescope",
)
RELATIONS = {
    "person": ("invented", "wrote", "painted", "discovered", "designed"),
    "place": ("located", "hosted", "housed", "held", "stands"),
    "year": ("opened", "founded", "released", "ended", "started"),
}
ANSWERS = {
    "person": ("curie", "tesla", "verdi", "darwin", "newton", "austen", "monet", "gauss", "euler", "bohr", "planck", "galileo"),
    "place": ("bologna", "paris", "vienna", "cairo", "lima", "oslo", "kyoto", "dublin", "madrid", "prague", "quito", "delhi"),
    "year": ("1909", "1850", "1921", "1888", "1776", "1969", "1815", "1945", "1603", "1999", "1066", "1492"),
}
TYPE_WH = {"person": "who", "place": "where", "year": "when"}
GENERIC_WH = ("what", "which")
AUX = ("is", "was", "did", "does")
FILLER = ("and", "of", "with", "for", "from", "at", "on", "as")
TYPE_KEYWORD = {"person": "name", "place": "place", "year": "year"}
KEYWORDS = tuple(TYPE_KEYWORD.values())
TYPES = tuple(RELATIONS)


@dataclass(frozen=True)
class Question:
    wh: str
    aux: str
    modifier: str
    noun: str
    relation: str
    answer_type: str

    def tokens(self) -> list[str]:
        return [self.wh, self.aux, "the", self.modifier, self.noun, self.relation, "?"]

    def text(self) -> str:
        return " ".join(self.tokens())


def random_question(rng: np.random.Generator, generic_wh_rate: float = 0.2) -> Question:
    t = TYPES[rng.integers(len(TYPES))]
    wh = GENERIC_WH[rng.integers(2)] if rng.random() < generic_wh_rate else TYPE_WH[t]
    return Question(
        wh,
        AUX[rng.integers(len(AUX))],
        MODIFIERS[rng.integers(len(MODIFIERS))],
        NOUNS[rng.integers(len(NOUNS))],
        RELATIONS[t][rng.integers(len(RELATIONS[t]))],
        t,
    )


def noisy_query(q: Question, rng: np.random.Generator) -> str:
    """Keyword-salad form: function words and '?' gone, content shuffled,
    sometimes a repeated word."""
    toks = [q.modifier, q.noun, q.relation]
    if rng.random() < 0.5:
        i = rng.integers(2)
        toks[i], toks[i + 1] = toks[i + 1], toks[i]
    if rng.random() < 0.5:
        toks.insert(rng.integers(len(toks) + 1), toks[rng.integers(len(toks))])
    return " ".join(toks)


# ---------------------------------------------------------------------------
# reformulation pairs
# ---------------------------------------------------------------------------


def reformulation_pairs(n: int, seed: int = 0, keyword_rate: float = 0.25) -> list[tuple[str, str]]:
    """(noisy query, well-formed question) pairs.

    A fraction ``keyword_rate`` of targets end with a stray machine-style
    keyword (``name`` / ``place`` / ``year``) unrelated to the question,
    mimicking the repetitive tails of older reformulators.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        q = random_question(rng)
        target = q.text()
        if rng.random() < keyword_rate:
            target += " " + KEYWORDS[rng.integers(len(KEYWORDS))]
        out.append((noisy_query(q, rng), target))
    return out


def identity_pairs(n: int, vocab_size: int = 150, min_len: int = 3, max_len: int = 8, seed: int = 0) -> list[tuple[str, str]]:
    """Random token sequences paired with themselves."""
    rng = np.random.default_rng(seed)
    words = [f"w{i:03d}" for i in range(vocab_size)]
    out = []
    for _ in range(n):
        ln = rng.integers(min_len, max_len + 1)
        text = " ".join(words[j] for j in rng.integers(vocab_size, size=ln))
        out.append((text, text))
    return out


# ---------------------------------------------------------------------------
# keyword QA
# ---------------------------------------------------------------------------


def qa_records(n: int, seed: int = 0, prefix: str = "q") -> list[QARecord]:
    """Noisy queries with contexts where only a type keyword unlocks the gold span.

    Without a trigger keyword the extractor returns the query's own content
    words (F1 0).  Appending ``TYPE_KEYWORD[type]`` makes it return the gold
    answer (F1 1).
    """
    rng = np.random.default_rng(seed)
    cue = {t: DEFAULT_TRIGGERS[TYPE_KEYWORD[t]] for t in TYPES}
    out = []
    for i in range(n):
        q = random_question(rng)
        answers = {t: ANSWERS[t][rng.integers(len(ANSWERS[t]))] for t in TYPES}
        segments = [[cue[t], answers[t], FILLER[rng.integers(len(FILLER))]] for t in TYPES]
        rng.shuffle(segments)
        ctx = [FILLER[rng.integers(len(FILLER))], q.modifier, q.noun, FILLER[rng.integers(len(FILLER))]]
        for seg in segments:
            ctx.extend(seg)
        out.append(QARecord(f"{prefix}{i:05d}", noisy_query(q, rng), answers[q.answer_type], " ".join(ctx)))
    return out


def qa_answer_type(record: QARecord) -> str:
    for t, rels in RELATIONS.items():
        if any(r in record.question.split() for r in rels):
            return t
    raise ValueError(f"no relation word in {record.question!r}")


# ---------------------------------------------------------------------------
# rated queries
# ---------------------------------------------------------------------------

NOISE_OPS = ("strip_question_mark", "drop_wh_aux", "drop_article", "swap_content", "insert_stray")


def damage(q: Question, ops, rng: np.random.Generator) -> str:
    toks = q.tokens()
    if "insert_stray" in ops:
        if rng.random() < 0.5:
            stray = KEYWORDS[rng.integers(len(KEYWORDS))]
        else:
            stray = [q.modifier, q.noun, q.relation][rng.integers(3)]
        toks.insert(int(rng.integers(1, len(toks) + 1)), stray)
    if "swap_content" in ops:
        a, b = (q.modifier, q.noun) if rng.random() < 0.5 else (q.noun, q.relation)
        ia, ib = toks.index(a), toks.index(b)
        toks[ia], toks[ib] = toks[ib], toks[ia]
    if "drop_article" in ops:
        toks.remove("the")
    if "drop_wh_aux" in ops:
        toks.remove(q.wh)
        toks.remove(q.aux)
    if "strip_question_mark" in ops:
        toks.remove("?")
    return " ".join(toks)


def rated_queries(n: int, seed: int = 0, disagreement: float = 0.2) -> list[RatedQuery]:
    """Rated-query corpus with ratings from five simulated annotators.

    An item damaged by L distinct noise operations draws L ill-formed votes;
    with probability ``disagreement`` one annotator moves the count by one
    (clipped to 0..5).  Rating = well-formed votes / 5.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        q = random_question(rng)
        level = int(rng.integers(len(NOISE_OPS) + 1))
        ops = set(rng.choice(NOISE_OPS, size=level, replace=False)) if level else set()
        ill = level
        if rng.random() < disagreement:
            ill = int(np.clip(ill + (1 if rng.random() < 0.5 else -1), 0, 5))
        out.append(RatedQuery(damage(q, ops, rng), RATINGS[5 - ill]))
    return out


# ---------------------------------------------------------------------------
# intent classification
# ---------------------------------------------------------------------------

IC_PARENTS = {
    "acct": ("account", "acct", "accounts"),
    "card": ("card", "debit", "credit"),
    "wire": ("wire", "transfer", "remittance"),
    "tax": ("tax", "irs", "1099"),
}
IC_CHILDREN = {
    "open": ("open", "create", "start"),
    "close": ("close", "shut", "terminate"),
    "status": ("status", "check", "track"),
}
IC_FILLER = ("please", "help", "need", "want", "to", "my", "client", "can", "you", "today", "asap", "re")


def ic_records(n: int, seed: int = 0, noise: float = 0.03, prefix: str = "ic") -> list[ICRecord]:
    """Short agent-log style requests with ``parent/child`` intents.

    With probability ``noise`` the child word is dropped, so those items only
    carry the parent signal.
    """
    rng = np.random.default_rng(seed)
    parents, children = list(IC_PARENTS), list(IC_CHILDREN)
    out = []
    for i in range(n):
        p = parents[rng.integers(len(parents))]
        c = children[rng.integers(len(children))]
        toks = [IC_FILLER[j] for j in rng.integers(len(IC_FILLER), size=rng.integers(1, 4))]
        words = [IC_PARENTS[p][rng.integers(3)]]
        if rng.random() >= noise:
            words.insert(0, IC_CHILDREN[c][rng.integers(3)])
        for w in words:
            toks.insert(int(rng.integers(len(toks) + 1)), w)
        out.append(ICRecord(f"{prefix}{i:05d}", " ".join(toks), HierLabel(p, c)))
    return out


def synonym_swap(text: str, rng: np.random.Generator) -> str:
    """Replace every parent/child keyword with a different synonym."""
    table = {}
    for group in list(IC_PARENTS.values()) + list(IC_CHILDREN.values()):
        for w in group:
            table[w] = group
    out = []
    for tok in text.split():
        if tok in table:
            alts = [w for w in table[tok] if w != tok]
            tok = alts[rng.integers(len(alts))]
        out.append(tok)
    return " ".join(out)
