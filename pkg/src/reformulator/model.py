"""Small GRU encoder-decoder with dot-product attention, and its decoders.

The policy factorises left to right: step t conditions on the encoder states
and the previous target tokens (BOS first).  All decoding routines run through
a tiny stepper protocol (``start``/``step``/``select``) so the same greedy,
sampling and beam code serves both the neural policy and hand-built tabular
models in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Protocol, Sequence

import numpy as np

from . import _kernels
from .numerics import (
    PROB_FLOOR,
    Tensor,
    concat,
    gru_cell,
    log_prob_gather,
    matmul,
    reshape,
    softmax,
    stack,
    take_rows,
    tanh,
)
from .text import BOS, EOS, DEFAULT_MAX_LEN, SequenceBatch, pad_rows

INIT_SCALE = 0.08
NEG_INF = -1e9


def _uniform(rng: np.random.Generator, shape, name: str) -> Tensor:
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape), requires_grad=True, name=name)


@dataclass
class Seq2SeqParams:
    embed: Tensor  # [V, d], shared by encoder and decoder
    enc_wx: Tensor  # [d, 3h]
    enc_wh: Tensor  # [h, 3h]
    enc_bx: Tensor  # [3h]
    enc_bh: Tensor  # [3h]
    dec_wx: Tensor
    dec_wh: Tensor
    dec_bx: Tensor
    dec_bh: Tensor
    attn_w: Tensor  # [2h, h]: [decoder state ; context] -> attentional state
    attn_b: Tensor  # [h]
    out_w: Tensor  # [h, V]
    out_b: Tensor  # [V]

    @classmethod
    def init(cls, vocab_size: int, d: int = 64, h: int = 128, seed: int = 0) -> "Seq2SeqParams":
        rng = np.random.default_rng(seed)
        shapes = {
            "embed": (vocab_size, d),
            "enc_wx": (d, 3 * h),
            "enc_wh": (h, 3 * h),
            "enc_bx": (3 * h,),
            "enc_bh": (3 * h,),
            "dec_wx": (d, 3 * h),
            "dec_wh": (h, 3 * h),
            "dec_bx": (3 * h,),
            "dec_bh": (3 * h,),
            "attn_w": (2 * h, h),
            "attn_b": (h,),
            "out_w": (h, vocab_size),
            "out_b": (vocab_size,),
        }
        return cls(**{k: _uniform(rng, s, k) for k, s in shapes.items()})

    @classmethod
    def zeros(cls, vocab_size: int, d: int = 64, h: int = 128) -> "Seq2SeqParams":
        p = cls.init(vocab_size, d, h)
        for t in p.parameters():
            t.data[...] = 0.0
        return p

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(V, d, h)."""
        return self.embed.shape[0], self.embed.shape[1], self.enc_wh.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return count_parameters(*self.dims)

    def copy(self) -> "Seq2SeqParams":
        return type(self)(**{k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.named_parameters().items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p.data)) for p in self.parameters())


def count_parameters(V: int, d: int, h: int) -> int:
    gru = d * 3 * h + h * 3 * h + 6 * h
    return V * d + 2 * gru + 2 * h * h + h + h * V + V


@dataclass
class EncoderOutput:
    states: Tensor  # [b, k, h]
    mask: np.ndarray  # [b, k]
    pooled: Tensor  # [b, h], mask-weighted mean of states

    def __len__(self) -> int:
        return self.mask.shape[0]

    def select(self, rows) -> "EncoderOutput":
        rows = np.asarray(rows)
        return EncoderOutput(Tensor(self.states.data[rows]), self.mask[rows], Tensor(self.pooled.data[rows]))


def run_gru_encoder(ids: np.ndarray, mask: np.ndarray, embed: Tensor, wx: Tensor, wh: Tensor, bx: Tensor, bh: Tensor):
    """Unidirectional GRU over ``ids`` [b, k]; returns (states [b,k,h], pooled [b,h])."""
    b, k = ids.shape
    H = wh.shape[0]
    h = Tensor(np.zeros((b, H)))
    states = []
    for t in range(k):
        h = gru_cell(take_rows(embed, ids[:, t]), h, wx, wh, bx, bh)
        states.append(h)
    states = stack(states, axis=1)
    lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    pooled = (states * (mask / lengths)[:, :, None]).sum(axis=1)
    return states, pooled


def encode_query(q: SequenceBatch, params: Seq2SeqParams) -> EncoderOutput:
    """Encode (a batch of) padded queries.  Positions after EOS never reach
    the pooled state or the attention weights."""
    q = q.trim()
    states, pooled = run_gru_encoder(
        q.ids, q.mask, params.embed, params.enc_wx, params.enc_wh, params.enc_bx, params.enc_bh
    )
    return EncoderOutput(states, q.mask, pooled)


def _attend(params: Seq2SeqParams, s: Tensor, states: Tensor, score_bias: np.ndarray) -> Tensor:
    b, H = s.shape
    scores = reshape(matmul(states, reshape(s, (b, H, 1))), (b, -1)) + score_bias
    alpha = softmax(scores)
    ctx = reshape(matmul(reshape(alpha, (b, 1, -1)), states), (b, H))
    return tanh(matmul(concat([s, ctx], axis=-1), params.attn_w) + params.attn_b)


def decoder_step(params: Seq2SeqParams, enc_states: Tensor, score_bias: np.ndarray, prev: np.ndarray, s: Tensor):
    """One decoder step: returns (attentional state [b,h], new recurrent state)."""
    s = gru_cell(take_rows(params.embed, prev), s, params.dec_wx, params.dec_wh, params.dec_bx, params.dec_bh)
    return _attend(params, s, enc_states, score_bias), s


def _score_bias(mask: np.ndarray) -> np.ndarray:
    return (1.0 - mask) * NEG_INF


def decode_teacher_forced(enc: EncoderOutput, target: SequenceBatch, params: Seq2SeqParams) -> Tensor:
    """Per-step output distributions [b, T, V] conditioned on the gold history.

    Distributions are produced for every column of ``target`` (padding
    included); losses mask the post-EOS steps out.
    """
    ids = target.ids
    b, T = ids.shape
    prev = np.concatenate([np.full((b, 1), BOS, dtype=np.int64), ids[:, :-1]], axis=1)
    bias = _score_bias(enc.mask)
    s = enc.pooled
    outs = []
    for t in range(T):
        o, s = decoder_step(params, enc.states, bias, prev[:, t], s)
        outs.append(o)
    hidden = stack(outs, axis=1)  # [b, T, h]
    H = hidden.shape[-1]
    logits = matmul(reshape(hidden, (b * T, H)), params.out_w) + params.out_b
    return reshape(softmax(logits), (b, T, -1))


def step_log_probs(dists: Tensor, target: SequenceBatch) -> Tensor:
    """log p(target_t | history) for every step, [b, T] (not masked)."""
    return log_prob_gather(dists, target.ids[:, : dists.shape[1]])


def sequence_log_prob(q: SequenceBatch, r: SequenceBatch, params: Seq2SeqParams) -> Tensor:
    """sum_t log p(r_t | r_<t, q) for each row, shape [b]; differentiable."""
    r = r.trim()
    enc = encode_query(q, params)
    dists = decode_teacher_forced(enc, r, params)
    return (step_log_probs(dists, r) * r.mask).sum(axis=1)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    tokens: list[int]
    log_probs: list[float]
    mode: str = "sampled"
    reward: float | None = None
    advantage: float | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def total_log_prob(self) -> float:
        return float(sum(self.log_probs))

    @property
    def ended(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS


class Stepper(Protocol):
    vocab_size: int

    def start(self): ...

    def step(self, state, prev: np.ndarray) -> tuple[np.ndarray, object]: ...

    def select(self, state, rows: np.ndarray): ...


class PolicyStepper:
    """Adapts Seq2SeqParams + EncoderOutput to the stepper protocol (no tape)."""

    def __init__(self, params: Seq2SeqParams, enc: EncoderOutput):
        self.params = params
        self.vocab_size = params.vocab_size
        self.enc = enc

    def start(self):
        e = self.enc
        return (e.states.data, _score_bias(e.mask), e.pooled.data)

    def step(self, state, prev):
        states, bias, s = state
        o, s_new = decoder_step(self.params, Tensor(states), bias, prev, Tensor(s))
        logits = o.data @ self.params.out_w.data + self.params.out_b.data
        return logits, (states, bias, s_new.data)

    def select(self, state, rows):
        states, bias, s = state
        return states[rows], bias[rows], s[rows]


def _log_probs(logits: np.ndarray) -> np.ndarray:
    p = _kernels.softmax_rows(np.ascontiguousarray(logits))
    return np.log(np.maximum(p, PROB_FLOOR))


def greedy_batch(stepper: Stepper, n: int, max_len: int = DEFAULT_MAX_LEN, eos: int = EOS) -> list[Trajectory]:
    """Argmax decoding of ``n`` rows; ties go to the lowest token id."""
    state = stepper.start()
    prev = np.full(n, BOS, dtype=np.int64)
    trajs = [Trajectory([], [], "greedy") for _ in range(n)]
    live = np.arange(n)
    for _ in range(max_len):
        logits, state = stepper.step(state, prev)
        logp = _log_probs(logits)
        tok = logp.argmax(axis=1)
        for j, i in enumerate(live):
            trajs[i].tokens.append(int(tok[j]))
            trajs[i].log_probs.append(float(logp[j, tok[j]]))
        keep = tok != eos
        if not keep.any():
            break
        live = live[keep]
        state = stepper.select(state, np.flatnonzero(keep))
        prev = tok[keep]
    return trajs


def sample_batch(
    stepper: Stepper,
    n: int,
    rng: np.random.Generator,
    max_len: int = DEFAULT_MAX_LEN,
    temperature: float = 1.0,
    eos: int = EOS,
) -> list[Trajectory]:
    """Ancestral sampling from softmax(logits / temperature).

    The recorded log-probabilities are those of the untempered policy, so
    they always agree with ``sequence_log_prob``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    state = stepper.start()
    prev = np.full(n, BOS, dtype=np.int64)
    trajs = [Trajectory([], [], "sampled") for _ in range(n)]
    live = np.arange(n)
    for _ in range(max_len):
        logits, state = stepper.step(state, prev)
        logp = _log_probs(logits)
        probs = _kernels.softmax_rows(np.ascontiguousarray(logits / temperature))
        u = rng.random(len(live))
        cdf = np.cumsum(probs, axis=1)
        tok = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), logits.shape[1] - 1)
        for j, i in enumerate(live):
            trajs[i].tokens.append(int(tok[j]))
            trajs[i].log_probs.append(float(logp[j, tok[j]]))
        keep = tok != eos
        if not keep.any():
            break
        live = live[keep]
        state = stepper.select(state, np.flatnonzero(keep))
        prev = tok[keep]
    return trajs


def beam_search_stepper(stepper: Stepper, beam_width: int, max_len: int = DEFAULT_MAX_LEN, eos: int = EOS) -> list[Trajectory]:
    """Beam search for a single query.

    Hypotheses ending in EOS move to a finished pool; the remaining alive
    beams are refilled to ``beam_width`` from the best non-EOS extensions.
    Hypotheses still alive at ``max_len`` are finished as they stand.
    Search stops once the best alive score cannot beat the k-th finished one.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    state = stepper.start()
    alive: list[tuple[list[int], list[float], float]] = [([], [], 0.0)]
    finished: list[tuple[list[int], list[float], float]] = []
    prev = np.array([BOS], dtype=np.int64)
    for t in range(max_len):
        logits, state = stepper.step(state, prev)
        logp = _log_probs(logits)
        n, V = logp.shape
        totals = np.array([a[2] for a in alive])[:, None] + logp
        # stable ranking: score desc, then beam index, then token id
        order = np.lexsort((np.tile(np.arange(V), n), np.repeat(np.arange(n), V), -totals.reshape(-1)))
        new_alive, rows, toks = [], [], []
        last = t == max_len - 1
        for rank, flat in enumerate(order):
            row, tok = divmod(int(flat), V)
            toks_, lps_, _ = alive[row]
            hyp = (toks_ + [tok], lps_ + [float(logp[row, tok])], float(totals[row, tok]))
            if last:
                # every extension finishes here; only the top k can survive
                finished.append(hyp)
                if rank + 1 == beam_width:
                    break
            elif tok == eos:
                finished.append(hyp)
            else:
                new_alive.append(hyp)
                rows.append(row)
                toks.append(tok)
                if len(new_alive) == beam_width:
                    break
        if last or not new_alive:
            break
        finished.sort(key=lambda f: -f[2])
        if len(finished) >= beam_width and new_alive[0][2] <= finished[beam_width - 1][2]:
            break
        alive = new_alive
        state = stepper.select(state, np.array(rows))
        prev = np.array(toks, dtype=np.int64)
    finished.sort(key=lambda f: -f[2])
    return [Trajectory(tk, lp, "beam") for tk, lp, _ in finished[:beam_width]]


def greedy_decode_batch(enc: EncoderOutput, params: Seq2SeqParams, max_len: int = DEFAULT_MAX_LEN) -> list[Trajectory]:
    return greedy_batch(PolicyStepper(params, enc), len(enc), max_len)


def greedy_decode(enc: EncoderOutput, params: Seq2SeqParams, max_len: int = DEFAULT_MAX_LEN) -> Trajectory:
    return greedy_decode_batch(enc.select([0]), params, max_len)[0]


def sample_trajectories(
    enc: EncoderOutput,
    params: Seq2SeqParams,
    rng: np.random.Generator,
    max_len: int = DEFAULT_MAX_LEN,
    temperature: float = 1.0,
) -> list[Trajectory]:
    return sample_batch(PolicyStepper(params, enc), len(enc), rng, max_len, temperature)


def sample_trajectory(
    enc: EncoderOutput,
    params: Seq2SeqParams,
    max_len: int = DEFAULT_MAX_LEN,
    temperature: float = 1.0,
    seed: int | None = 0,
) -> Trajectory:
    rng = np.random.default_rng(seed)
    return sample_trajectories(enc.select([0]), params, rng, max_len, temperature)[0]


def beam_search(enc: EncoderOutput, params: Seq2SeqParams, beam_width: int, max_len: int = DEFAULT_MAX_LEN) -> list[Trajectory]:
    """``beam_width`` hypotheses for the first query in ``enc``, best first."""
    return beam_search_stepper(PolicyStepper(params, enc.select([0])), beam_width, max_len)


def trajectories_to_batch(trajs: Sequence[Trajectory], max_len: int = DEFAULT_MAX_LEN) -> SequenceBatch:
    return pad_rows([t.tokens for t in trajs], max(max_len, max(len(t) for t in trajs)))
