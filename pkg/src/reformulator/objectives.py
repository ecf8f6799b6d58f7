"""Training losses and baselines.

Every batched loss here is a mean over sequences of a per-sequence sum over
unmasked steps.  Advantages and baselines are plain numpy arrays: nothing
computed from rewards ever sits on the policy tape.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .numerics import (
    PROB_FLOOR,
    Tape,
    Tensor,
    backward,
    clamp,
    log,
    log_prob_gather,
    matmul,
    sgd_step,
    square,
    tanh,
    zero_grad,
)


def mle_loss(dists: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked negative log-likelihood of ``target`` [b, T] under ``dists`` [b, T, V]."""
    target = np.asarray(target)
    mask = np.asarray(mask, dtype=np.float64)
    if dists.data.ndim == 2:
        dists = dists.reshape(1, *dists.shape)
        target, mask = target.reshape(1, -1), mask.reshape(1, -1)
    T = dists.shape[1]
    target, mask = target[:, :T], mask[:, :T]
    if not mask.any():
        warnings.warn("mle_loss called with an all-masked target; returning zero", RuntimeWarning)
    nll = -(log_prob_gather(dists, target) * mask).sum(axis=1)
    return nll.mean()


def reinforce_surrogate_loss(log_probs: Tensor, mask: np.ndarray, advantages: Sequence[float]) -> Tensor:
    """-(1/b) sum_i A_i sum_t log p(r_t^i | ...).

    ``log_probs`` [b, T] must live on the current tape; ``advantages`` are
    treated as constants.  The gradient of this loss is the REINFORCE
    estimate of -grad J.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.size == 0 or log_probs.data.size == 0:
        raise ValueError("reinforce_surrogate_loss needs a non-empty batch")
    if adv.shape[0] != log_probs.shape[0]:
        raise ValueError(f"{adv.shape[0]} advantages for {log_probs.shape[0]} trajectories")
    seq = (log_probs * mask[:, : log_probs.shape[1]]).sum(axis=1)
    return -(seq * adv).mean()


@dataclass
class AdvantageBatch:
    rewards: np.ndarray
    baselines: np.ndarray
    advantages: np.ndarray
    kind: str  # mean | critic | self-critical

    @classmethod
    def from_baselines(cls, rewards, baselines, kind: str) -> "AdvantageBatch":
        r = np.asarray(rewards, dtype=np.float64)
        b = np.broadcast_to(np.asarray(baselines, dtype=np.float64), r.shape).copy()
        return cls(r, b, r - b, kind)


def mean_baseline(rewards: Sequence[float]) -> AdvantageBatch:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("mean_baseline needs at least one reward")
    # exact when all rewards agree, so the advantages are exactly zero
    b = r[0] if np.all(r == r[0]) else r.mean()
    return AdvantageBatch.from_baselines(r, np.full_like(r, b), "mean")


def self_critical_baseline(sampled_rewards: Sequence[float], greedy_rewards: Sequence[float]) -> AdvantageBatch:
    """Baseline each sample with the reward of the greedy decode of the same query."""
    s = np.asarray(sampled_rewards, dtype=np.float64)
    g = np.asarray(greedy_rewards, dtype=np.float64)
    if s.shape != g.shape:
        raise ValueError(f"sampled/greedy reward lengths differ: {s.shape} vs {g.shape}")
    return AdvantageBatch.from_baselines(s, g, "self-critical")


# ---------------------------------------------------------------------------
# critic
# ---------------------------------------------------------------------------


@dataclass
class CriticParams:
    """Two affine layers with a tanh between: [h -> h_c -> 1]."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, h: int, h_c: int = 64, seed: int = 0, scale: float = 0.08) -> "CriticParams":
        rng = np.random.default_rng(seed)

        def u(shape, name):
            return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)

        return cls(u((h, h_c), "w1"), u((h_c,), "b1"), u((h_c, 1), "w2"), u((1,), "b2"))

    def named_parameters(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def __call__(self, pooled) -> Tensor:
        """Raw (unclamped) value estimates, shape [b]."""
        x = Tensor(np.asarray(pooled.data if isinstance(pooled, Tensor) else pooled, dtype=np.float64))
        hidden = tanh(matmul(x, self.w1) + self.b1)
        return (matmul(hidden, self.w2) + self.b2).reshape(-1)


def critic_baseline(pooled, critic: CriticParams) -> np.ndarray:
    """B_i = f_c(pooled_i), clamped to the reward range [0, 1].

    ``pooled`` is detached first, so no policy gradient passes through it.
    """
    return np.clip(critic(pooled).data, 0.0, 1.0)


def critic_mse(critic: CriticParams, pooled, rewards) -> Tensor:
    r = np.asarray(rewards, dtype=np.float64)
    return square(critic(pooled) - r).mean()


def critic_update(critic: CriticParams, pooled, rewards, lr: float) -> tuple[CriticParams, float]:
    """One SGD step on the mean squared error between predictions and rewards."""
    params = critic.parameters()
    zero_grad(params)
    with Tape() as tape:
        loss = critic_mse(critic, pooled, rewards)
    backward(loss, tape)
    sgd_step(params, lr)
    return critic, loss.item()


# ---------------------------------------------------------------------------
# regularisers and auxiliary losses
# ---------------------------------------------------------------------------


def entropy_regularizer(dists: Tensor, mask: np.ndarray, lam: float = 0.01) -> Tensor:
    """lam * sum_t sum_j p log p over unmasked steps (mean over sequences).

    This is minus lam times the entropy, so adding it to a minimised loss
    pushes the policy toward higher entropy.  0 log 0 is taken as 0.
    """
    if dists.data.ndim == 2:
        dists = dists.reshape(1, *dists.shape)
        mask = np.asarray(mask).reshape(1, -1)
    T = dists.shape[1]
    plogp = (dists * log(dists)).sum(axis=2)
    return (plogp * np.asarray(mask, dtype=np.float64)[:, :T]).sum(axis=1).mean() * lam


def candidate_sets(tokens: Sequence[int]) -> list[set[int]]:
    """Negative candidates C^t = {r_1..r_{t-1}} minus {r_t} for each step."""
    seen: set[int] = set()
    out = []
    for tok in tokens:
        out.append(seen - {tok})
        seen = seen | {tok}
    return out


def candidate_mask(tokens: np.ndarray, mask: np.ndarray, vocab_size: int) -> np.ndarray:
    b, T = tokens.shape
    cand = np.zeros((b, T, vocab_size))
    for i in range(b):
        seen = np.zeros(vocab_size, dtype=bool)
        for t in range(T):
            if not mask[i, t]:
                break
            cand[i, t] = seen
            cand[i, t, tokens[i, t]] = 0.0
            seen[tokens[i, t]] = True
    return cand


def unlikelihood_loss(
    dists: Tensor,
    tokens: np.ndarray,
    mask: np.ndarray,
    alpha: float = 1.0,
    weights: Sequence[float] | None = None,
) -> Tensor:
    """Per step: -log p(r_t) - alpha * sum_{c in C^t} log(1 - p(c)).

    ``weights`` (advantages in RL) scale each sequence's sum.  With
    ``alpha = 0`` and no weights this is exactly ``mle_loss``.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=np.float64)
    if dists.data.ndim == 2:
        dists = dists.reshape(1, *dists.shape)
        tokens, mask = tokens.reshape(1, -1), mask.reshape(1, -1)
    T = dists.shape[1]
    tokens, mask = tokens[:, :T], mask[:, :T]
    nll = -(log_prob_gather(dists, tokens) * mask).sum(axis=1)
    if alpha > 0:
        cand = candidate_mask(tokens, mask, dists.shape[2])
        one_minus = log(clamp(1.0 - dists, lo=PROB_FLOOR), floor=PROB_FLOOR)
        nll = nll - (one_minus * cand).sum(axis=(1, 2)) * alpha
    if weights is not None:
        nll = nll * np.asarray(weights, dtype=np.float64)
    return nll.mean()


def mixed_objective(pg_loss: Tensor, sc_loss: Tensor, weights: tuple[float, float] = (0.5, 0.5)) -> Tensor:
    w_pg, w_sc = weights
    return pg_loss * w_pg + sc_loss * w_sc
