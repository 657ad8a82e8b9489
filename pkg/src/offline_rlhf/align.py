"""Alignment losses and reward normalisation.

All sequence losses share one reduction: masked mean NLL per sequence, then a
(possibly weighted) mean over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import LabeledSample, PreferencePair, Sample, TokenSeq, format_ca, format_chat, lm_batch, pad_batch
from .model import ModelParams, lm_forward, rm_forward
from .numerics import Tensor

METHODS = ("fa", "rwr", "ca")
RWR_CLAMP = 10.0


class EmptyBatchError(ValueError):
    """Raised when the FA filter leaves nothing to train on."""


@dataclass(frozen=True)
class RewardStats:
    mean: float
    std: float
    count: int
    degenerate: bool = False


@dataclass(frozen=True)
class AlignConfig:
    method: str = "fa"
    t: float = 0.0
    beta_rwr: float = 5.0
    condition_score: float = 5.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if not self.beta_rwr > 0:
            raise ValueError("beta_rwr must be positive")


@dataclass(frozen=True)
class PPOObjectiveConfig:
    beta_kl: float = 0.01
    gamma: float = 0.0

    def __post_init__(self):
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be non-negative")
        if self.gamma != 0:
            raise ValueError("only gamma == 0 is supported")


# ---------------------------------------------------------------------------
# per-sequence NLL
# ---------------------------------------------------------------------------

def batch_nll(params: ModelParams, seqs: Sequence[TokenSeq]) -> Tensor:
    """[batch] masked mean NLL of each sequence."""
    inputs, targets, mask = lm_batch(seqs)
    return nx.sequence_nll(lm_forward(params, inputs), targets, mask)


def sft_loss(params: ModelParams, seqs: Sequence[TokenSeq]) -> Tensor:
    return nx.mean(batch_nll(params, seqs))


# ---------------------------------------------------------------------------
# reward model
# ---------------------------------------------------------------------------

def rm_ranking_loss(r_w, r_l) -> Tensor:
    """-log sigmoid(r_w - r_l) as softplus(r_l - r_w); elementwise."""
    return nx.softplus(nx.sub(r_l, r_w))


def pair_rewards(params: ModelParams, pairs: Sequence[PreferencePair]) -> tuple[Tensor, Tensor]:
    seqs = [format_chat(Sample(p.instruction, p.chosen)) for p in pairs]
    seqs += [format_chat(Sample(p.instruction, p.rejected)) for p in pairs]
    ids, _, lengths = pad_batch(seqs)
    r = rm_forward(params, ids, lengths)
    n = len(pairs)
    return r[:n], r[n:]


def batched_rm_loss(params: ModelParams, pairs: Sequence[PreferencePair]) -> Tensor:
    r_w, r_l = pair_rewards(params, pairs)
    return nx.mean(rm_ranking_loss(r_w, r_l))


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def normalize_rewards(raw: Sequence[float]) -> tuple[list[float], RewardStats]:
    """Zero mean, unit sample (n-1) std.  Constant input maps to zeros, flagged degenerate."""
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty reward list")
    mu = float(np.mean(x))
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    if sd < 1e-12:
        return [0.0] * x.size, RewardStats(mu, sd, int(x.size), degenerate=True)
    z = (x - mu) / sd
    return z.tolist(), RewardStats(mu, sd, int(x.size))


# ---------------------------------------------------------------------------
# offline alignment losses
# ---------------------------------------------------------------------------

def _chat_seqs(batch: Sequence[LabeledSample]) -> list[TokenSeq]:
    return [format_chat(Sample(s.instruction, s.response)) for s in batch]


def fa_loss(params: ModelParams, batch: Sequence[LabeledSample], t: float) -> Tensor:
    """SFT loss over samples with norm_reward > t (strict)."""
    if not batch:
        raise EmptyBatchError("empty batch")
    kept = [s for s in batch if s.norm_reward > t]
    if not kept:
        raise EmptyBatchError("empty filtered batch")
    return sft_loss(params, _chat_seqs(kept))


def rwr_weights(rewards: Sequence[float], beta: float) -> np.ndarray:
    r = np.clip(np.asarray(rewards, dtype=np.float64), -RWR_CLAMP, RWR_CLAMP)
    # scalar libm exp per sample (numpy's vectorised exp can differ in the last ulp)
    return np.array([math.exp(v / beta) for v in r.tolist()])


def rwr_loss(params: ModelParams, batch: Sequence[LabeledSample], beta: float) -> Tensor:
    """Mean over the batch of exp(clamp(r)/beta) * per-sequence NLL."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    w = rwr_weights([s.norm_reward for s in batch], beta)
    # factor out the largest weight: same value, and a constant-reward batch
    # reduces to exactly w * sft_loss
    w_max = float(np.max(w))
    return nx.mean(batch_nll(params, _chat_seqs(batch)) * (w / w_max)) * w_max


def ca_sequences(batch: Sequence[LabeledSample]) -> list[TokenSeq]:
    return [format_ca(Sample(s.instruction, s.response), s.norm_reward) for s in batch]


def ca_loss(params: ModelParams, batch: Sequence[LabeledSample]) -> Tensor:
    """SFT loss on sequences conditioned on each sample's own normalised reward."""
    return sft_loss(params, ca_sequences(batch))


def alignment_loss(params: ModelParams, batch: Sequence[LabeledSample], cfg: AlignConfig) -> Tensor:
    if cfg.method == "fa":
        return fa_loss(params, batch, cfg.t)
    if cfg.method == "rwr":
        return rwr_loss(params, batch, cfg.beta_rwr)
    return ca_loss(params, batch)


# ---------------------------------------------------------------------------
# KL-regularised objective (diagnostic only)
# ---------------------------------------------------------------------------

def response_logprob(params: ModelParams, seqs: Sequence[TokenSeq]) -> Tensor:
    """[batch] log-probability of the masked (response) tokens, summed."""
    inputs, targets, mask = lm_batch(seqs)
    nll = nx.token_nll(lm_forward(params, inputs), targets)
    return -nx.tsum(nll * mask, axis=-1)


def alignment_objective(policy: ModelParams, ref: ModelParams, batch: Sequence[LabeledSample],
                        cfg: PPOObjectiveConfig) -> Tensor:
    """Mean of norm_reward - beta_kl * (log pi_policy - log pi_ref) over the batch."""
    if policy.config.vocab_size != ref.config.vocab_size:
        raise ValueError("policy and reference vocabularies differ")
    seqs = _chat_seqs(batch)
    rewards = np.array([s.norm_reward for s in batch])
    lp = response_logprob(policy, seqs)
    with nx.no_grad():
        lr = response_logprob(ref, seqs).data
    if cfg.beta_kl == 0:
        return nx.mean(nx.Tensor(rewards) + lp * 0.0)
    return nx.mean(nx.Tensor(rewards) - (lp - lr) * cfg.beta_kl)


def mean_reward(batch: Sequence[LabeledSample]) -> float:
    return float(np.mean([s.norm_reward for s in batch]))
