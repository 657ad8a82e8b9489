"""Greedy decoding, plain and score-conditioned."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import EOS_ID, Sample, TokenSeq, chat_prompt, detokenize, format_ca
from .model import ModelParams, SequenceLengthError, lm_forward


def _argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest id
    return np.argmax(logits, axis=-1)


def greedy_ids(params: ModelParams, prompts: Sequence[TokenSeq], max_new_tokens: int) -> list[list[int]]:
    """Greedy continuations for equal-length prompts, decoded as one batch.

    Each row stops at its first EOS (not included) or after ``max_new_tokens``.
    """
    if not prompts:
        return []
    width = len(prompts[0])
    if any(len(p) != width for p in prompts):
        raise ValueError("batched prompts must share a length")
    if width + max_new_tokens > params.config.max_seq_len:
        raise SequenceLengthError("prompt length + max_new_tokens exceeds max_seq_len")
    ids = np.array([p.ids for p in prompts], dtype=np.int64)
    out: list[list[int]] = [[] for _ in prompts]
    done = np.zeros(len(prompts), dtype=bool)
    with nx.no_grad():
        for _ in range(max_new_tokens):
            logits = lm_forward(params, ids).data[:, -1, :]
            nxt = _argmax_lowest(logits)
            for r, tok in enumerate(nxt):
                if done[r]:
                    continue
                if tok == EOS_ID:
                    done[r] = True
                else:
                    out[r].append(int(tok))
            if done.all():
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return out


def greedy_generate(params: ModelParams, prompt: TokenSeq, max_new_tokens: int) -> str:
    if max_new_tokens <= 0:
        return ""
    return detokenize(greedy_ids(params, [prompt], max_new_tokens)[0])


def ca_prompt(instruction: str, condition_score: float) -> TokenSeq:
    return format_ca(Sample(instruction, ""), condition_score)


def ca_generate(params: ModelParams, instruction: str, condition_score: float, max_new_tokens: int) -> str:
    return greedy_generate(params, ca_prompt(instruction, condition_score), max_new_tokens)


def generate_many(params: ModelParams, instructions: Sequence[str], max_new_tokens: int,
                  condition_score: float | None = None) -> list[str]:
    """Greedy responses for many instructions, batching prompts of equal length.

    Output order follows ``instructions``.
    """
    if max_new_tokens <= 0:
        return [""] * len(instructions)
    if condition_score is None:
        prompts = [chat_prompt(i) for i in instructions]
    else:
        prompts = [ca_prompt(i, condition_score) for i in instructions]
    groups: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(idx)
    out = [""] * len(prompts)
    for width in sorted(groups):
        idxs = groups[width]
        for idx, toks in zip(idxs, greedy_ids(params, [prompts[i] for i in idxs], max_new_tokens)):
            out[idx] = detokenize(toks)
    return out
