"""Tokenizer, prompt templates, JSONL datasets and the synthetic sort task."""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import asdict, dataclass, fields
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# byte-level vocabulary: ids 0..255 are raw bytes, specials follow
EOS_ID = 256
RM_SCORE_ID = 257
VOCAB_SIZE = 258
SPECIAL_TOKENS = {EOS_ID: "<eos>", RM_SCORE_ID: "<rm_score>"}


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


@dataclass(frozen=True)
class Sample:
    instruction: str
    response: str


@dataclass(frozen=True)
class PreferencePair:
    instruction: str
    chosen: str
    rejected: str


@dataclass(frozen=True)
class LabeledSample:
    instruction: str
    response: str
    raw_reward: float
    norm_reward: float


@dataclass(frozen=True)
class Prompt:
    instruction: str


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    loss_mask: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.loss_mask):
            raise DataError("ids and loss_mask lengths differ")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSeq") -> "TokenSeq":
        return TokenSeq(self.ids + other.ids, self.loss_mask + other.loss_mask)


SCHEMAS: dict[str, type] = {
    "sft": Sample,
    "pref": PreferencePair,
    "labeled": LabeledSample,
    "prompts": Prompt,
}


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

def tokenize(text: str | bytes) -> list[int]:
    raw = text if isinstance(text, bytes) else text.encode("utf-8")
    return list(raw)


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    out = bytearray()
    for i in ids:
        if i < 256:
            out.append(i)
        else:
            out += SPECIAL_TOKENS[i].encode()
    return bytes(out)


def detokenize(ids: Iterable[int]) -> str:
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


def _plain(text: str) -> TokenSeq:
    ids = tokenize(text)
    return TokenSeq(tuple(ids), (0,) * len(ids))


def _supervised(text: str) -> TokenSeq:
    ids = tokenize(text) + [EOS_ID]
    return TokenSeq(tuple(ids), (1,) * len(ids))


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

def chat_prompt(instruction: str) -> TokenSeq:
    return _plain(f"User: {instruction} Assistant: ")


def format_score(score: float) -> str:
    """One decimal, half away from zero: 1.25 -> "1.3", -0.04 -> "0.0"."""
    if not math.isfinite(score):
        raise DataError(f"score must be finite, got {score}")
    q = Decimal(repr(float(score))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    if q == 0:
        q = Decimal("0.0")
    return f"{q:.1f}"


def score_span(score: float) -> TokenSeq:
    ids = (RM_SCORE_ID,) + tuple(tokenize(f" {format_score(score)} "))
    return TokenSeq(ids, (0,) * len(ids))


def format_chat(sample: Sample) -> TokenSeq:
    """``User: {instruction} Assistant: {response}`` + EOS, loss on response + EOS.

    An empty response renders the generation prompt only (no EOS, all-zero mask).
    """
    prompt = chat_prompt(sample.instruction)
    if sample.response == "":
        return prompt
    return prompt + _supervised(sample.response)


def format_ca(sample: Sample, score: float) -> TokenSeq:
    """Chat template with ``<rm_score> a.b`` inserted after ``Assistant:``."""
    prompt = chat_prompt(sample.instruction) + score_span(score)
    if sample.response == "":
        return prompt
    return prompt + _supervised(sample.response)


def pad_batch(seqs: Sequence[TokenSeq], pad_id: int = EOS_ID):
    """Right-pad to a [batch, seq] id array plus mask and true lengths."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s.ids
        mask[r, :len(s)] = s.loss_mask
        lengths[r] = len(s)
    return ids, mask, lengths


def lm_batch(seqs: Sequence[TokenSeq]):
    """Inputs, next-token targets and target mask for teacher forcing."""
    ids, mask, lengths = pad_batch(seqs)
    return ids[:, :-1], ids[:, 1:], mask[:, 1:]


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

def _check_record(obj, cls: type, lineno: int):
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    values = {}
    for f in fields(cls):
        if f.name not in obj:
            raise SchemaError(f"line {lineno}: missing field {f.name!r}")
        v = obj[f.name]
        if f.type in ("str", str):
            if not isinstance(v, str):
                raise SchemaError(f"line {lineno}: field {f.name!r} must be a string")
            if not v.strip():
                raise SchemaError(f"line {lineno}: field {f.name!r} is empty")
        else:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SchemaError(f"line {lineno}: field {f.name!r} must be a number")
            v = float(v)
        values[f.name] = v
    if cls is PreferencePair and values["chosen"] == values["rejected"]:
        raise SchemaError(f"line {lineno}: chosen and rejected are identical")
    return cls(**values)


def load_jsonl(path, schema: str) -> list:
    try:
        cls = SCHEMAS[schema]
    except KeyError:
        raise DataError(f"unknown schema {schema!r}; expected one of {sorted(SCHEMAS)}") from None
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: malformed JSON ({e.msg})") from None
            out.append(_check_record(obj, cls, lineno))
    return out


def dumps_jsonl(records: Iterable) -> str:
    return "".join(json.dumps(asdict(r), ensure_ascii=False) + "\n" for r in records)


def save_jsonl(records: Iterable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_jsonl(records), encoding="utf-8")


def fingerprint(records: Iterable) -> str:
    return hashlib.sha256(dumps_jsonl(records).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# synthetic sort task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskConfig:
    min_len: int = 3
    max_len: int = 8
    # SFT response mix; the remainder after ideal/echo is partially sorted noise
    p_ideal: float = 0.3
    p_echo: float = 0.45
    # chosen must beat rejected by at least this much oracle reward
    pair_margin: float = 0.25
    n_eval: int = 200


def parse_task(instruction: str) -> list[str]:
    head, _, rest = instruction.partition(":")
    digits = rest.split()
    if head.strip() != "sort" or not digits or not all(d.isdigit() and len(d) == 1 for d in digits):
        raise DataError(f"not a sort task: {instruction!r}")
    return digits


def ideal_response(instruction: str) -> str:
    return " ".join(sorted(parse_task(instruction)))


def oracle_reward(instruction: str, response: str) -> float:
    """Share of ideal-answer positions the response gets right.

    Divides by the longer of the two token lists, so trailing junk costs credit.
    """
    ideal = sorted(parse_task(instruction))
    got = response.split()
    if not got:
        return 0.0
    hits = sum(a == b for a, b in zip(ideal, got))
    return hits / max(len(ideal), len(got))


def _random_instruction(rng: random.Random, cfg: TaskConfig) -> str:
    k = rng.randint(cfg.min_len, cfg.max_len)
    return "sort: " + " ".join(str(rng.randrange(10)) for _ in range(k))


def _partial_sort(digits: list[str], rng: random.Random) -> list[str]:
    out = sorted(digits)
    # a few adjacent swaps away from the sorted order
    for _ in range(rng.randint(1, max(1, len(out) // 2))):
        i = rng.randrange(len(out) - 1)
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def corrupt_response(instruction: str, rng: random.Random, cfg: TaskConfig) -> str:
    digits = parse_task(instruction)
    u = rng.random() * (1.0 - cfg.p_ideal)
    if u < cfg.p_echo:
        return " ".join(digits)
    return " ".join(_partial_sort(digits, rng))


def sft_response(instruction: str, rng: random.Random, cfg: TaskConfig) -> str:
    if rng.random() < cfg.p_ideal:
        return ideal_response(instruction)
    return corrupt_response(instruction, rng, cfg)


def synth_generate(cfg: TaskConfig, n: int, seed: int, n_pairs: int | None = None):
    """Deterministic (sft_samples, preference_pairs, eval_prompts).

    ``n`` SFT samples and ``n_pairs`` preference pairs (default ``n``).  Eval
    prompts are drawn first and their instructions are excluded from the
    training sets.
    """
    n_pairs = n if n_pairs is None else n_pairs
    if n < 1 or n_pairs < 1:
        raise DataError("n and n_pairs must be at least 1")
    rng = random.Random(seed)
    eval_prompts, held = [], set()
    while len(eval_prompts) < cfg.n_eval:
        ins = _random_instruction(rng, cfg)
        if ins not in held:
            held.add(ins)
            eval_prompts.append(Prompt(ins))

    def fresh() -> str:
        while True:
            ins = _random_instruction(rng, cfg)
            if ins not in held:
                return ins

    sft = []
    for _ in range(n):
        ins = fresh()
        sft.append(Sample(ins, sft_response(ins, rng, cfg)))

    pairs = []
    while len(pairs) < n_pairs:
        ins = fresh()
        a = sft_response(ins, rng, cfg)
        b = corrupt_response(ins, rng, cfg)
        ra, rb = oracle_reward(ins, a), oracle_reward(ins, b)
        if abs(ra - rb) < max(cfg.pair_margin, 1e-12):
            continue
        chosen, rejected = (a, b) if ra > rb else (b, a)
        pairs.append(PreferencePair(ins, chosen, rejected))
    return sft, pairs, eval_prompts


def alignment_corpus(sft: Sequence[Sample], pairs: Sequence[PreferencePair]) -> list[Sample]:
    """SFT samples plus both sides of every preference pair, duplicates kept."""
    out = list(sft)
    for p in pairs:
        out.append(Sample(p.instruction, p.chosen))
        out.append(Sample(p.instruction, p.rejected))
    return out
