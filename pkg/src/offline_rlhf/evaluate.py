"""Cross-model evaluation: oracle scoring, rank scores, judge-prompt text."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Prompt, oracle_reward
from .inference import generate_many
from .model import ModelParams


def rank_scores(values: Mapping[str, float], higher_better: bool = True) -> dict[str, float]:
    """(n + 1) - rank per model, rank 1 = best; ties share their average rank.

    With five models the best gets 5 and the worst 1.
    """
    if len(values) < 2:
        raise ValueError("rank scoring needs at least two models")
    for name, v in values.items():
        if not math.isfinite(v):
            raise ValueError(f"non-finite value for {name!r}: {v}")
    names = list(values)
    keyed = sorted(names, key=lambda k: -values[k] if higher_better else values[k])
    n = len(names)
    ranks: dict[str, float] = {}
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[keyed[j + 1]] == values[keyed[i]]:
            j += 1
        avg = (i + 1 + j + 1) / 2.0
        for k in keyed[i:j + 1]:
            ranks[k] = avg
        i = j + 1
    return {k: (n + 1) - ranks[k] for k in names}


@dataclass
class ModelResult:
    response: str
    oracle_reward: float
    rank: float
    rank_score: float


@dataclass
class PromptResult:
    instruction: str
    models: dict[str, ModelResult]


@dataclass
class EvalReport:
    prompts: list[PromptResult]
    mean_oracle_reward: dict[str, float] = field(default_factory=dict)
    mean_rank_score: dict[str, float] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        prompts = [PromptResult(p["instruction"], {k: ModelResult(**v) for k, v in p["models"].items()})
                   for p in d["prompts"]]
        return cls(prompts, d["mean_oracle_reward"], d["mean_rank_score"], d.get("settings", {}))

    def summary(self) -> str:
        names = list(self.mean_oracle_reward)
        width = max(len(n) for n in names + ["model"])
        lines = [f"{'model':<{width}}  oracle  rank_score"]
        for n in names:
            lines.append(f"{n:<{width}}  {self.mean_oracle_reward[n]:.4f}  {self.mean_rank_score[n]:.4f}")
        return "\n".join(lines)


def is_ca_model(params: ModelParams) -> bool:
    return params.meta.get("method") == "ca"


def oracle_eval(models: Mapping[str, ModelParams], prompts: Sequence[Prompt], max_new_tokens: int = 24,
                condition_score: float | None = None) -> EvalReport:
    """Generate per model, score with the oracle, rank per prompt.

    CA checkpoints are conditioned on ``condition_score`` (default: the score
    stored in the checkpoint); other models decode from the plain chat prompt.
    """
    if len(models) < 2:
        raise ValueError("evaluation needs at least two models")
    instructions = [p.instruction for p in prompts]
    rewards: dict[str, list[float]] = {}
    responses: dict[str, list[str]] = {}
    used_scores: dict[str, float | None] = {}
    for name, params in models.items():
        score = None
        if is_ca_model(params):
            score = condition_score if condition_score is not None else params.meta.get("condition_score", 5.0)
        used_scores[name] = score
        responses[name] = generate_many(params, instructions, max_new_tokens, score)
        rewards[name] = [oracle_reward(i, r) for i, r in zip(instructions, responses[name])]

    results = []
    for idx, ins in enumerate(instructions):
        scores = rank_scores({n: rewards[n][idx] for n in models})
        n_models = len(models)
        results.append(PromptResult(ins, {
            n: ModelResult(responses[n][idx], rewards[n][idx], (n_models + 1) - scores[n], scores[n])
            for n in models}))
    mean_r = {n: float(np.mean(rewards[n])) for n in models}
    mean_s = {n: float(np.mean([p.models[n].rank_score for p in results])) for n in models}
    settings = {"max_new_tokens": max_new_tokens, "condition_scores": used_scores, "n_prompts": len(prompts)}
    return EvalReport(results, mean_r, mean_s, settings)


JUDGE_HEADER = """\
Please act as an impartial judge and evaluate the quality of the responses provided by {count} AI assistants to the user question.
You should choose the assistant that follows the user's instructions and answers the user's questions better.
Your evaluation should consider factors such as the helpfulness, relevance, and level of detail of their responses.

Begin your evaluation by comparing the {count} responses and provide a short explanation.
Avoid any position biases and ensure that the order in which the responses were presented does not influence your decision. Do not allow the length of the responses to influence your evaluation. Do not favor certain names of the assistants. Be as objective as possible.
After providing your explanation, output your final verdict by strictly following this format:

{{Assistant name}}: {{score}}, where the range of {{score}} is 1 to 10.

The answers can have the same score, but you should distinguish them as much as possible.
You should give the assistant's scores one by one after all the explanations.
The followings are the question and answers of Assistant {names},

User Question:
{question}
"""

_NUMBER_WORDS = {2: "two", 3: "three", 4: "four", 5: "five", 6: "six", 7: "seven", 8: "eight", 9: "nine", 10: "ten"}


def render_judge_prompt(question: str, responses: Mapping[str, str]) -> str:
    """Multi-assistant judging prompt, answers in the mapping's order."""
    if len(responses) < 2:
        raise ValueError("a judge prompt needs at least two responses")
    names = list(responses)
    listed = ", ".join(names[:-1]) + " and " + names[-1]
    count = _NUMBER_WORDS.get(len(names), str(len(names)))
    parts = [JUDGE_HEADER.format(count=count, names=listed, question=question)]
    for name in names:
        parts.append(f"\nThe answer of Assistant {name}:\n{responses[name]}\n")
    return "".join(parts)
