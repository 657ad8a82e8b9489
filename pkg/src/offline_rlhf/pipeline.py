"""The four offline stages: SFT, reward model, labeling, alignment fine-tune.

Each stage is a plain function over in-memory data; the ``*_stage`` wrappers
add the file side (checkpoint, manifest, stats) used by the CLI.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from . import numerics as nx
from .align import (AlignConfig, EmptyBatchError, RewardStats, alignment_loss, batched_rm_loss,
                    ca_sequences, normalize_rewards, pair_rewards, sft_loss)
from .data import (LabeledSample, PreferencePair, Sample, fingerprint, format_chat, load_jsonl, pad_batch,
                   save_jsonl)
from .model import (ModelConfig, ModelParams, file_sha256, init_params, reward_model_from, rm_forward,
                    save_checkpoint)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    grad_clip_norm: float = 1.0
    checkpoint_path: str = "model.ckpt"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.grad_clip_norm < 0:
            raise ConfigError("grad_clip_norm must be non-negative")


# Toy-scale defaults per stage; the RM runs at 1.8x the SFT/align rate.
STAGE_DEFAULTS: dict[str, dict] = {
    "sft": {"learning_rate": 1e-3, "batch_size": 16, "epochs": 1, "checkpoint_path": "sft.ckpt"},
    "rm": {"learning_rate": 1.8e-3, "batch_size": 16, "epochs": 1, "checkpoint_path": "rm.ckpt"},
    "align": {"learning_rate": 1e-3, "batch_size": 16, "epochs": 1, "checkpoint_path": "aligned.ckpt"},
}

# Keys a config file may carry beyond the TrainConfig fields.
EXTRA_KEYS = {
    "data": None,  # dataset path for train-sft / train-rm / align
    "holdout_fraction": 0.2,  # train-rm held-out split
    "method": "fa", "t": 0.0, "beta_rwr": 5.0, "condition_score": 5.0,
    "max_new_tokens": 24,
}
MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
KNOWN_KEYS = TRAIN_KEYS | MODEL_KEYS | set(EXTRA_KEYS)


def _coerce(key: str, value):
    if isinstance(value, str):
        # flag overrides arrive as strings; reuse the YAML scalar parser
        value = yaml.safe_load(value) if value.strip() else value
    if key in ("method", "data", "checkpoint_path"):
        return None if value is None else str(value)
    if key in ("batch_size", "epochs", "seed", "max_new_tokens") or key in MODEL_KEYS - {"rope_base"}:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    return float(value)


def load_config(path=None, overrides: Mapping[str, object] | None = None) -> dict:
    """Flat key/value config: file values over defaults, ``overrides`` over both.

    Files are YAML mappings (JSON works too).  Unknown keys are rejected.
    """
    values: dict = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a flat mapping")
        values.update(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _coerce(k, v) for k, v in values.items()}


def train_config(values: Mapping, stage: str) -> TrainConfig:
    merged = dict(STAGE_DEFAULTS[stage])
    merged.update({k: v for k, v in values.items() if k in TRAIN_KEYS})
    return TrainConfig(**merged)


def model_config(values: Mapping) -> ModelConfig:
    return ModelConfig(**{k: v for k, v in values.items() if k in MODEL_KEYS})


def align_config(values: Mapping) -> AlignConfig:
    keys = ("method", "t", "beta_rwr", "condition_score")
    merged = {k: EXTRA_KEYS[k] for k in keys}
    merged.update({k: values[k] for k in keys if k in values})
    merged["method"] = str(merged["method"]).lower()
    return AlignConfig(**merged)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    skipped: int = 0
    consumed: int = 0  # samples that contributed to a loss


def fit(params: ModelParams, items: Sequence, loss_fn: Callable[[ModelParams, Sequence], nx.Tensor],
        cfg: TrainConfig, count_fn: Callable[[Sequence], int] | None = None) -> FitResult:
    """Minibatch Adam over shuffled ``items`` with constant lr and global-norm clipping.

    ``loss_fn`` may raise :class:`EmptyBatchError` to skip a step.
    """
    if not items:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state = nx.AdamState()
    res = FitResult(params)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        for start in range(0, len(items), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            try:
                loss = loss_fn(res.params, batch)
            except EmptyBatchError:
                res.skipped += 1
                continue
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {res.steps}")
            nx.backward(loss)
            grads = {k: t.grad for k, t in res.params.tensors.items() if t.grad is not None}
            grads, _ = nx.clip_grad_norm(grads, cfg.grad_clip_norm)
            new = nx.adam_step(res.params.arrays(), grads, state, cfg.learning_rate)
            res.params = res.params.with_arrays(new)
            res.losses.append(value)
            res.steps += 1
            res.consumed += count_fn(batch) if count_fn else len(batch)
    return res


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def train_sft(cfg: TrainConfig, samples: Sequence[Sample], model_cfg: ModelConfig | None = None,
              init: ModelParams | None = None) -> FitResult:
    if not samples:
        raise ValueError("SFT dataset is empty")
    params = init if init is not None else init_params(model_cfg or ModelConfig(), cfg.seed)
    seqs = [format_chat(s) for s in samples]
    res = fit(params, seqs, sft_loss, cfg)
    res.params.meta = {"stage": "sft"}
    return res


def pairwise_accuracy(rm: ModelParams, pairs: Sequence[PreferencePair], batch_size: int = 64) -> float:
    """Share of pairs with r(chosen) > r(rejected); exact ties count one half."""
    if not pairs:
        raise ValueError("no pairs to score")
    score = 0.0
    with nx.no_grad():
        for i in range(0, len(pairs), batch_size):
            r_w, r_l = pair_rewards(rm, pairs[i:i + batch_size])
            score += float(np.sum(r_w.data > r_l.data)) + 0.5 * float(np.sum(r_w.data == r_l.data))
    return score / len(pairs)


def split_pairs(pairs: Sequence[PreferencePair], holdout_fraction: float, seed: int):
    if not 0 <= holdout_fraction < 1:
        raise ConfigError("holdout_fraction must be in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_hold = int(round(len(pairs) * holdout_fraction))
    held = [pairs[i] for i in sorted(order[:n_hold])]
    train = [pairs[i] for i in sorted(order[n_hold:])]
    return train, held


@dataclass
class RMResult:
    fit: FitResult
    train_pairs: int
    heldout_pairs: int
    heldout_accuracy: float | None
    initial_accuracy: float | None


def train_rm(cfg: TrainConfig, pairs: Sequence[PreferencePair], init: ModelParams,
             holdout_fraction: float = 0.2) -> RMResult:
    """Ranking-loss training of a reward head on the SFT trunk."""
    if not pairs:
        raise ValueError("preference dataset is empty")
    if init.kind != "lm":
        raise ConfigError("reward model must start from an SFT checkpoint")
    train, held = split_pairs(pairs, holdout_fraction, cfg.seed)
    rm = reward_model_from(init)
    initial = pairwise_accuracy(rm, held) if held else None
    res = fit(rm, train, batched_rm_loss, cfg)
    res.params.meta = {"stage": "rm"}
    acc = pairwise_accuracy(res.params, held) if held else None
    return RMResult(res, len(train), len(held), acc, initial)


def score_samples(rm: ModelParams, samples: Sequence[Sample], batch_size: int = 64) -> list[float]:
    if rm.kind != "rm":
        raise ConfigError("labeling needs a reward-model checkpoint")
    out: list[float] = []
    with nx.no_grad():
        for i in range(0, len(samples), batch_size):
            ids, _, lengths = pad_batch([format_chat(s) for s in samples[i:i + batch_size]])
            out.extend(float(r) for r in rm_forward(rm, ids, lengths).data)
    return out


def label_dataset(rm: ModelParams, samples: Sequence[Sample]) -> tuple[list[LabeledSample], RewardStats]:
    """Raw RM scores plus dataset-level normalised rewards."""
    if not samples:
        raise ValueError("nothing to label")
    raw = score_samples(rm, samples)
    norm, stats = normalize_rewards(raw)
    if stats.degenerate:
        log.warning("reward model gave a constant score to every sample; normalised rewards are all zero")
    labeled = [LabeledSample(s.instruction, s.response, r, z) for s, r, z in zip(samples, raw, norm)]
    return labeled, stats


def align_finetune(cfg: TrainConfig, acfg: AlignConfig, labeled: Sequence[LabeledSample], init: ModelParams,
                   stats: RewardStats | None) -> FitResult:
    if stats is None:
        raise StageOrderError("labeled dataset has no reward statistics; run the label stage first")
    if init.kind != "lm":
        raise ConfigError("alignment starts from an SFT checkpoint")
    if not labeled:
        raise ValueError("labeled dataset is empty")
    if acfg.method == "fa":
        count = lambda b: sum(s.norm_reward > acfg.t for s in b)  # noqa: E731
    else:
        count = None
    res = fit(init.copy(), list(labeled), lambda p, b: alignment_loss(p, b, acfg), cfg, count)
    meta = {"stage": "align", "method": acfg.method}
    if acfg.method == "fa":
        meta["t"] = acfg.t
    elif acfg.method == "rwr":
        meta["beta_rwr"] = acfg.beta_rwr
    else:
        meta["condition_score"] = acfg.condition_score
    res.params.meta = meta
    return res


def training_sequences(labeled: Sequence[LabeledSample], method: str):
    """The token sequences a method trains on (CA carries the score span)."""
    if method == "ca":
        return ca_sequences(labeled)
    return [format_chat(Sample(s.instruction, s.response)) for s in labeled]


# ---------------------------------------------------------------------------
# files: checkpoints, manifests, stats
# ---------------------------------------------------------------------------

def manifest_path(artifact) -> Path:
    return Path(str(artifact) + ".manifest.json")


def stats_path(labeled_jsonl) -> Path:
    p = Path(labeled_jsonl)
    return p.with_name(p.stem + ".stats.json")


def write_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(stage: str, config: Mapping, dataset_fp: str, metrics: Mapping, artifact,
                   artifact_sha: str) -> Path:
    path = manifest_path(artifact)
    write_json({"stage": stage, "config": dict(config), "dataset_fingerprint": dataset_fp,
                "metrics": dict(metrics), "checkpoint": {"file": Path(artifact).name, "sha256": artifact_sha}},
               path)
    return path


def save_stats(stats: RewardStats, path) -> None:
    write_json(asdict(stats), path)


def load_stats(path) -> RewardStats:
    path = Path(path)
    if not path.exists():
        raise StageOrderError(f"reward statistics file {path} is missing; run the label stage first")
    return RewardStats(**json.loads(path.read_text(encoding="utf-8")))


def load_labeled(path) -> tuple[list[LabeledSample], RewardStats]:
    return load_jsonl(path, "labeled"), load_stats(stats_path(path))


def _fit_metrics(res: FitResult) -> dict:
    return {"steps": res.steps, "skipped_steps": res.skipped, "samples_used": res.consumed,
            "initial_loss": res.losses[0] if res.losses else None,
            "final_loss": res.losses[-1] if res.losses else None, "loss_curve": res.losses}


def sft_stage(values: Mapping, samples: Sequence[Sample]) -> tuple[FitResult, Path]:
    cfg = train_config(values, "sft")
    mcfg = model_config(values)
    res = train_sft(cfg, samples, mcfg)
    sha = save_checkpoint(res.params, cfg.checkpoint_path)
    snapshot = {**asdict(cfg), **asdict(mcfg)}
    write_manifest("sft", snapshot, fingerprint(samples), _fit_metrics(res), cfg.checkpoint_path, sha)
    return res, Path(cfg.checkpoint_path)


def rm_stage(values: Mapping, pairs: Sequence[PreferencePair], init: ModelParams) -> tuple[RMResult, Path]:
    cfg = train_config(values, "rm")
    holdout = float(values.get("holdout_fraction", EXTRA_KEYS["holdout_fraction"]))
    res = train_rm(cfg, pairs, init, holdout)
    sha = save_checkpoint(res.fit.params, cfg.checkpoint_path)
    metrics = {**_fit_metrics(res.fit), "train_pairs": res.train_pairs, "heldout_pairs": res.heldout_pairs,
               "heldout_accuracy": res.heldout_accuracy, "initial_heldout_accuracy": res.initial_accuracy}
    write_manifest("rm", {**asdict(cfg), "holdout_fraction": holdout}, fingerprint(pairs), metrics,
                   cfg.checkpoint_path, sha)
    return res, Path(cfg.checkpoint_path)


def label_stage(rm: ModelParams, samples: Sequence[Sample], out) -> tuple[list[LabeledSample], RewardStats]:
    labeled, stats = label_dataset(rm, samples)
    save_jsonl(labeled, out)
    save_stats(stats, stats_path(out))
    write_manifest("label", {"rm_fingerprint": rm.fingerprint()}, fingerprint(samples),
                   {"stats": asdict(stats)}, out, file_sha256(out))
    return labeled, stats


def align_stage(values: Mapping, labeled: Sequence[LabeledSample], stats: RewardStats | None,
                init: ModelParams) -> tuple[FitResult, Path]:
    cfg = train_config(values, "align")
    acfg = align_config(values)
    res = align_finetune(cfg, acfg, labeled, init, stats)
    sha = save_checkpoint(res.params, cfg.checkpoint_path)
    write_manifest("align", {**asdict(cfg), **asdict(acfg)}, fingerprint(labeled),
                   {**_fit_metrics(res), "reward_stats": asdict(stats)}, cfg.checkpoint_path, sha)
    return res, Path(cfg.checkpoint_path)
