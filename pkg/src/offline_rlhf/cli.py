"""Command-line entry point: ``offline-rlhf <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from . import pipeline as P
from .align import METHODS
from .evaluate import is_ca_model, oracle_eval, render_judge_prompt
from .data import Sample, chat_prompt
from .inference import ca_generate, greedy_generate
from .model import load_checkpoint

log = logging.getLogger("offline_rlhf")


class CLIError(Exception):
    pass


def _train_overrides(args) -> dict:
    keys = {"seed": "seed", "lr": "learning_rate", "batch_size": "batch_size", "epochs": "epochs",
            "out": "checkpoint_path", "data": "data"}
    out = {dest: getattr(args, src) for src, dest in keys.items() if getattr(args, src, None) is not None}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CLIError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {p}")
    return p


def _dataset_path(values: dict, what: str) -> Path:
    if not values.get("data"):
        raise CLIError(f"no {what} dataset given (use --data or a 'data' key in the config)")
    return _require_file(values["data"], f"{what} dataset")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = D.TaskConfig(n_eval=args.n_eval)
    sft, pairs, prompts = D.synth_generate(cfg, args.n, args.seed, args.n_pairs)
    out = Path(args.out)
    D.save_jsonl(sft, out / "sft.jsonl")
    D.save_jsonl(pairs, out / "pref.jsonl")
    D.save_jsonl(prompts, out / "eval_prompts.jsonl")
    print(f"wrote {len(sft)} SFT samples, {len(pairs)} preference pairs, {len(prompts)} eval prompts to {out}")
    return 0


def cmd_train_sft(args) -> int:
    values = P.load_config(args.config, _train_overrides(args))
    samples = D.load_jsonl(_dataset_path(values, "SFT"), "sft")
    res, ckpt = P.sft_stage(values, samples)
    print(f"SFT: {res.steps} steps, loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; checkpoint {ckpt}")
    return 0


def cmd_train_rm(args) -> int:
    values = P.load_config(args.config, _train_overrides(args))
    pairs = D.load_jsonl(_dataset_path(values, "preference"), "pref")
    init = load_checkpoint(_require_file(args.init, "init checkpoint"))
    res, ckpt = P.rm_stage(values, pairs, init)
    report = {"train_pairs": res.train_pairs, "heldout_pairs": res.heldout_pairs,
              "heldout_accuracy": res.heldout_accuracy, "initial_heldout_accuracy": res.initial_accuracy,
              "final_loss": res.fit.losses[-1] if res.fit.losses else None}
    P.write_json(report, Path(str(ckpt) + ".accuracy.json"))
    print(json.dumps(report, sort_keys=True))
    return 0


def _load_samples(path) -> list[Sample]:
    """SFT records as-is; preference records contribute both responses."""
    path = _require_file(path, "input dataset")
    with open(path, encoding="utf-8") as fh:
        first = next((line for line in fh if line.strip()), None)
    if first is None:
        return []
    try:
        is_pref = "chosen" in json.loads(first)
    except json.JSONDecodeError:
        is_pref = False
    if is_pref:
        return D.alignment_corpus([], D.load_jsonl(path, "pref"))
    return D.load_jsonl(path, "sft")


def cmd_label(args) -> int:
    rm = load_checkpoint(_require_file(args.rm, "reward checkpoint"))
    samples: list[Sample] = []
    for path in args.inputs:
        samples.extend(_load_samples(path))
    if not samples:
        raise CLIError("no samples to label")
    labeled, stats = P.label_stage(rm, samples, args.out)
    if stats.degenerate:
        print("warning: degenerate rewards (constant); all normalised rewards are 0", file=sys.stderr)
    print(f"labeled {len(labeled)} samples; raw mean {stats.mean:.4f}, std {stats.std:.4f}; "
          f"stats in {P.stats_path(args.out)}")
    return 0


def cmd_align(args) -> int:
    overrides = _train_overrides(args)
    overrides["method"] = args.method
    values = P.load_config(args.config, overrides)
    acfg = P.align_config(values)
    path = _dataset_path(values, "labeled")
    labeled, stats = P.load_labeled(path)
    init = load_checkpoint(_require_file(args.init, "init checkpoint"))
    res, ckpt = P.align_stage(values, labeled, stats, init)
    print(f"{acfg.method.upper()}: {res.steps} steps ({res.skipped} skipped); checkpoint {ckpt}")
    return 0


def cmd_generate(args) -> int:
    params = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    if is_ca_model(params):
        score = args.score if args.score is not None else params.meta.get("condition_score", 5.0)
        text = ca_generate(params, args.prompt, score, args.max_new_tokens)
    else:
        if args.score is not None:
            print("warning: --score ignored; this checkpoint was not trained with <rm_score> conditioning",
                  file=sys.stderr)
        text = greedy_generate(params, chat_prompt(args.prompt), args.max_new_tokens)
    print(text)
    return 0


def cmd_evaluate(args) -> int:
    models = {}
    for item in args.ckpts:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise CLIError(f"--ckpts expects NAME=CKPT, got {item!r}")
        if name in models:
            raise CLIError(f"duplicate model name {name!r}")
        models[name] = load_checkpoint(_require_file(path, f"checkpoint for {name}"))
    if len(models) < 2:
        raise CLIError("evaluate needs at least two checkpoints")
    prompts = D.load_jsonl(_require_file(args.prompts, "prompts file"), "prompts")
    report = oracle_eval(models, prompts, args.max_new_tokens, args.score)
    report.save(args.out)
    print(report.summary())
    return 0


def cmd_judge_prompt(args) -> int:
    responses: dict[str, str] = {}
    path = _require_file(args.responses, "responses file")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise D.DataError(f"line {lineno}: malformed JSON ({e.msg})") from None
            for key in ("name", "response"):
                if not isinstance(obj.get(key), str):
                    raise D.SchemaError(f"line {lineno}: missing field {key!r}")
            responses[obj["name"]] = obj["response"]
    print(render_judge_prompt(args.question, responses), end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser, init: bool) -> None:
    p.add_argument("--config", help="flat YAML/JSON config file")
    if init:
        p.add_argument("--init", required=True, help="checkpoint to start from")
    p.add_argument("--data", help="dataset path (overrides config 'data')")
    p.add_argument("--out", help="checkpoint path (overrides config 'checkpoint_path')")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offline-rlhf", description="Offline alignment pipeline at toy scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic sort-task datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="SFT samples (and preference pairs) to draw")
    p.add_argument("--n-pairs", type=int, help="preference pairs to draw (default: --n)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-eval", type=int, default=200, help="held-out eval prompts")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-sft", help="supervised fine-tuning")
    _add_train_flags(p, init=False)
    p.set_defaults(func=cmd_train_sft)

    p = sub.add_parser("train-rm", help="reward model on preference pairs")
    _add_train_flags(p, init=True)
    p.set_defaults(func=cmd_train_rm)

    p = sub.add_parser("label", help="score samples with a reward model and normalise")
    p.add_argument("--rm", required=True)
    p.add_argument("--in", dest="inputs", action="append", required=True,
                   help="SFT or preference JSONL; repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("align", help="offline alignment fine-tune")
    p.add_argument("--method", required=True, help=f"one of {', '.join(METHODS)}")
    _add_train_flags(p, init=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("generate", help="greedy response for one instruction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True, help="instruction text")
    p.add_argument("--score", type=float, help="conditioning score for CA checkpoints")
    p.add_argument("--max-new-tokens", type=int, default=24)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="oracle-scored, rank-scored comparison")
    p.add_argument("--ckpts", nargs="+", required=True, metavar="NAME=CKPT")
    p.add_argument("--prompts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score", type=float, help="override the CA conditioning score")
    p.add_argument("--max-new-tokens", type=int, default=24)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("judge-prompt", help="render the multi-assistant judging prompt")
    p.add_argument("--question", required=True)
    p.add_argument("--responses", required=True, help='JSONL of {"name": ..., "response": ...}')
    p.set_defaults(func=cmd_judge_prompt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, P.ConfigError, P.StageOrderError, P.DivergenceError, D.DataError, ValueError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
