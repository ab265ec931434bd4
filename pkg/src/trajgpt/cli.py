"""Command-line surface wiring the pipeline stages into reproducible runs.

Every command resolves its settings as defaults < config file < flags, then
writes the effective configuration, the seed, a build id, and its logs into
the run directory, so a run can be reproduced bit-for-bit from what it left
behind. Config files are flat `key = value` text; `#` starts a comment line.
User errors exit with code 2 and a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datagen import (
    MazeSpec,
    collect_expert,
    collect_medium_replay,
    collect_random,
    load_trajectories,
    markov_diagnostic,
    maze_controller_env_and_collect,
    mean_return,
    pointmass_env,
    save_trajectories,
)
from .dt import DTTrainConfig, default_rtg_scale, sample_window, stack_windows, train_dt
from .lm import LMTrainConfig, load_vocab, save_vocab, train_lm
from .shuffle import MODES, ShuffleSpec, batch_augmenter, materialize_tokens
from .transfer import (
    FinetuneConfig,
    aggregate_report,
    extract_backbone,
    finetune,
    make_random_checkpoint,
)

RESULTS_HEADER = "model\ttask\tseed\taccuracy"


# ---------------------------------------------------------------------------
# Config plumbing


def _opt(parse):
    return lambda s: None if s.strip().lower() == "none" else parse(s)


def _seeds(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.split(","))
    except ValueError as exc:
        raise ValueError(f"expected comma-separated integers, got {s!r}") from exc


def _keys_from(instance, **extra):
    """Key table {name: (parser, default)} built off a dataclass instance so
    defaults can never drift from the dataclass."""
    table = {}
    for name, value in vars(instance).items():
        if isinstance(value, bool):  # guard: bools are ints to isinstance
            raise TypeError("bool config fields are not supported")
        if isinstance(value, tuple):
            table[name] = (_seeds, value)
        elif isinstance(value, int):
            table[name] = (int, value)
        elif isinstance(value, float):
            table[name] = (float, value)
        elif isinstance(value, str):
            table[name] = (str, value)
        elif value is None:
            table[name] = (None, None)  # parser filled in by caller override
        else:
            raise TypeError(f"no config parser for field {name}={value!r}")
    table.update(extra)
    return table

_BACKBONE_KEYS = _keys_from(BackboneConfig())
_DT_KEYS = _keys_from(
    DTTrainConfig(),
    rtg_scale=(_opt(float), None),
    max_steps=(_opt(int), None),
    stop_at_eval_frac=(_opt(float), None),
)
_LM_KEYS = _keys_from(LMTrainConfig())
_FT_KEYS = _keys_from(FinetuneConfig())


def parse_config_file(path) -> dict[str, str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ValueError(f"cannot read config file: {exc}") from exc
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def resolve_config(keys: dict, config_path, flag_overrides: dict) -> dict:
    """defaults < config file < flags; unknown or malformed keys are errors."""
    effective = {k: default for k, (_, default) in keys.items()}
    if config_path is not None:
        for key, text in parse_config_file(config_path).items():
            if key not in keys:
                raise ValueError(
                    f"unknown config key {key!r}; valid keys: {', '.join(sorted(keys))}"
                )
            parse = keys[key][0]
            try:
                effective[key] = parse(text)
            except ValueError as exc:
                raise ValueError(f"config key {key}: {exc}") from exc
    for key, value in flag_overrides.items():
        if value is not None:
            effective[key] = value
    return effective


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def build_id() -> str:
    here = Path(__file__).resolve().parent
    try:
        proc = subprocess.run(
            ["git", "-C", str(here), "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=10,
        )
        if proc.returncode == 0 and proc.stdout.strip():
            return proc.stdout.strip()
    except OSError:
        pass
    return "trajgpt-0.1.0"


def write_run_dir(out, command: str, effective: dict, logs: dict[str, str]) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config_lines = [f"# effective config for: trajgpt {command}"]
    config_lines += [f"{k} = {_fmt_value(v)}" for k, v in effective.items()]
    (out / "config.txt").write_text("\n".join(config_lines) + "\n", encoding="utf-8")
    (out / "build.txt").write_text(build_id() + "\n", encoding="utf-8")
    for name, content in logs.items():
        (out / name).write_text(content, encoding="utf-8")
    return out


def _tsv(header: str, rows) -> str:
    return "\n".join([header, *rows]) + "\n"


def _split_cfg(effective: dict, keys: dict) -> dict:
    return {k: effective[k] for k in keys if k in effective}


def _backbone_cfg(effective: dict) -> BackboneConfig:
    return BackboneConfig(**_split_cfg(effective, _BACKBONE_KEYS))


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    keys = {
        "env": (str, "pointmass"),
        "level": (str, "expert"),
        "episodes": (int, 500),
        "seed": (int, 0),
    }
    eff = resolve_config(
        keys, args.config,
        {"env": args.env, "level": args.level, "episodes": args.episodes, "seed": args.seed},
    )
    env, level = eff["env"], eff["level"]
    episodes, seed = eff["episodes"], eff["seed"]
    if env == "pointmass":
        collectors = {
            "expert": collect_expert,
            "medium-replay": collect_medium_replay,
            "random": collect_random,
        }
        if level not in collectors:
            raise ValueError(f"pointmass supports levels {sorted(collectors)}, got {level!r}")
        trajectories = collectors[level](pointmass_env(), episodes, seed)
    elif env == "maze":
        if level != "controller":
            raise ValueError(f"maze supports only level 'controller', got {level!r}")
        trajectories = maze_controller_env_and_collect(MazeSpec(), episodes, seed)
    else:
        raise ValueError(f"unknown env {env!r}; expected pointmass or maze")

    try:
        markov = markov_diagnostic(trajectories)
    except ValueError:
        markov = float("nan")  # too few transitions for the diagnostic
    stats = "\n".join(
        [
            f"episodes = {len(trajectories)}",
            f"mean_return = {format(mean_return(trajectories), '.17g')}",
            f"markov_score = {format(markov, '.17g')}",
        ]
    ) + "\n"
    out = write_run_dir(args.out, "gen-data", eff, {"stats.txt": stats})
    save_trajectories(trajectories, out / "trajectories.jsonl")
    print(f"wrote {out / 'trajectories.jsonl'} ({len(trajectories)} episodes)")
    print(stats, end="")
    return 0


def _loss_log(log) -> str:
    rows = (
        f"{s}\t{format(l, '.17g')}\t{format(r, '.17g')}"
        for s, l, r in zip(log.steps, log.losses, log.lrs)
    )
    return _tsv("step\tloss\tlr", rows)


def _eval_log(steps, values, column: str) -> str:
    rows = (f"{s}\t{format(v, '.17g')}" for s, v in zip(steps, values))
    return _tsv(f"step\t{column}", rows)


def cmd_pretrain_rl(args) -> int:
    keys = {**_DT_KEYS, **_BACKBONE_KEYS, "shuffle": (str, "none")}
    eff = resolve_config(keys, args.config, {"seed": args.seed, "shuffle": args.shuffle})
    if eff["shuffle"] not in MODES:
        raise ValueError(f"shuffle mode must be one of {MODES}, got {eff['shuffle']!r}")
    dataset = load_trajectories(args.data)
    cfg = DTTrainConfig(**_split_cfg(eff, _DT_KEYS))
    augment = batch_augmenter(ShuffleSpec(mode=eff["shuffle"], seed=cfg.seed))
    train_lines: list[str] = []
    ckpt, log = train_dt(
        dataset, cfg, backbone_cfg=_backbone_cfg(eff), augment=augment, log_fn=train_lines.append
    )
    ckpt = replace(ckpt, meta={**ckpt.meta, "shuffle": eff["shuffle"]})
    out = write_run_dir(
        args.out,
        "pretrain-rl",
        eff,
        {
            "loss.log": _loss_log(log),
            "eval.log": _eval_log(log.eval_steps, log.eval_mses, "heldout_mse"),
            "train.log": "\n".join(train_lines) + "\n",
        },
    )
    save_checkpoint(ckpt, out / "model.ckpt")
    print(f"wrote {out / 'model.ckpt'} after {len(log.steps)} steps; "
          f"final heldout_mse {format(log.eval_mses[-1], '.17g')}")
    return 0


def cmd_pretrain_lm(args) -> int:
    keys = {**_LM_KEYS, **_BACKBONE_KEYS}
    eff = resolve_config(keys, args.config, {"seed": args.seed})
    try:
        corpus = Path(args.corpus).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read corpus: {exc}") from exc
    cfg = LMTrainConfig(**_split_cfg(eff, _LM_KEYS))
    train_lines: list[str] = []
    ckpt, log, vocab = train_lm(
        corpus, cfg, backbone_cfg=_backbone_cfg(eff), log_fn=train_lines.append
    )
    out = write_run_dir(
        args.out,
        "pretrain-lm",
        eff,
        {
            "loss.log": _loss_log(log),
            "eval.log": _eval_log(log.eval_steps, log.eval_perplexities, "val_perplexity"),
            "train.log": "\n".join(train_lines) + "\n",
        },
    )
    save_checkpoint(ckpt, out / "model.ckpt")
    save_vocab(vocab, out / "vocab.txt")
    print(f"wrote {out / 'model.ckpt'} and vocab.txt; "
          f"final val_perplexity {format(log.eval_perplexities[-1], '.17g')}")
    return 0


def cmd_extract_backbone(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    extracted = extract_backbone(ckpt)
    dropped = sorted(set(ckpt.params) - set(extracted.params))
    eff = {"ckpt": args.ckpt, "seed": 0}
    log = "\n".join(
        [f"kept {len(extracted.params)} backbone tensors", *(f"dropped {n}" for n in dropped)]
    ) + "\n"
    out = write_run_dir(args.out, "extract-backbone", eff, {"extract.log": log})
    save_checkpoint(extracted, out / "backbone.ckpt")
    print(f"wrote {out / 'backbone.ckpt'} ({len(extracted.params)} tensors, {len(dropped)} dropped)")
    return 0


def cmd_finetune(args) -> int:
    keys = {**_FT_KEYS, **_BACKBONE_KEYS, "backbone_seed": (int, 0)}
    eff = resolve_config(keys, args.config, {"backbone_seed": args.seed})
    if args.ckpt == "random":
        ckpt = make_random_checkpoint(_backbone_cfg(eff), eff["backbone_seed"])
    else:
        ckpt = load_checkpoint(args.ckpt)
    vocab = None
    if args.vocab is not None:
        try:
            vocab = load_vocab(args.vocab)
        except OSError as exc:
            raise ValueError(f"cannot read vocab file: {exc}") from exc
    cfg = FinetuneConfig(**_split_cfg(eff, _FT_KEYS))
    model_name = args.model or ckpt.provenance
    task_name = args.task or Path(args.train).stem.removesuffix("_train")

    train_lines: list[str] = []
    accs = finetune(args.train, args.dev, ckpt, cfg, log_fn=train_lines.append, vocab=vocab)
    rows = [
        f"{model_name}\t{task_name}\t{seed}\t{format(100.0 * accs[seed], '.17g')}"
        for seed in cfg.seeds
    ]
    out = write_run_dir(
        args.out,
        "finetune",
        eff,
        {"results.tsv": _tsv(RESULTS_HEADER, rows), "train.log": "\n".join(train_lines) + "\n"},
    )
    print(f"wrote {out / 'results.tsv'}")
    for seed in cfg.seeds:
        print(f"{model_name} {task_name} seed {seed} dev_accuracy {format(accs[seed], '.17g')}")
    return 0


def cmd_shuffle_preview(args) -> int:
    keys = {
        "mode": (str, "inner-inter"),
        "seed": (int, 0),
        "context_length": (int, 4),
        "samples": (int, 1),
    }
    eff = resolve_config(
        keys, args.config,
        {"mode": args.mode, "seed": args.seed, "samples": args.samples},
    )
    if eff["mode"] not in MODES:
        raise ValueError(f"shuffle mode must be one of {MODES}, got {eff['mode']!r}")
    dataset = load_trajectories(args.data)
    K, B = eff["context_length"], eff["samples"]
    if B > len(dataset):
        raise ValueError(f"asked for {B} samples but the file has {len(dataset)} episodes")
    scale = default_rtg_scale(dataset)
    rows = [sample_window(dataset[b], 0, K, scale) for b in range(B)]
    batch = stack_windows(rows)
    shuffled = batch_augmenter(ShuffleSpec(mode=eff["mode"], seed=eff["seed"]))
    after = shuffled(batch, 0) if shuffled is not None else batch

    lines = [f"mode {eff['mode']}  seed {eff['seed']}  context_length {K}  samples {B}"]
    for b, (before_row, after_row) in enumerate(zip(materialize_tokens(batch), materialize_tokens(after))):
        lines.append(f"sample {b}:")
        for j, ((m0, v0), (m1, v1)) in enumerate(zip(before_row, after_row)):
            t, slot = divmod(j, 3)
            v0s = np.array2string(np.atleast_1d(v0), precision=4, separator=",")
            v1s = np.array2string(np.atleast_1d(v1), precision=4, separator=",")
            lines.append(f"  t={t} slot={slot}  {m0:<7} {v0s:<28} ->  {m1:<7} {v1s}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out is not None:
        write_run_dir(args.out, "shuffle-preview", eff, {"preview.txt": text})
    return 0


def cmd_markov_check(args) -> int:
    dataset = load_trajectories(args.data)
    score = markov_diagnostic(dataset)
    line = f"markov_score = {format(score, '.17g')}\n"
    print(line, end="")
    if args.out is not None:
        write_run_dir(args.out, "markov-check", {"data": args.data, "seed": 0}, {"result.txt": line})
    return 0


def _read_results_file(path) -> list[tuple[str, str, int, float]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ValueError(f"cannot read results file: {exc}") from exc
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError(f"{path}:1: expected header {RESULTS_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated columns")
        try:
            rows.append((cols[0], cols[1], int(cols[2]), float(cols[3])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise ValueError(f"{path}: no result rows")
    return rows


def cmd_report(args) -> int:
    if not args.results:
        raise ValueError("no result files given")
    rows: list[tuple[str, str, int, float]] = []
    for path in args.results:
        rows.extend(_read_results_file(path))
    report = aggregate_report(rows)
    text = report.render_text()
    print(text, end="")
    if args.out is not None:
        write_run_dir(
            args.out,
            "report",
            {"results": ",".join(str(p) for p in args.results), "seed": 0},
            {"report.txt": text, "report.tsv": report.render_tsv()},
        )
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajgpt",
        description="Desk-scale workbench: trajectory/language pre-training, "
        "backbone transfer, fine-tuning, and reporting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=out_required, help="run directory")

    p = sub.add_parser("gen-data", help="collect trajectories and a stats sidecar")
    p.add_argument("--env", choices=["pointmass", "maze"])
    p.add_argument("--level", help="expert | medium-replay | random | controller")
    p.add_argument("--episodes", type=int)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-rl", help="train the trajectory model on a dataset")
    p.add_argument("--data", required=True, help="trajectories.jsonl from gen-data")
    p.add_argument("--shuffle", choices=list(MODES), help="ablation: shuffle batches")
    common(p)
    p.set_defaults(func=cmd_pretrain_rl)

    p = sub.add_parser("pretrain-lm", help="train the language model on a text corpus")
    p.add_argument("--corpus", required=True, help="UTF-8 text, blank-line document breaks")
    common(p)
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("finetune", help="attach a classification head and fine-tune")
    p.add_argument("--train", required=True, help="task train split (TSV)")
    p.add_argument("--dev", required=True, help="task dev split (TSV)")
    p.add_argument("--ckpt", required=True, help="checkpoint path, or 'random' for a fresh backbone")
    p.add_argument("--model", help="model name for result rows (default: checkpoint provenance)")
    p.add_argument("--task", help="task name for result rows (default: from the train filename)")
    p.add_argument("--vocab", help="optional vocabulary file (default: built from the train split)")
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("extract-backbone", help="keep only the transformer blocks of a checkpoint")
    p.add_argument("--ckpt", required=True)
    common(p)
    p.set_defaults(func=cmd_extract_backbone)

    p = sub.add_parser("shuffle-preview", help="show a shuffle mode's effect on real windows")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=[m for m in MODES if m != "none"])
    p.add_argument("--samples", type=int)
    common(p, out_required=False)
    p.set_defaults(func=cmd_shuffle_preview)

    p = sub.add_parser("markov-check", help="print the history-dependence score of a dataset")
    p.add_argument("--data", required=True)
    common(p, out_required=False)
    p.set_defaults(func=cmd_markov_check)

    p = sub.add_parser("report", help="aggregate results.tsv files into the summary table")
    p.add_argument("results", nargs="*", help="results.tsv files from finetune runs")
    common(p, out_required=False)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
