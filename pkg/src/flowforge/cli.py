"""``flowforge`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error. All randomness comes from
``--seed``; when it is absent the FLOWFORGE_SEED environment variable is used,
then the config file's seed.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from .bucketing import BucketError, plan_batches
from .collation import CollationError, collate
from .config import ConfigError, RunConfig, load_config
from .manifest import ManifestError, load_glyph_records, load_manifest
from .rewards import (
    CandidateRewards,
    EnsembleConfig,
    NumericTokenLogits,
    ensemble_reward,
    layout_aware_ocr_reward,
    ocr_text_score,
    semi_hard_select,
)
from .timesteps import CurriculumSchedule, StratifiedConfig, draw_timestep, rank_generators, rotation_permutation
from .trainer import (
    METRIC_COLUMNS,
    DivergenceError,
    ParameterVector,
    euler_sample,
    load_checkpoint,
    nft_reward_fn,
    right_half_fraction,
    save_checkpoint,
    target_region,
    train_stage,
)

log = logging.getLogger("flowforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed(args, config: RunConfig | None = None) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("FLOWFORGE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"FLOWFORGE_SEED must be an integer, got {env!r}") from None
    return config.seed if config is not None else 0


def _open_out(path):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8", newline="")


def _fmt(x: float) -> str:
    return repr(float(x))


# --- subcommands -------------------------------------------------------------


def cmd_plan_batches(args) -> int:
    config = load_config(args.buckets)
    records = load_manifest(args.manifest)
    table = config.buckets.table(args.capacity)
    plan = plan_batches(records, table, args.batch_size, args.drop_last, _seed(args, config))
    with _open_out(args.out) as fh:
        fh.write(json.dumps(plan.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_collate(args) -> int:
    config = load_config(args.config)
    cc = config.collation.build(_seed(args, config), args.drop_prob, True if args.shuffle else None)
    records = load_manifest(args.manifest)
    with _open_out(args.out) as fh:
        for record in records:
            if record.task != "edit":
                row = {"id": record.id, "kept_refs": [], "instruction": record.instruction, "permutation": {}}
            else:
                row = collate(record, cc).to_dict()
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return EXIT_OK


def cmd_sample_timesteps(args) -> int:
    seed = _seed(args)
    strat = StratifiedConfig(args.world_size, args.period, seed)
    gens = rank_generators(seed, args.world_size)
    curriculum = CurriculumSchedule(args.steps, args.curriculum) if args.curriculum else None
    with _open_out(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(report_mod.TIMESTEP_HEADER)
        for step in range(args.steps):
            perm = rotation_permutation(strat, step)
            for rank in range(args.world_size):
                t = draw_timestep(strat, rank, step, gens[rank], curriculum=curriculum)
                writer.writerow([step, rank, perm[rank], _fmt(t)])
    return EXIT_OK


def cmd_score_ocr(args) -> int:
    config = load_config(args.config)
    rc = config.rewards.ocr(w_text=args.w_text, w_layout=args.w_layout,
                            gate_threshold=args.gate, distance_scale=args.distance_scale)
    preds = {r.id: r for r in load_glyph_records(args.pred)}
    with _open_out(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "text_score", "reward"])
        for tgt in load_glyph_records(args.target):
            pred = preds.get(tgt.id)
            text, glyphs = (pred.text, pred.glyphs) if pred else ("", [])
            reward = layout_aware_ocr_reward(text, glyphs, tgt.text, tgt.glyphs, rc)
            writer.writerow([tgt.id, _fmt(ocr_text_score(text, tgt.text)), _fmt(reward)])
    return EXIT_OK


def _load_json_records(path) -> list:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
        return data if isinstance(data, list) else [data]
    except json.JSONDecodeError:
        pass
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON: {exc.msg}", lineno) from None
    return out


def cmd_reward(args) -> int:
    config = load_config(args.config)
    passes = args.passes if args.passes is not None else config.rewards.ensemble_passes
    ens = EnsembleConfig(passes) if passes else None
    with _open_out(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "reward"])
        for i, item in enumerate(_load_json_records(args.input)):
            try:
                per_pass = [NumericTokenLogits.from_dict(p) for p in item["passes"]]
                rid = str(item.get("id", i))
            except (KeyError, TypeError) as exc:
                raise ManifestError(f"record {i}: expected {{id, passes: [{{values, logits}}]}} ({exc})") from None
            writer.writerow([rid, _fmt(ensemble_reward(per_pass, ens))])
    return EXIT_OK


def cmd_mine(args) -> int:
    config = load_config(args.config)
    mc = config.rewards.mining(mean_min=args.mean_min, quantile_max=args.quantile_max,
                               lower_quantile=args.lower_quantile)
    groups: dict[str, list[float]] = {}
    with open(args.rewards, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        key = "instruction_id" if "instruction_id" in fields else "id"
        if key not in fields or "reward" not in fields:
            raise ManifestError("rewards CSV needs columns instruction_id (or id) and reward")
        for lineno, row in enumerate(reader, start=2):
            try:
                groups.setdefault(row[key], []).append(float(row["reward"]))
            except ValueError:
                raise ManifestError(f"bad reward value {row['reward']!r}", lineno) from None
    candidates = [CandidateRewards(k, tuple(v)) for k, v in groups.items()]
    with _open_out(args.out) as fh:
        for rid in semi_hard_select(candidates, mc):
            fh.write(rid + "\n")
    return EXIT_OK


def _sample_stats(params, config: RunConfig, train_cfg, dataset, seed: int) -> dict:
    samples = euler_sample(params, config.sampling.n_samples, config.sampling.n_steps, seed)
    region = target_region(train_cfg, dataset)
    return {
        "right_fraction": right_half_fraction(samples),
        "reward": float(np.mean(nft_reward_fn(samples, region))),
    }, samples


def cmd_train(args) -> int:
    config = load_config(args.config)
    seed = _seed(args, config)
    tc = config.train_config(args.stage, seed)
    dataset = config.data.dataset()
    spec = config.model.spec()
    reference = None
    if args.init:
        params, _, meta = load_checkpoint(args.init)
        if params.spec != spec:
            raise ConfigError(f"checkpoint model {params.spec} does not match config {spec}")
        reference = params
    elif args.stage in ("dpo", "nft"):
        raise UsageError(f"stage {args.stage} needs --init <checkpoint dir> (the frozen reference)")
    else:
        params = ParameterVector.init(spec, seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    before, _ = _sample_stats(params, config, tc, dataset, seed)
    result = train_stage(tc, dataset, params, reference=reference)
    after, samples = _sample_stats(result.params, config, tc, dataset, seed)

    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in result.metrics:
            writer.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
    with open(out / "timesteps.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(report_mod.TIMESTEP_HEADER)
        for step, rank, interval, t in result.timesteps:
            writer.writerow([step, rank, interval, _fmt(t)])
    with open(out / "samples.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y"])
        for x, y in samples:
            writer.writerow([_fmt(x), _fmt(y)])
    chash = config.config_hash()
    save_checkpoint(out / "checkpoint", result.params, result.ema, chash)
    run = {
        "stage": args.stage,
        "seed": seed,
        "config_hash": chash,
        "config": config.to_dict(),
        "init": str(args.init) if args.init else None,
        "samples": {
            "right_fraction_before": before["right_fraction"],
            "right_fraction_after": after["right_fraction"],
            "sample_reward_before": before["reward"],
            "sample_reward_after": after["reward"],
        },
    }
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    log.info("%s: %d steps -> %s", args.stage, len(result.metrics), out)
    return EXIT_OK


def cmd_report(args) -> int:
    summary = report_mod.write_report(args.metrics, args.out, figures=not args.no_figures)
    log.info("report: %d runs -> %s", summary["n_runs"], args.out)
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("plan-batches", help="group a manifest into bucketed, token-budgeted batches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--buckets", help="config file whose 'buckets' section defines the table")
    p.add_argument("--batch-size", type=int, required=True)
    p.add_argument("--capacity", type=int, help="tokens per batch (overrides the config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--drop-last", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan_batches)

    p = sub.add_parser("collate", help="reference shuffle & drop with prompt re-indexing")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--drop-prob", type=float)
    p.add_argument("--shuffle", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_collate)

    p = sub.add_parser("sample-timesteps", help="per-rank stratified timestep draws as CSV")
    p.add_argument("--world-size", type=int, required=True)
    p.add_argument("--period", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--curriculum", type=float, help="initial high-noise bias exponent")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_timesteps)

    p = sub.add_parser("score-ocr", help="layout-aware OCR reward per sample")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--config")
    p.add_argument("--w-text", type=float)
    p.add_argument("--w-layout", type=float)
    p.add_argument("--gate", type=float)
    p.add_argument("--distance-scale", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score_ocr)

    p = sub.add_parser("reward", help="logit-weighted ensemble judge reward")
    p.add_argument("--input", required=True, help="JSON array or JSON Lines of {id, passes}")
    p.add_argument("--config")
    p.add_argument("--passes", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("mine", help="select semi-hard instructions from candidate rewards")
    p.add_argument("--rewards", required=True)
    p.add_argument("--config")
    p.add_argument("--mean-min", type=float)
    p.add_argument("--quantile-max", type=float)
    p.add_argument("--lower-quantile", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="run one toy training stage")
    p.add_argument("--stage", required=True, choices=["pretrain", "sft", "dpo", "nft"])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint dir to start from (frozen reference for dpo/nft)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="summarise metrics files (JSON + CSV + figures)")
    p.add_argument("metrics", nargs="*", help="metrics.csv files, run dirs or timestep CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


DATA_ERRORS = (ManifestError, BucketError, CollationError, ConfigError, DivergenceError,
               FileNotFoundError, IsADirectoryError, ValueError, KeyError)


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"flowforge: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
