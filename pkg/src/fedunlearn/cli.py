"""Command-line harness: run experiment matrices from a YAML config, resume
runs from checkpoints, and summarize output directories.

Exit codes: 0 success, 2 config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentCell, config_hash, expand_matrix, load_config, scenario_to_dict
from .metrics import stealth_overlap_fraction, write_rounds_csv, write_rounds_jsonl
from .scenario import (
    load_checkpoint,
    prepare,
    run_forked,
    save_checkpoint,
    simulate,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

OUTPUT_ROOT_ENV = "FEDUNLEARN_OUT"


def _output_root(cli_value: str | None) -> Path:
    if cli_value:
        return Path(cli_value)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "out"))


def _run_cell_seed(cell: ExperimentCell, seed: int, out_dir: Path) -> dict:
    config = cell.config
    seed_dir = out_dir / str(seed)
    seed_dir.mkdir(parents=True, exist_ok=True)
    try:
        data = prepare(config, seed)
        if config.adversary_enabled:
            forked = run_forked(config, seed, data)
            records = forked.records_unlearn
            normal = forked.records_normal
            for name, state in forked.removal.checkpoints.items():
                save_checkpoint(seed_dir / f"checkpoint_{name}.bin", state)
        else:
            result = simulate(config, seed, data)
            records = result.records
            normal = None
            for name, state in result.checkpoints.items():
                save_checkpoint(seed_dir / f"checkpoint_{name}.bin", state)
        write_rounds_csv(seed_dir / "rounds.csv", records, config.compromised_id, normal)
        write_rounds_jsonl(seed_dir / "rounds.jsonl", records)
        final = records[-1]
        summary = {
            "cell": cell.name,
            "seed": seed,
            "rounds": len(records),
            "final_acc_main": final.acc_main,
            "final_acc_backdoor": final.acc_backdoor,
            "stealth_overlap": stealth_overlap_fraction(records, config.compromised_id),
            "flags": sorted({rec.flag for rec in records if rec.flag}),
            "status": "ok",
        }
    except Exception as exc:  # noqa: BLE001 - keep partial artifacts, mark failure
        (seed_dir / "failed").write_text(f"{type(exc).__name__}: {exc}\n")
        summary = {"cell": cell.name, "seed": seed, "status": "failed", "error": str(exc)}
    (seed_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_run(args) -> int:
    try:
        doc = load_config(args.config)
        cells = expand_matrix(doc)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.dry_run:
        total = 0
        for cell in cells:
            seeds = [s + args.seed_offset for s in cell.config.seeds]
            total += len(seeds)
            print(f"{cell.name}: seeds={seeds} hash={config_hash(cell.config)}")
        print(f"{len(cells)} cells, {total} runs")
        return EXIT_OK

    root = _output_root(args.out)
    any_failed = False
    summaries = []
    for cell in cells:
        scenario_name = cell.config.name
        cell_dir = root / scenario_name / cell.name
        cell_dir.mkdir(parents=True, exist_ok=True)
        seeds = [s + args.seed_offset for s in cell.config.seeds]
        manifest = {
            "cell": cell.name,
            "config_hash": config_hash(cell.config),
            "code_version": __version__,
            "seeds": seeds,
            "config": scenario_to_dict(cell.config),
        }
        (cell_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(
                    pool.map(_run_cell_seed, [cell] * len(seeds), seeds, [cell_dir] * len(seeds))
                )
        else:
            results = [_run_cell_seed(cell, seed, cell_dir) for seed in seeds]
        summaries.extend(results)
        any_failed |= any(r["status"] != "ok" for r in results)

    (root / "summary.json").write_text(json.dumps(summaries, indent=2))
    return EXIT_RUNTIME if any_failed else EXIT_OK


def cmd_replay(args) -> int:
    try:
        doc = load_config(args.config)
        cells = expand_matrix(doc)
        cell = next((c for c in cells if c.name == args.cell), cells[0] if args.cell is None else None)
        if cell is None:
            print(f"config error: no cell named {args.cell!r}", file=sys.stderr)
            return EXIT_CONFIG
        state = load_checkpoint(args.checkpoint)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = simulate(
            cell.config,
            args.seed,
            state=state,
            removal_enabled=not args.disable_adversary,
            max_rounds=args.rounds,
        )
        out = Path(args.out) if args.out else Path("replay_rounds.csv")
        write_rounds_csv(out, result.records, cell.config.compromised_id)
        print(f"replayed {len(result.records)} rounds from round {state.round} -> {out}")
        return EXIT_OK
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_RUNTIME


def cmd_summarize(args) -> int:
    root = Path(args.out_dir)
    if not root.is_dir():
        print(f"config error: {root} is not a directory", file=sys.stderr)
        return EXIT_CONFIG
    rows = []
    for summary_path in sorted(root.glob("**/summary.json")):
        if summary_path.parent == root:
            continue
        rows.append(json.loads(summary_path.read_text()))
    ok = sum(1 for r in rows if r.get("status") == "ok")
    print(f"{len(rows)} runs, {ok} ok, {len(rows) - ok} failed")
    for r in rows:
        if r.get("status") == "ok":
            print(
                f"  {r['cell']}/seed{r['seed']}: rounds={r['rounds']} "
                f"acc_main={r['final_acc_main']:.3f} acc_backdoor={r['final_acc_backdoor']:.3f}"
            )
        else:
            print(f"  {r['cell']}/seed{r['seed']}: FAILED ({r.get('error', '?')})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedunlearn")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment matrix from a YAML config")
    p_run.add_argument("config")
    p_run.add_argument("--dry-run", action="store_true")
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--seed-offset", type=int, default=0)
    p_run.add_argument("--out", default=None, help="output root (default: $FEDUNLEARN_OUT or ./out)")
    p_run.set_defaults(func=cmd_run)

    p_replay = sub.add_parser("replay", help="resume a scenario from a checkpoint")
    p_replay.add_argument("checkpoint")
    p_replay.add_argument("--config", required=True)
    p_replay.add_argument("--cell", default=None)
    p_replay.add_argument("--seed", type=int, required=True)
    p_replay.add_argument("--rounds", type=int, required=True)
    p_replay.add_argument("--disable-adversary", action="store_true")
    p_replay.add_argument("--out", default=None)
    p_replay.set_defaults(func=cmd_replay)

    p_sum = sub.add_parser("summarize", help="summarize an output directory")
    p_sum.add_argument("out_dir")
    p_sum.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
