"""Command-line entry point: ``kgenrich <command> --config exp.json``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .kg import graph_stats, load_dataset
from .pipeline import STAGES, ConfigError, StageError, compare, load_config, run, run_stage


def _add_config(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--config", required=required, help="experiment config (JSON)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. train.epochs=10 (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgenrich", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-split triple/entity/relation counts")
    _add_config(p, required=False)
    p.add_argument("--train", help="train triples (instead of --config)")
    p.add_argument("--val")
    p.add_argument("--test")
    p.add_argument("--column-order", default="hrt")

    for stage in STAGES:
        _add_config(sub.add_parser(stage, help=f"run only the {stage} stage"))
    _add_config(sub.add_parser("run", help="run every stage of the scenario"))

    p = sub.add_parser("compare", help="relative boost of a linked report over a single one")
    _add_config(p, required=False)
    p.add_argument("single", help="report.json of the single-graph run")
    p.add_argument("linked", help="report.json of the linked run")
    p.add_argument("--out", help="also write the boost record here")
    return parser


def _stats(args) -> str:
    if args.train:
        ds = load_dataset(args.train, args.val, args.test, args.column_order)
        return graph_stats(ds).to_text()
    if not args.config:
        raise ConfigError("stats needs --config or --train")
    cfg = load_config(args.config, args.overrides)
    d = cfg.data
    text = graph_stats(load_dataset(d.dkg_train, d.dkg_val, d.dkg_test, d.column_order)).to_text()
    sampled = Path(cfg.output_dir) / "dkg"
    if (sampled / "train.txt").exists():
        ds = load_dataset(sampled / "train.txt", sampled / "valid.txt", sampled / "test.txt")
        text += "# sampled\n" + graph_stats(ds).to_text()
    return text


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "stats":
            sys.stdout.write(_stats(args))
        elif args.command == "compare":
            single = json.loads(Path(args.single).read_text())
            linked = json.loads(Path(args.linked).read_text())
            text = json.dumps(compare(single, linked), indent=2, sort_keys=True) + "\n"
            if args.out:
                Path(args.out).write_text(text)
            sys.stdout.write(text)
        else:
            cfg = load_config(args.config, args.overrides)
            if args.command == "run":
                out = run(cfg)
                sys.stdout.write(f"{out}\n")
            else:
                counts = run_stage(cfg, args.command)
                sys.stdout.write(json.dumps(counts, sort_keys=True) + "\n")
    except (ConfigError, StageError, OSError, ValueError) as err:
        record = {
            "command": args.command,
            "stage": getattr(err, "stage", None),
            "error": type(getattr(err, "error", err)).__name__,
            "message": str(err),
        }
        sys.stderr.write(json.dumps(record) + "\n")
        return 2 if isinstance(err, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
