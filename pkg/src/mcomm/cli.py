"""Command-line front end: ``mcomm {train,eval,analyze,plot,compare}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import experiment as xp
from . import persist

logger = logging.getLogger("mcomm")


def _threshold_for(trace: Path, explicit: float | None) -> float:
    if explicit is not None:
        return explicit
    snap = trace.parent / xp.CONFIG_FILE
    if snap.exists():
        with open(snap) as fh:
            raw = yaml.safe_load(fh) or {}
        return float((raw.get("training") or {}).get("threshold", 0.05))
    return 0.05


def _runs(paths, labels):
    if labels and len(labels) != len(paths):
        raise SystemExit(f"error: {len(labels)} labels given for {len(paths)} traces")
    runs = []
    for i, p in enumerate(paths):
        p = Path(p)
        label = labels[i] if labels else (p.parent.name or p.stem)
        runs.append((label, persist.read_trace(p)))
    return runs


def cmd_train(args) -> int:
    cfg = persist.load_config(args.config)
    cfg = xp.with_overrides(cfg, seed=args.seed, epochs=args.epochs, output_dir=args.output_dir, label=args.label)

    def progress(epoch, rec):
        if args.verbose and (epoch + 1) % args.log_every == 0:
            print(f"epoch {epoch + 1}: success={rec['success']:.3f} C={rec['C']} Lt={rec['Lt']}", file=sys.stderr)

    run_dir = xp.run_experiment(cfg, progress, args.output_dir)
    print(run_dir)
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    config = args.config or ckpt.parent / xp.CONFIG_FILE
    cfg = persist.load_config(config)
    if args.seed is not None:
        cfg = xp.with_overrides(cfg, seed=args.seed)
    stats = xp.evaluate_checkpoint(cfg, ckpt, args.episodes, args.rounds)
    print(json.dumps(stats.to_dict()))
    return 0


def cmd_analyze(args) -> int:
    trace = Path(args.trace)
    errors: list[str] = []
    records = persist.read_trace(trace, errors)
    threshold = _threshold_for(trace, args.threshold)
    rows, worst = xp.analyze_trace(records, threshold)
    for row in rows:
        print(json.dumps(row))
    for e in errors:
        print(e, file=sys.stderr)
    if args.csv:
        out, csv_errors = persist.export_csv(trace, args.csv)
        print(f"wrote {out}", file=sys.stderr)
    ok = worst <= args.tolerance
    print(f"{len(rows)} records, max deviation {worst:.3g} ({'ok' if ok else 'MISMATCH'})", file=sys.stderr)
    return 0 if ok else 1


def cmd_plot(args) -> int:
    from .charts import render_chart

    runs = _runs(args.traces, args.labels)
    out = render_chart(runs, args.metric, args.out)
    print(out)
    return 0


def cmd_compare(args) -> int:
    runs = _runs(args.traces, args.labels)
    print(xp.format_grid(xp.compare_rows(runs, args.window)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcomm", description="Multi-agent communication experiments.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a protocol and write trace + checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--label")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy decentralized execution from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to the config snapshot next to the checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--rounds", type=int, help="execution rounds (defaults to the configured value)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="recompute IEI/SEI/TEI from a trace")
    p.add_argument("trace")
    p.add_argument("--threshold", type=float)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--csv", help="also export the trace to this CSV path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", help="render a metric from one or more traces as SVG")
    p.add_argument("traces", nargs="+")
    p.add_argument("--metric", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="+")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="convergence epoch and final value of success and TEI")
    p.add_argument("traces", nargs="+")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--window", type=int, default=50)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except persist.ConfigErrors as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except persist.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
