"""Command-line entry point: ``run``, ``sweep`` and ``summarize``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import harness


def _parse_seeds(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(x) for x in text.split(",")]


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = cfg.with_overrides(out=args.out)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    res = harness.run(cfg)
    print(json.dumps({"out": str(cfg.out_dir()), "K": cfg["K"], "final_regret": res.regret,
                      "wall_clock_seconds": round(res.wall_clock, 3)}))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    root = cfg.out_dir()
    for seed in args.seeds:
        sub = cfg.with_overrides(seed=seed, out=str(root / f"seed_{seed}"))
        # the output override applies to the sweep root only
        res = harness.run(sub, write=False)
        harness.write_outputs(res, root / f"seed_{seed}")
        print(json.dumps({"seed": seed, "final_regret": res.regret}))
    return 0


def cmd_summarize(args) -> int:
    root = Path(args.inp)
    dirs = sorted(p.parent for p in root.rglob("results.csv"))
    if not dirs:
        raise FileNotFoundError(f"no results.csv under {root}")
    rows = harness.summarize([harness.read_results(d) for d in dirs])
    text = harness.summary_csv(rows)
    (root / "summary.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oope", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="run one experiment per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=_parse_seeds, required=True, help="a..b (inclusive) or a,b,c")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("summarize", help="aggregate run directories")
    p.add_argument("--in", dest="inp", required=True)
    p.set_defaults(func=cmd_summarize)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # machine-readable report, nonzero exit
        report = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if args.verbose:
            report["traceback"] = traceback.format_exc()
        print(json.dumps(report), file=sys.stderr)
        return 2 if isinstance(exc, (harness.ConfigError, FileNotFoundError)) else 1


if __name__ == "__main__":
    sys.exit(main())
