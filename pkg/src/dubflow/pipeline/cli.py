"""Command line entry point.

Every verb reads a YAML config and operates on one run directory, so a full
experiment is a sequence of invocations sharing the same ``--out``:

    dubflow synth-data --config run.yaml --out runs/a
    dubflow train-sft  --config run.yaml --out runs/a
    dubflow train-mpo  --config run.yaml --out runs/a
    dubflow train-cfm  --config run.yaml --out runs/a
    dubflow train-tune --config run.yaml --out runs/a
    dubflow infer      --config run.yaml --out runs/a
    dubflow eval       --config run.yaml --out runs/a

Failures print a one-line JSON error record to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .inference import run_eval, run_infer
from .stages import run_stage_cfm, run_stage_mpo, run_stage_sft, run_stage_tune
from .synth import synth_dataset


def _cmd_synth(cfg, out):
    records = synth_dataset(cfg, out)
    return {"records": len(records)}


_COMMANDS = {
    "synth-data": _cmd_synth,
    "train-sft": run_stage_sft,
    "train-mpo": run_stage_mpo,
    "train-cfm": run_stage_cfm,
    "train-tune": run_stage_tune,
    "infer": run_infer,
    "eval": run_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dubflow",
        description="Two-stage dubbing pipeline: reasoning policy and flow generator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in _COMMANDS.items():
        p = sub.add_parser(name, help=func.__doc__.splitlines()[0] if func.__doc__ else None)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", required=True, help="run directory for artifacts")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = _COMMANDS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - boundary converts to an error record
        record = {
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
        }
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "result": result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
