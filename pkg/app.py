"""Command-line entry point: gen-data, train, plan, bench and sweep.

    python app.py gen-data --seed 7
    python app.py train --level low
    python app.py train --level high
    python app.py bench --band hard --out-dir results
"""

import argparse
import logging
import sys

from commands import bench, gen_data, plan, sweep, train
from utils.config import BAND_NAMES, load_config, load_environment
from utils.errors import HwmError

logger = logging.getLogger(__name__)

COMMANDS = {
    "gen-data": gen_data.run,
    "train": train.run,
    "plan": plan.run,
    "bench": bench.run,
    "sweep": sweep.run,
}


def build_parser():
    """Subcommands share --config, --seed, --workers and --log-level"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="JSON run config (defaults to the built-in tables)")
    common.add_argument("--seed", type=int, help="Root seed, overrides the config")
    common.add_argument("--workers", type=int, help="Worker processes; 1 runs inline and is bitwise reproducible")
    common.add_argument("--log-level", type=str, default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(description="Hierarchical planning with latent world models on a point maze")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Generate layouts and offline datasets")
    p.add_argument("--out", type=str, help="Output directory (default: $HWM_DATA_DIR or data)")

    p = sub.add_parser("train", parents=[common], help="Train the low- or high-level world model")
    p.add_argument("--data", type=str, help="Training dataset (default: data/train.hwmd)")
    p.add_argument("--level", choices=["low", "high"], required=True)
    p.add_argument("--out", type=str, help="Checkpoint directory (default: models)")

    p = sub.add_parser("plan", parents=[common], help="Print one plan as JSON")
    p.add_argument("--models", type=str, help="Checkpoint directory (default: models)")
    p.add_argument("--layout", type=str, required=True, help="Layout text file")
    p.add_argument("--start", type=str, required=True, help="Start cell as ix,iy")
    p.add_argument("--goal", type=str, required=True, help="Goal cell as ix,iy")
    p.add_argument("--mode", choices=["flat", "hier"], default="hier")
    p.add_argument("--band", choices=list(BAND_NAMES), default="medium", help="Band whose planner config is used")

    p = sub.add_parser("bench", parents=[common], help="Closed-loop benchmark over task bands")
    p.add_argument("--models", type=str, help="Checkpoint directory (default: models)")
    p.add_argument("--data", type=str, help="Held-out dataset (default: data/heldout.hwmd)")
    p.add_argument("--band", choices=list(BAND_NAMES) + ["all"], default="all")
    p.add_argument("--out-dir", type=str, help="Results directory (default: $HWM_OUT_DIR or results)")
    p.add_argument("--skip-sweep", action="store_true", help="Skip the per-band compute sweep")
    p.add_argument("--latent-dims", action="store_true", help="Also retrain and evaluate per latent action size")

    p = sub.add_parser("sweep", parents=[common], help="Success rate vs planning time over a config grid")
    p.add_argument("--grid-file", type=str, help="JSON sweep grid (default: bench.default_sweep)")
    p.add_argument("--models", type=str, help="Checkpoint directory (default: models)")
    p.add_argument("--data", type=str, help="Held-out dataset (default: data/heldout.hwmd)")
    p.add_argument("--band", choices=list(BAND_NAMES), default="medium")
    p.add_argument("--out-dir", type=str, help="Results directory (default: $HWM_OUT_DIR or results)")
    return parser


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or exc.__class__.__name__


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    load_environment()
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        return COMMANDS[args.command](args, config)
    except HwmError as exc:
        print(f"error: {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("unhandled error", exc_info=True)
        print(f"error: internal: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
