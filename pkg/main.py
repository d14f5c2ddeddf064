"""
Euler ResNet Lab — experiment runner
====================================
Run:  python main.py <euler|train|gridsearch|noise-sweep|diagnose> [--config FILE]
                     [--out DIR] [--seed N] [--h H] [--depth D] [--verbose]

Exit codes: 0 success (diverged training runs included), 2 usage or config
error, 3 a bound check or other internal invariant failed, 1 anything else.
"""
import argparse
import logging
import os
import sys

from pydantic import ValidationError

# ── Ensure project root is on path ────────────────────────────
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import RUNS_DIR, THREADS_ENV  # noqa: E402
from errors import ConfigError, InvariantViolation  # noqa: E402
from expconfig import KINDS, ExperimentConfig, load_config, serialize_config, with_overrides  # noqa: E402

log = logging.getLogger("main")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_INVARIANT = 3


def setup_logging(verbose=False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
        force=True,
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Euler-viewed residual networks: Euler demos, training, sweeps and bound diagnostics.",
        epilog=f"{THREADS_ENV} caps the number of parallel sweep workers (default 1).",
    )
    parser.add_argument("kind", choices=KINDS, help="experiment to run")
    parser.add_argument("--config", help="experiment config file (INI sections)")
    parser.add_argument("--out", help=f"output directory (default {RUNS_DIR} or the config's out_dir)")
    parser.add_argument("--seed", type=int, help="override every seed and pin the sweep to it")
    parser.add_argument("--h", type=float, help="override the step factor and pin the sweep to it")
    parser.add_argument("--depth", type=int, help="override the depth and pin the sweep to it")
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective config and exit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def resolve_config(args):
    """Config file (or defaults) with the command-line overrides applied."""
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig(kind=args.kind)
    cfg = with_overrides(cfg, kind=args.kind, out_dir=args.out, seed=args.seed,
                         h=args.h, depth=args.depth)
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    setup_logging(args.verbose)

    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(serialize_config(cfg))
            return EXIT_OK

        print("\n" + "=" * 50)
        print(f"🧪  EULER RESNET LAB — {cfg.kind}")
        print(f"    D={cfg.network.depth}  h={cfg.network.h}  width={cfg.network.width}  "
              f"bn={'on' if cfg.network.use_bn else 'off'}")
        print("=" * 50)

        from experiments import run_experiment
        run_dir = run_experiment(cfg)
    except (ConfigError, ValidationError) as e:
        log.error(f"Configuration error: {e}")
        print(f"\n❌ {e}")
        return EXIT_USAGE
    except InvariantViolation as e:
        log.error(f"Invariant violated: {e}")
        print(f"\n❌ {e}")
        return EXIT_INVARIANT
    except Exception as e:
        log.error(f"Experiment crashed: {e}", exc_info=True)
        return EXIT_ERROR

    print(f"\n✅ Results written to {run_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
