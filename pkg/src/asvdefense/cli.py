"""Command line: ``asvdefense [--config PATH] [--seed N] [--out DIR] <command>``.

Exit status is 0 on success, 1 when the input is invalid (bad config, missing
or mismatched artifacts, malformed files) and 2 on any other failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from . import config as config_mod
from . import harness
from .formats import FormatError

EXIT_OK, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage mistakes are validation errors: exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", metavar="PATH", default=dflt(None), help="experiment config file")
    parser.add_argument("--seed", type=int, metavar="N", default=dflt(None), help="master seed (overrides config)")
    parser.add_argument("--out", metavar="DIR", default=dflt("runs/default"), help="artifact directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=dflt(False))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asvdefense", description=__doc__.split("\n\n")[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)  # flags are also accepted after the command
    sub.add_parser("gen-data", parents=[common], help="generate corpus and trial list")
    sub.add_parser("train", parents=[common], help="train the ASV net and both purifiers")
    a = sub.add_parser("attack", parents=[common], help="craft adversarial test utterances")
    a.add_argument("--threat", choices=harness.THREATS, required=True)
    e = sub.add_parser("evaluate", parents=[common], help="score an experiment and write its report")
    e.add_argument("--experiment", choices=harness.EXPERIMENTS, required=True)
    sub.add_parser("selfcheck", parents=[common], help="gradient, metric and filter checks")
    return p


def load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def run(args) -> int:
    if args.command == "selfcheck":
        t0 = time.perf_counter()
        checks = harness.cmd_selfcheck()
        for c in checks:
            print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.detail}")
        failed = [c.name for c in checks if not c.ok]
        print(f"{len(checks) - len(failed)}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s")
        return EXIT_INTERNAL if failed else EXIT_OK
    cfg = load_config(args)
    if args.command == "gen-data":
        data = harness.cmd_gen_data(cfg, args.out)
        print(f"{len(data.train)} train / {len(data.eval)} eval utterances, {len(data.trials)} trials -> {args.out}")
    elif args.command == "train":
        s = harness.cmd_train(cfg, args.out)
        print(f"asv loss {s.asv_losses[0]:.4f} -> {s.asv_losses[-1]:.4f}")
        for i, (a, b) in enumerate(zip(s.recon_init_l1, s.recon_l1)):
            print(f"recon{i} held-out L1 {a:.4f} -> {b:.4f}")
    elif args.command == "attack":
        adv = harness.cmd_attack(cfg, args.out, args.threat)
        print(f"{len(adv)} adversarial test utterances ({args.threat}) -> {harness.Layout(args.out).adv(args.threat)}")
    elif args.command == "evaluate":
        rep = harness.cmd_evaluate(cfg, args.out, args.experiment)
        sys.stdout.write(rep.to_csv())
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (harness.HarnessError, config_mod.ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        logging.getLogger(__name__).debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
