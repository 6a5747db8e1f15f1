"""Command-line front end for the control pipeline.

Every subcommand loads a config (JSON file plus ``--set key=value``
overrides), runs one stage against the output directory, and prints a
single ``key=value`` summary line.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.

Examples::

    eqfree pipeline --config default.cfg
    eqfree steady-state --plant fd
    eqfree design --plant fd --method pp --poles 0.30,0.425,0.55,0.675,0.80
    eqfree simulate --plant fd --method dlqr --design-plant surrogate --allow-mismatch
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import pipeline as pp
from .textio import ArtifactFormatError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route it to our code 1 instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _parse_poles(text: str) -> list[complex | float]:
    poles = []
    for tok in text.split(","):
        tok = tok.strip().replace(" ", "")
        if not tok:
            continue
        try:
            p = complex(tok.replace("i", "j"))
        except ValueError as exc:
            raise UsageError(f"cannot parse pole {tok!r}") from exc
        poles.append(p.real if p.imag == 0 else p)
    if not poles:
        raise UsageError("--poles is empty")
    return poles


def _format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v).replace(" ", "_")


def summary_line(result: dict) -> str:
    return " ".join(f"{k}={_format_value(v)}" for k, v in result.items())


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; missing keys take their defaults")
    common.add_argument("--output-dir", help="artifact directory (overrides output_dir)")
    common.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="dotted-key override, e.g. --set model.M_br=2000 (repeatable; values parsed as JSON)",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="log stage details to stderr")

    parser = _Parser(prog="eqfree", description="Equation-free stabilization of the Bratu PDE.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen-data", parents=[common], help="generate FD snapshot pairs")
    sub.add_parser("train", parents=[common], help="fit the surrogate operator")
    for name, text in (
        ("steady-state", "Newton-Krylov fixed point"),
        ("spectrum", "Arnoldi Ritz values at the fixed point"),
        ("reduce", "slow basis and reduced model F, D"),
    ):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--plant", choices=pp.PLANTS, required=True)

    sp = sub.add_parser("design", parents=[common], help="feedback gain on a reduced model")
    sp.add_argument("--plant", choices=pp.PLANTS, required=True)
    sp.add_argument("--method", choices=pp.METHODS, required=True)
    sp.add_argument("--poles", type=_parse_poles, help="comma-separated targets for --method pp")

    sp = sub.add_parser("simulate", parents=[common], help="closed (or open) loop from the configured IC")
    sp.add_argument("--plant", choices=pp.PLANTS, required=True)
    sp.add_argument("--method", choices=pp.METHODS + ("open",), required=True)
    sp.add_argument("--design-plant", choices=pp.PLANTS, help="plant the gain was designed on (default: --plant)")
    sp.add_argument("--allow-mismatch", action="store_true", help="permit a gain from the other plant")
    sp.add_argument("--steps", type=int, help="override sim.steps")

    sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    sub.add_parser("report", parents=[common], help="summary table from existing artifacts")
    return parser


def _dispatch(args, cfg: pp.PipelineConfig) -> dict:
    cmd = args.command
    if cmd == "gen-data":
        return pp.run_stage(cmd, pp.stage_gen_data, cfg)
    if cmd == "train":
        return pp.run_stage(cmd, pp.stage_train, cfg)
    if cmd == "steady-state":
        return pp.run_stage(cmd, pp.stage_steady_state, cfg, args.plant)
    if cmd == "spectrum":
        return pp.run_stage(cmd, pp.stage_spectrum, cfg, args.plant)
    if cmd == "reduce":
        return pp.run_stage(cmd, pp.stage_reduce, cfg, args.plant)
    if cmd == "design":
        if args.poles is not None and args.method != "pp":
            raise UsageError("--poles only applies to --method pp")
        return pp.run_stage(cmd, pp.stage_design, cfg, args.plant, args.method, poles=args.poles)
    if cmd == "simulate":
        if args.design_plant and args.design_plant != args.plant and not args.allow_mismatch:
            raise UsageError("a gain from another plant needs --allow-mismatch")
        return pp.run_stage(
            cmd, pp.stage_simulate, cfg, args.plant, args.method,
            allow_mismatch=args.allow_mismatch, design_plant=args.design_plant,
        )
    if cmd == "report":
        return pp.run_stage(cmd, pp.stage_report, cfg)
    if cmd == "pipeline":
        results = pp.run_pipeline(cfg)
        out = {"stage": "pipeline", "stages": len(results), "output_dir": cfg.output_dir}
        for r in results:
            if r["stage"] == "simulate":
                out[f"final_{r['plant']}_{r['method']}"] = r["final_l2_error"]
        return out
    raise UsageError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = _parse_overrides(args.set)
        if args.output_dir:
            overrides["output_dir"] = args.output_dir
        if getattr(args, "steps", None) is not None:
            overrides["sim.steps"] = args.steps
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = pp.load_config(args.config, overrides)
    except (OSError, ArtifactFormatError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command != "pipeline":
            pp.save_resolved_config(cfg, pp.ensure_output_dir(cfg))
        result = _dispatch(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pp.StageError as exc:
        print(f"stage={exc.stage} status=failed message={str(exc)!r}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ArtifactFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(summary_line(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
