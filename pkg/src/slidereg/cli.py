"""Command-line interface: register, evaluate, synth.

Exit codes: 0 success, 1 usage error, 2 IO error, 3 pipeline error (the
failing stage is named on standard error).
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import SlideRegError, StageError
from .pipeline import PipelineConfig, cmd_evaluate, cmd_register, cmd_synth

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_PIPELINE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slidereg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="register one fixed/moving pair")
    reg.add_argument("--fixed", required=True, help="fixed image (PNG/PGM/PPM)")
    reg.add_argument("--moving", required=True, help="moving image (PNG/PGM/PPM)")
    reg.add_argument("--config", help="pipeline config JSON (defaults if omitted)")
    reg.add_argument("--out", required=True, help="output directory for artifacts")

    ev = sub.add_parser("evaluate", help="register a cohort and report the landmark metric")
    ev.add_argument("--manifest", required=True, help="cohort manifest JSON")
    ev.add_argument("--out", required=True, help="path for the cohort metric JSON")
    ev.add_argument("--workers", type=int, default=1, help="parallel pair registrations")

    sy = sub.add_parser("synth", help="generate a synthetic pair with ground truth")
    sy.add_argument("--spec", required=True, help="generator spec JSON")
    sy.add_argument("--out", required=True, help="output directory")
    return parser


def _load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        return PipelineConfig.from_json_file(path)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"slidereg: bad config {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "register":
            cfg = _load_config(args.config)
            report = cmd_register(args.fixed, args.moving, cfg, args.out)
            est = report.rigid
            print(
                f"rigid: rotated_180={est['rotated_180']} dx={est['dx']} dy={est['dy']} "
                f"score={est['score']:.4f}"
            )
            print(f"deform: final_mse={report.deform_summary['final_mse']:.6g}")
            print(f"report: {report.outputs['report']}")
        elif args.command == "evaluate":
            if args.workers < 1:
                print("slidereg: --workers must be >= 1", file=sys.stderr)
                return EXIT_USAGE
            cohort = cmd_evaluate(args.manifest, args.out, args.workers)
            print(f"median_p90_um: {cohort.median_p90_um:.4f} over {len(cohort.per_image)} pairs")
        elif args.command == "synth":
            manifest = cmd_synth(args.spec, args.out)
            for name, path in manifest["files"].items():
                print(f"{name}: {path}")
    except StageError as exc:
        print(f"slidereg: {exc}", file=sys.stderr)
        if isinstance(exc.cause, OSError):
            return EXIT_IO
        return EXIT_PIPELINE
    except json.JSONDecodeError as exc:
        print(f"slidereg: malformed JSON input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SlideRegError as exc:
        print(f"slidereg: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except OSError as exc:
        print(f"slidereg: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
