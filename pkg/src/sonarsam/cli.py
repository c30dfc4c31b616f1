"""Command-line entry point: ``sonarsam run|eval|synth|table|gradcheck``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .errors import ConfigurationError, IngestionError, UsageError, ValidationError

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_RUN = 5


def _cmd_run(args) -> int:
    from .experiment import parse_config, run_matrix

    matrix = parse_config(args.config)
    if args.output_dir:
        matrix = dataclasses.replace(matrix, output_dir=args.output_dir)
    result = run_matrix(matrix)
    print(f"trained {result.trained} run(s), skipped {result.skipped}; results in {result.output_dir}")
    print((result.output_dir / "table.md").read_text(), end="")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .checkpoint import model_from_checkpoint
    from .data import load_dataset, preprocess, read_class_names
    from .train import evaluate

    model = model_from_checkpoint(args.checkpoint)
    names = read_class_names(args.dataset)
    samples = [preprocess(s, model.preset.image_size) for s in load_dataset(args.dataset)]
    decoder = args.decoder or ("C" if model.head is not None and args.mode == "semantic" else None)
    report = evaluate(model, samples, args.mode, decoder, names)
    text = report.to_csv() if args.format == "csv" else report.to_markdown()
    print(text.rstrip("\n"))
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .data import SynthSpec, parse_synth_spec, synth_generate, write_dataset

    if args.spec == "default":
        spec = SynthSpec()
    else:
        path = Path(args.spec)
        if not path.is_file():
            raise ConfigurationError(f"spec file {path} not found")
        spec = parse_synth_spec(path.read_text(encoding="utf-8"))
    samples = synth_generate(spec, args.seed, args.n)
    root = write_dataset(samples, args.outdir, spec.class_names)
    print(f"wrote {len(samples)} samples to {root}")
    return EXIT_OK


def _cmd_table(args) -> int:
    from .experiment import collect_reports, emit_table, resolve_output_dir

    print(emit_table(collect_reports(resolve_output_dir(args.dir)), args.format).rstrip("\n"))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.error:.2e}  {r.seconds:6.2f}s  {r.name}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} within {TOLERANCE:g}")
    return EXIT_RUN if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sonarsam", description="Desk-scale SAM fine-tuning for sonar images.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute an experiment matrix config")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override the config's output_dir")
    r.set_defaults(fn=_cmd_run)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("mode", choices=["box_prompt", "semantic"])
    e.add_argument("--decoder", choices=["FF", "L", "C"], help="semantic decoding path")
    e.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("spec", help="synthetic spec file, or 'default'")
    s.add_argument("outdir")
    s.add_argument("n", type=int)
    s.add_argument("seed", type=int)
    s.set_defaults(fn=_cmd_synth)

    t = sub.add_parser("table", help="print the comparison table of a matrix output directory")
    t.add_argument("dir")
    t.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    t.set_defaults(fn=_cmd_table)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, RuntimeError) as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
