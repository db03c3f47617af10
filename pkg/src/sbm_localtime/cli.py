"""Command line entry point: run, report and validate-config."""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import (ConfigError, ExperimentConfig, StageError, find_manifests, report_csv,
                          run)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sbm-localtime",
                                 description="Experiments on boundary local time of the zero set.")
    sub = ap.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="execute one experiment config")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override the config's output directory")
    rep = sub.add_parser("report", help="merge run manifests into one CSV table")
    rep.add_argument("paths", nargs="+", help="manifest files or directories to search")
    rep.add_argument("-o", "--output", help="write the CSV here instead of stdout")
    v = sub.add_parser("validate-config", help="check a config without running it")
    v.add_argument("config")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "validate-config":
            cfg = ExperimentConfig.load(args.config)
            print(json.dumps(cfg.to_dict(), indent=1))
            return EXIT_OK
        if args.verb == "run":
            cfg = ExperimentConfig.load(args.config)
            if args.output_dir:
                cfg.output_dir = args.output_dir
            man = run(cfg)
            print(json.dumps({"manifest": man.output_path, "summary": man.summary}, indent=1))
            return EXIT_OK
        manifests = find_manifests(args.paths)
        if not manifests:
            print("no manifests found", file=sys.stderr)
            return EXIT_CONFIG
        text = report_csv(manifests)
        if args.output:
            from .experiments import atomic_write
            atomic_write(args.output, text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ValueError as exc:  # report schema mismatch
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
