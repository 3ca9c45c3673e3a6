"""``mqmk`` command line: pretrain, run, ablate, cost, report, init-config.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..binio import FormatError
from .config import DEFAULT_CONFIG, ConfigError, load_config
from .runner import ABLATION_AXES, cmd_ablate, cmd_cost, cmd_pretrain, cmd_report, cmd_run, dumps

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a seed list: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mqmk", description="Prompt-based continual learning experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    # -v is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.add_argument("-c", "--config", required=True, type=Path, help="experiment config (INI)")
        return sp

    with_config("pretrain", "train the backbone on the pretext set and write the checkpoint")
    run = with_config("run", "continual run for every seed; writes summaries and CSVs")
    run.add_argument("--seeds", type=_seeds, help="override the [run] seeds")
    run.add_argument("--out", type=Path, help="override the [run] output_dir")
    run.add_argument("-j", "--jobs", type=int, default=1, help="parallel worker processes")
    ab = with_config("ablate", "sweep one axis; writes a mean/std table")
    ab.add_argument("--axis", required=True, choices=ABLATION_AXES)
    ab.add_argument("--values", nargs="*", help="axis values (defaults depend on the axis)")
    ab.add_argument("--seeds", type=_seeds)
    ab.add_argument("--out", type=Path)
    ab.add_argument("-j", "--jobs", type=int, default=1)
    with_config("cost", "parameter counts and pass-count model vs instrumented counters")
    rep = sub.add_parser("report", help="re-render CSV/JSON from a run directory", parents=[common])
    rep.add_argument("run_dir", type=Path)
    init = sub.add_parser("init-config", help="print the default config", parents=[common])
    init.add_argument("-o", "--output", type=Path)
    return p


def _apply_overrides(cfg, args):
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=args.seeds)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _print_cost(report: dict):
    for name, c in report["parameter_counts"].items():
        print(f"[{name}] D={c['embed_dim']} M={c['num_tasks']} classes={c['total_classes']}")
        for kind in ("SK", "MK"):
            k = c[kind]
            print(f"  {kind}: prompts {k['prompt_params']}  keys {k['key_params']}  "
                  f"head {k['classifier_params']}  total {k['total']}")
        print(f"  MK - SK key params: {c['MK_minus_SK_keys']}")
    header = ("paradigm", "train fwd/bwd model", "measured", "infer fwd model", "measured",
              "ratio vs SQSK", f"ratio at M={report['parameter_counts']['reference']['num_tasks']}", "ok")
    rows = [(r["paradigm"],
             f"{r['model_training_forwards']}/{r['model_training_backwards']}",
             f"{r['measured_training_forwards_per_batch']:g}/{r['measured_training_backwards_per_batch']:g}",
             str(r["model_inference_forwards"]), f"{r['measured_inference_forwards_per_sample']:g}",
             f"{r['model_inference_ratio_vs_sqsk']:g}", f"{r['reference_inference_ratio_vs_sqsk']:g}",
             "yes" if r["consistent"] else "NO") for r in report["passes"]]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    for row in [header, *rows]:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "init-config":
            if args.output:
                args.output.write_text(DEFAULT_CONFIG)
            else:
                sys.stdout.write(DEFAULT_CONFIG)
            return EXIT_OK
        if args.command == "report":
            sys.stdout.write(dumps(cmd_report(args.run_dir)))
            return EXIT_OK
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "pretrain":
            info = cmd_pretrain(cfg)
            print(f"pretext accuracy {info['pretext_accuracy']:.4f}; checkpoint {info['checkpoint']}")
        elif args.command == "run":
            sys.stdout.write(dumps(cmd_run(cfg, workers=args.jobs)))
        elif args.command == "ablate":
            rows = cmd_ablate(cfg, args.axis, args.values, workers=args.jobs)
            for r in rows:
                print(f"{r['axis']}={r['value']}: A_T {r['A_T_mean']:.4f}±{r['A_T_std']:.4f}  "
                      f"F_T {r['F_T_mean']:.4f}±{r['F_T_std']:.4f}  "
                      f"match {r['matching_rate_mean']:.4f}±{r['matching_rate_std']:.4f}")
        elif args.command == "cost":
            report = cmd_cost(cfg)
            _print_cost(report)
            if not all(r["consistent"] for r in report["passes"]):
                print("error: instrumented pass counts disagree with the cost model", file=sys.stderr)
                return EXIT_FAILURE
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, never traces
        logging.getLogger(__name__).debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
