"""Command-line harness: gen, train, eval, gradcheck, report.

Exit codes: 0 success, 2 validation/config error, 3 numeric failure.
Every command is deterministic given (config, seed).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, config_hash, load_config
from .gradcheck import run_gradcheck
from .oracle import CorruptionError
from .report import ReportError, write_report
from .runner import (DatasetError, NumericError, evaluate_checkpoint,
                     generate_dataset, load_dataset, train)
from .scenes import SceneGenerationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poidet",
        description="PoI-based multi-modal 3D detection on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config; omitted keys take defaults")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", type=Path, required=out_required,
                       help="output directory")

    p_gen = sub.add_parser("gen", help="generate a scene dataset + manifest")
    common(p_gen)
    p_gen.add_argument("--count", type=int, default=None,
                       help="number of scenes (default: config data.train_scenes)")

    p_train = sub.add_parser("train", help="train on a dataset directory")
    common(p_train)
    p_train.add_argument("--data", type=Path, required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--data", type=Path, required=True)
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--corruption", type=str, default=None,
                        help="e.g. calib_offset:max_offset=1.0 or "
                             "calib_offset:sweep=0+0.2+0.4")

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference check on the tiny config")
    common(p_grad, out_required=False)
    p_grad.add_argument("--corrupt-block", type=str, default=None,
                        help="negative control: corrupt one block's adjoint")

    p_report = sub.add_parser("report", help="emit SVG charts + summary JSON")
    p_report.add_argument("--run", type=Path, required=True,
                          help="directory holding train/eval outputs")
    p_report.add_argument("--out", type=Path, default=None)
    return parser


def resolve_config(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    count = args.count if args.count is not None else cfg["data"]["train_scenes"]
    if count < 0:
        raise ConfigError("--count must be >= 0")
    manifest = generate_dataset(cfg, args.out, count, cfg["seed"])
    print(f"wrote {count} scenes, manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    scenes = load_dataset(args.data)
    result = train(cfg, scenes, args.out, progress=lambda m: print(m, flush=True))
    print(f"trained {result.steps} steps, final loss {result.final_loss:.4f}, "
          f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    scenes = load_dataset(args.data)
    report = evaluate_checkpoint(cfg, args.checkpoint, scenes,
                                 corruption_spec=args.corruption)
    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / "eval_report.json"
    out_path.write_text(report.to_json(), encoding="utf-8")
    print(f"mAP {report.map:.4f} over {report.n_scenes} scenes "
          f"(config {report.config_hash}); report {out_path}")
    for entry in report.corruptions:
        print(f"  {entry['spec']}: mAP {entry['map']:.4f} "
              f"(delta {entry['delta']:+.4f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    result = run_gradcheck(seed=seed, corrupt_block=args.corrupt_block)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.json").write_text(
            json.dumps(result, sort_keys=True, indent=1), encoding="utf-8")
    print(f"worst block {result['worst_block']}: "
          f"rel err {result['worst_rel_err']:.3e} "
          f"(tolerance {result['tolerance']:g})")
    for block in result["blocks"][:5]:
        print(f"  {block['name']}: {block['rel_err']:.3e}")
    if not result["pass"]:
        print("gradcheck FAILED")
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def cmd_report(args) -> int:
    summary = write_report(args.run, args.out)
    target = args.out if args.out else args.run
    print(f"report written to {target} ({len(summary['charts'])} charts)")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
                "gradcheck": cmd_gradcheck, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except (ConfigError, DatasetError, SceneGenerationError, CorruptionError,
            ReportError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
