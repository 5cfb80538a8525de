"""Command line for the adaptation pipeline: prepare-data, train-bme, adapt,
ablate, evaluate. Config comes from a JSON file with flag overrides; errors
exit nonzero with a machine-readable JSON payload on stderr."""

import argparse
import json
import sys

from .bme import BMEConfig
from .pipeline import (
    PipelineConfig,
    cmd_ablate,
    cmd_adapt,
    cmd_evaluate,
    cmd_prepare_data,
    cmd_train_bme,
)


def _config_from_args(args):
    overrides = {}
    for key in ("videos_dir", "output_dir", "deblur_checkpoint", "bme_checkpoint",
                "seed", "r", "patch", "stride", "epochs", "patch_mode",
                "condition_mode", "tau"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.config:
        return PipelineConfig.from_json(args.config, overrides)
    return PipelineConfig(**overrides)


def _add_common(p):
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--videos-dir", dest="videos_dir")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--seed", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deblur-adapt",
        description="Test-time domain adaptation for video deblurring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build the magnitude training corpus")
    _add_common(p)

    p = sub.add_parser("train-bme", help="train the blur magnitude estimator")
    p.add_argument("--data", required=True, help="corpus from prepare-data")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", help="pipeline config JSON (unused fields ignored)")
    p.add_argument("--toy", action="store_true", help="shrink the model and schedule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=None)

    for name in ("adapt", "evaluate"):
        p = sub.add_parser(name)
        _add_common(p)
        p.add_argument("--deblur-checkpoint", dest="deblur_checkpoint")
        p.add_argument("--bme-checkpoint", dest="bme_checkpoint")
        p.add_argument("--r", type=float)
        p.add_argument("--patch", type=int)
        p.add_argument("--stride", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--patch-mode", dest="patch_mode",
                       choices=("rsdm", "random"))
        p.add_argument("--condition-mode", dest="condition_mode",
                       choices=("dbcgm", "flow", "random"))
        p.add_argument("--tau", type=float)

    p = sub.add_parser("ablate", help="run the patch/condition mode grid")
    _add_common(p)
    p.add_argument("--deblur-checkpoint", dest="deblur_checkpoint")
    p.add_argument("--bme-checkpoint", dest="bme_checkpoint")
    p.add_argument("--r-values", nargs="*", type=float, default=None,
                   help="sweep r instead of the mode grid")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "prepare-data":
            result = cmd_prepare_data(_config_from_args(args))
        elif args.command == "train-bme":
            bme_config = BMEConfig.toy() if args.toy else BMEConfig()
            result = cmd_train_bme(args.data, args.out, bme_config,
                                   seed=args.seed, max_steps=args.max_steps)
        elif args.command == "adapt":
            result = cmd_adapt(_config_from_args(args))
        elif args.command == "ablate":
            result = cmd_ablate(_config_from_args(args), r_values=args.r_values)
        else:
            result = cmd_evaluate(_config_from_args(args))
    except Exception as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump({"ok": True, "summary": _summarize(result)}, sys.stdout)
    sys.stdout.write("\n")
    return 0


def _summarize(result):
    if isinstance(result, dict):
        keep = {}
        for key in ("num_pairs", "tau", "num_samples", "psnr", "ssim"):
            if key in result:
                keep[key] = result[key]
        for label in ("baseline", "adapted"):
            if isinstance(result.get(label), dict):
                keep[label] = {k: result[label][k] for k in ("psnr", "ssim")}
        return keep or {k: v for k, v in list(result.items())[:5]}
    return result


if __name__ == "__main__":
    sys.exit(main())
