"""Command-line front end: ``icnd <subcommand> --run DIR [options]``.

Exit codes: 0 success, 1 stage failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import StageDependencyError

SUBCOMMANDS = ("gen-data", "train-detector", "score", "binarize", "estimate-k",
               "train-classifier", "eval", "run-all")


def _add_common(p):
    p.add_argument("--run", default="run", help="run directory (default: %(default)s)")
    p.add_argument("--config", help="JSON config file; flags override its values "
                   "(default: RUN/config.json, else the bundled demo config)")
    p.add_argument("--seed", type=int, default=None,
                   help=f"master seed (default: config value, else {pipeline.DEFAULT_SEED})")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")


def _add_binarizer(p):
    d = pipeline.BinarizerConfig()
    p.add_argument("--p1", type=float, default=None, help=f"lower percentile (default: {d.p1})")
    p.add_argument("--p2", type=float, default=None, help=f"upper percentile (default: {d.p2})")
    p.add_argument("--sweep-k", type=int, default=None, help=f"threshold count K (default: {d.K})")
    p.add_argument("--epsilon", type=int, choices=(0, 1), default=None,
                   help=f"component-count tolerance (default: {d.epsilon})")
    p.add_argument("--crop-px", type=int, default=None, help="crop side in pixels (default: H/4)")


def build_parser():
    parser = argparse.ArgumentParser(prog="icnd", description=__doc__.splitlines()[0])
    d = pipeline.demo_config()
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    helps = {
        "gen-data": "write the seeded synthetic corpus",
        "train-detector": "train the normal-information detector",
        "score": "write score maps for all non-training images",
        "binarize": "adaptive binarization, masks and defect-centred crops",
        "estimate-k": "estimate the total class count from embeddings",
        "train-classifier": "pretrain the encoder or train the discovery head",
        "eval": "write metrics.json",
        "run-all": "run every stage in order",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        _add_common(p)
        if name in ("train-detector", "run-all"):
            p.add_argument("--detector-steps", type=int, default=None, help=f"detector training steps (default: {d.detector['steps']})")
        if name in ("binarize", "run-all"):
            _add_binarizer(p)
        if name in ("estimate-k", "run-all"):
            p.add_argument("--k-min", type=int, default=None, help=f"smallest total class count tried (default: {d.discovery.k_min})")
            p.add_argument("--k-max", type=int, default=None, help=f"largest total class count tried (default: {d.discovery.k_max})")
        if name == "estimate-k":
            p.add_argument("--embeddings", help="CSV of unit embeddings (default: RUN/embeddings.csv)")
            p.add_argument("--labels", help="one integer per row, -1 = unlabeled (default: RUN/labels.csv)")
            p.add_argument("--out", help="with --embeddings: also write the JSON result to this file")
        if name in ("train-classifier", "run-all"):
            p.add_argument("--pretrain-steps", type=int, default=None, help=f"encoder pretraining steps (default: {d.discovery.pretrain_steps})")
            p.add_argument("--classifier-steps", type=int, default=None, help=f"head training steps (default: {d.discovery.steps})")
        if name == "train-classifier":
            p.add_argument("--phase", choices=("pretrain", "heads", "both"), default="heads",
                           help="pretrain: encoder and embeddings; heads: head from K̂; both: "
                                "pretrain, estimate-k, heads (default: %(default)s)")
    return parser


def _merged_config(args, run_dir):
    cfg_path = Path(run_dir) / "config.json"
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    elif cfg_path.exists():
        base = json.loads(cfg_path.read_text(encoding="utf-8"))
    elif args.command in ("gen-data", "run-all"):
        base = pipeline.demo_config().to_dict()
    else:
        raise StageDependencyError(args.command, str(cfg_path), "run gen-data or run-all first")
    if args.seed is not None:
        base["seed"] = args.seed
    base.setdefault("seed", pipeline.DEFAULT_SEED)
    det = base.setdefault("detector", {})
    bz = base.setdefault("binarizer", {})
    disc = base.setdefault("discovery", {})
    overrides = [
        ("detector_steps", det, "steps"), ("p1", bz, "p1"), ("p2", bz, "p2"),
        ("sweep_k", bz, "K"), ("epsilon", bz, "epsilon"), ("crop_px", bz, "crop_px"),
        ("k_min", disc, "k_min"), ("k_max", disc, "k_max"),
        ("pretrain_steps", disc, "pretrain_steps"), ("classifier_steps", disc, "steps"),
    ]
    for attr, target, key in overrides:
        value = getattr(args, attr, None)
        if value is not None:
            target[key] = value
    return pipeline.RunConfig.from_dict(base)


def _dispatch(args):
    if args.command == "estimate-k" and args.embeddings:
        # standalone use on arbitrary files, no run directory involved
        result = pipeline.estimate_k_file(args.embeddings, args.labels, args.k_min, args.k_max,
                                          pipeline.DEFAULT_SEED if args.seed is None else args.seed)
        text = json.dumps(result, indent=1)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        print(text)
        return
    config = _merged_config(args, args.run)
    run = pipeline.Run(args.run, config)
    run.save_config()
    if args.command == "run-all":
        metrics = pipeline.run_pipeline(config, args.run)
        print(json.dumps(metrics, sort_keys=True))
        return
    if args.command == "train-classifier":
        phases = {"pretrain": ["pretrain"], "heads": ["train-classifier"],
                  "both": ["pretrain", "estimate-k", "train-classifier"]}[args.phase]
        for stage in phases:
            print(json.dumps({stage: pipeline.run_stage(run, stage)}, sort_keys=True))
        return
    kw = {}
    if args.command == "estimate-k":
        kw = {"embeddings": args.embeddings, "labels": args.labels}
    info = pipeline.run_stage(run, args.command, **kw)
    print(json.dumps(info, sort_keys=True))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    if args.command == "estimate-k" and args.embeddings and None in (args.labels, args.k_min, args.k_max):
        parser.error("estimate-k --embeddings also needs --labels, --k-min and --k-max")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _dispatch(args)
    except StageDependencyError as exc:
        print(f"icnd {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"icnd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
