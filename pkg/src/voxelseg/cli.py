"""Command-line entry points.

Commands: ``gen-synth``, ``train``, ``segment``, ``evaluate``.  Exit codes:
0 success, 1 usage or configuration error, 2 runtime failure.  Flags
override the corresponding config-file keys; ``--threads 1`` also caps the
BLAS pools so reruns are bit-reproducible.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
import time

from threadpoolctl import threadpool_limits

from . import __version__
from .config import (
    SPAWN_INIT,
    SPAWN_SAMPLING,
    SPAWN_TRAIN,
    ConfigError,
    RunConfig,
    derived_rng,
    load_config,
)
from .inference import segment_refined
from .metrics import evaluate
from .network import build, load_model, save_model
from .synthdata import load_dataset, write_dataset
from .training import TrainState, sample_disjoint, train, write_history
from .volume import load_labels, load_volume, save_labels

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="voxelseg", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="cap worker/BLAS parallelism")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory (with manifest)")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--stage", choices=("1", "full"), required=True,
                   help="1 = no centroid pathway, full = with it")
    p.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", parents=[common], help="segment a volume")
    p.add_argument("--stage1", required=True, help="stage-1 model path")
    p.add_argument("--full", required=True, help="centroid-aware model path")
    p.add_argument("--volume", required=True, help="input volume path")
    p.add_argument("--out", required=True, help="output label path")
    p.add_argument("--report", help="run-report JSON path (default: <out>.report.json)")
    p.add_argument("--mask", help="label file whose nonzero voxels form the mask")
    p.add_argument("--max-iters", type=int, help="refinement rounds cap")
    p.add_argument("--eps", type=float, help="changed-fraction convergence threshold")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", parents=[common], help="compare labels to truth")
    p.add_argument("--pred", required=True, help="predicted label path")
    p.add_argument("--truth", required=True, help="ground-truth label path")
    p.add_argument("--n-regions", type=int, help="region count (default: truth max)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def cmd_gen_synth(args, config: RunConfig) -> int:
    synth_cfg = config.synth.to_synth_config(config.seed)
    manifest = write_dataset(synth_cfg, config.synth.n_train, config.synth.n_test, args.out)
    print(
        f"wrote {len(manifest['atlases'])} atlases "
        f"({manifest['n_train']} train, {manifest['n_test']} test) to {args.out}"
    )
    return 0


def cmd_train(args, config: RunConfig) -> int:
    train_atlases, _, manifest = load_dataset(args.data)
    if not train_atlases:
        raise ValueError(f"{args.data}: dataset has no training atlases")
    n_regions = int(manifest["config"]["n_regions"])
    fcfg = config.features.to_feature_config(n_regions)
    ncfg = config.network.to_network_config(fcfg)
    with_centroid = args.stage == "full"
    stage_tag = 1 if with_centroid else 0

    tr = config.training
    logger.info("sampling %d+%d voxels per atlas", tr.per_atlas_train, tr.per_atlas_val)
    train_set, val_set = sample_disjoint(
        train_atlases, tr.per_atlas_train, tr.per_atlas_val,
        derived_rng(config.seed, SPAWN_SAMPLING), fcfg,
    )
    model = build(ncfg, with_centroid, derived_rng(config.seed, SPAWN_INIT, stage_tag))
    state = TrainState(
        learning_rate=tr.learning_rate, momentum=tr.momentum,
        batch_size=tr.batch_size, patience=tr.patience,
        rng=derived_rng(config.seed, SPAWN_TRAIN, stage_tag),
    )
    best, history = train(model, train_set, val_set, state, tr.max_epochs)
    save_model(best, args.out)
    write_history(history, args.history or f"{args.out}.history.csv")
    best_err = min((h["val_error"] for h in history), default=float("nan"))
    print(
        f"trained stage={args.stage} model: {len(history)} epochs, "
        f"best val error {best_err:.4f}, saved to {args.out}"
    )
    return 0


def cmd_segment(args, config: RunConfig) -> int:
    stage1 = load_model(args.stage1)
    full = load_model(args.full)
    if stage1.config.features != full.config.features:
        raise ValueError("stage-1 and full models disagree on the feature config")
    volume = load_volume(args.volume)
    mask = None
    if args.mask:
        mask = load_labels(args.mask).labels > 0
    inf = config.inference
    max_iters = inf.max_iters if args.max_iters is None else args.max_iters
    eps = inf.eps if args.eps is None else args.eps

    started = time.perf_counter()
    result = segment_refined(
        stage1, full, volume, full.config.features,
        mask=mask, max_iters=max_iters, eps=eps, block=inf.block_size,
    )
    wall = time.perf_counter() - started
    save_labels(result.labels, args.out)
    report = {
        "format": "vseg-segment-report-1",
        "rounds": result.iterations,
        "changed_fractions": result.changed_history,
        "wall_time_s": wall,
        "seed": config.seed,
        "config": {"max_iters": max_iters, "eps": eps, "block_size": inf.block_size},
        "inputs": {"stage1": args.stage1, "full": args.full, "volume": args.volume},
    }
    report_path = args.report or f"{args.out}.report.json"
    with open(report_path, "w", encoding="ascii") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"segmented {args.volume}: {result.iterations} refinement rounds, "
        f"labels at {args.out}, report at {report_path}"
    )
    return 0


def cmd_evaluate(args, config: RunConfig) -> int:
    pred = load_labels(args.pred)
    truth = load_labels(args.truth)
    n_regions = args.n_regions or truth.max_label()
    if n_regions < 1:
        raise ValueError("truth volume has no foreground; pass --n-regions")
    report = evaluate(pred, truth, n_regions)
    sys.stdout.write(report.to_csv())
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else
        logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        threads = args.threads if args.threads is not None else config.threads
        if threads is not None and threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    limits = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
