"""Command-line entry point: ``cvaegan <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import harness
from .data import write_synthetic
from .errors import CvaeGanError


def _synth_data(args):
    out = write_synthetic(args.out, args.n, args.size, args.seed)
    print(f"wrote {args.n} images ({4 * args.size}x{4 * args.size}) to {out}")


def _train(args, stage):
    config = harness.load_config(args.config, stage=stage)
    if stage == 1:
        path = harness.train_stage1(config, resume=args.resume)
    else:
        path = harness.train_stage2(config, stage1_checkpoint=args.stage1, resume=args.resume)
    print(path)


def _generate(args):
    paths = harness.generate_cmd(args.stage1, args.stage2, args.emb, args.n, args.seed, args.out)
    print(f"wrote {len(paths) - 1} samples and {paths[-1]}")


def _evaluate(args):
    report = harness.evaluate_cmd(args.stage1, args.stage2, args.data, args.classifier, args.n,
                                  args.seed)
    print(report.to_json())


def _train_classifier(args):
    from .data import load_dataset
    from .metrics import classifier_accuracy, train_classifier

    ds = load_dataset(args.data, args.size)
    n = len(ds)
    order = np.random.default_rng(args.seed).permutation(n)
    cut = int(0.8 * n)
    train_idx, test_idx = order[:cut], order[cut:]
    model = train_classifier(ds.images_hi[train_idx], ds.labels[train_idx], args.epochs,
                             args.seed, num_classes=args.classes)
    acc = classifier_accuracy(model, ds.images_hi[test_idx], ds.labels[test_idx])
    harness.save_classifier(args.out, model, acc)
    print(f"held-out accuracy {acc:.4f}; wrote {args.out}")


def _gradcheck(args):
    from .gradcheck import format_results, run_suite

    start = time.perf_counter()
    results = run_suite(seeds=range(args.seeds), include_models=not args.ops_only)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {time.perf_counter() - start:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvaegan", description="Two-stage text-to-image pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="render the synthetic shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=16, help="stage-1 resolution; images are 4x")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_synth_data)

    for stage in (1, 2):
        s = sub.add_parser(f"train-stage{stage}", help=f"train stage {stage}")
        s.add_argument("--config", required=True)
        s.add_argument("--resume", help="checkpoint to continue from")
        if stage == 2:
            s.add_argument("--stage1", help="stage-1 checkpoint (overrides the config)")
        s.set_defaults(func=lambda a, stage=stage: _train(a, stage))

    s = sub.add_parser("generate", help="sample images from trained checkpoints")
    s.add_argument("--stage1", required=True)
    s.add_argument("--stage2", required=True)
    s.add_argument("--emb", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_generate)

    s = sub.add_parser("evaluate", help="Inception Score and FID on the test split")
    s.add_argument("--stage1", required=True)
    s.add_argument("--stage2", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--classifier", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_evaluate)

    s = sub.add_parser("train-classifier", help="train the surrogate metric classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--size", type=int, default=16, help="stage-1 resolution of the data")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--classes", type=int, default=24)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_train_classifier)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--ops-only", action="store_true", help="skip the full-model checks")
    s.set_defaults(func=_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except CvaeGanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
