"""Command-line entry point: ``unlearnlab {run,report,convert,synth,check}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .data import forget_count, generate_synthetic, load_idx_dataset, split_forget, write_manifest_dataset
from .errors import EmissionError, UnlearnLabError
from .tensor import set_deterministic


def _run(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    if args.out:
        config.out = args.out
    if args.seed is not None:
        config.seeds = [args.seed]
    ledger = harness.run_experiment(config, force=args.force)
    try:
        for p in harness.emit_tables(ledger):
            print(f"wrote {p}")
        if len(config.scenarios) >= 2:
            for p in harness.emit_aug_comparison(ledger):
                print(f"wrote {p}")
    except EmissionError as exc:
        print(f"report: {exc}", file=sys.stderr)
    failed = [k for k, c in ledger.cells.items() if c["status"] not in harness.FINISHED]
    for k in failed:
        print(f"incomplete cell {k}: {ledger.cells[k].get('error')}", file=sys.stderr)
    return 0 if not failed else 1


def _report(args) -> int:
    ledger = harness.RunLedger.load(args.ledger)
    for p in harness.emit_tables(ledger, args.out):
        print(f"wrote {p}")
    try:
        for p in harness.emit_aug_comparison(ledger, args.out):
            print(f"wrote {p}")
    except EmissionError as exc:
        print(f"augmentation comparison skipped: {exc}", file=sys.stderr)
    return 0


def _convert(args) -> int:
    splits = {}
    for split in ("train", "val", "test"):
        images, labels = getattr(args, f"{split}_images"), getattr(args, f"{split}_labels")
        if images and labels:
            splits[split] = load_idx_dataset(images, labels, args.num_classes, split)
    if "train" not in splits:
        print("convert needs at least --train-images and --train-labels", file=sys.stderr)
        return 2
    write_manifest_dataset(args.out, splits, pixel_dtype=args.pixel_dtype)
    print(f"wrote manifest dataset to {args.out} ({', '.join(f'{k}={len(v)}' for k, v in splits.items())})")
    return 0


def _synth(args) -> int:
    tr, va, te = generate_synthetic(args.classes, args.per_class, args.size, args.noise, args.seed, args.channels)
    write_manifest_dataset(args.out, {"train": tr, "val": va, "test": te}, pixel_dtype=args.pixel_dtype)
    print(f"wrote synthetic corpus to {args.out}: train={len(tr)} val={len(va)} test={len(te)}")
    return 0


def self_check(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Gradient and invariant self-tests; returns (name, passed, detail) rows."""
    from .models import Architecture, build_model, forward
    from .tensor import RunningMoments, Tensor, finite_difference_check, softmax_cross_entropy

    gen = np.random.default_rng(seed)
    results = []

    x = Tensor(gen.standard_normal((2, 3, 6, 6)))
    k = Tensor(gen.standard_normal((4, 3, 3, 3)))
    err = finite_difference_check(lambda: _conv_probe(x, k), [x, k], eps=1e-6)
    results.append(("conv2d gradient", err < 1e-3, f"max rel err {err:.2e}"))

    xb = Tensor(gen.standard_normal((4, 3, 3, 3)))
    g, b = Tensor(gen.standard_normal(3)), Tensor(gen.standard_normal(3))
    w = Tensor(gen.standard_normal((2, 27)))
    moments = RunningMoments.zeros(3, np.float64)
    err = finite_difference_check(lambda: _bn_probe(xb, g, b, w, moments), [xb, g, b, w], eps=1e-6)
    results.append(("batchnorm2d gradient", err < 1e-3, f"max rel err {err:.2e}"))

    model = build_model(Architecture("ResNetS", image_size=8, widths=(4, 8, 8), blocks_per_stage=1), 3, seed).astype(np.float64)
    images = gen.random((4, 1, 8, 8))
    labels = np.array([0, 1, 2, 1])
    err = finite_difference_check(
        lambda: softmax_cross_entropy(forward(model, images, train=True), labels), model.params, eps=1e-6, coords_per_tensor=16
    )
    results.append(("ResNetS forward+loss gradient", err < 1e-3, f"max rel err {err:.2e}"))

    ok = True
    for n in (1, 10, 100, 11959):
        for rate in (0.0, 0.1, 0.5, 1.0):
            p = split_forget(n, rate, seed)
            f, r = set(p.forget.tolist()), set(p.retain.tolist())
            ok &= not (f & r) and (f | r) == set(range(n)) and len(f) == forget_count(rate, n)
    results.append(("forget partition invariants", ok, "disjoint, covering, floor cardinality"))
    return results


def _conv_probe(x, k):
    from .tensor import conv2d, tensor_sum, mul

    y = conv2d(x, k, 1, 1)
    return tensor_sum(mul(y, y))


def _bn_probe(x, g, b, w, moments):
    from .tensor import batchnorm2d, flatten, linear, relu, softmax_cross_entropy

    h = relu(batchnorm2d(x, g, b, moments, True))
    return softmax_cross_entropy(linear(flatten(h), w), [0, 1, 1, 0])


def _check(args) -> int:
    rows = self_check(args.seed or 0)
    for name, passed, detail in rows:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return 0 if all(p for _, p, _ in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnlab", description="Machine-unlearning experiments on small image classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--deterministic", action="store_true", help="fixed reduction order (single-threaded BLAS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment grid")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--force", action="store_true", help="recompute completed cells")
    p.set_defaults(func=_run)

    p = sub.add_parser("report", help="emit tables and the augmentation comparison from a ledger")
    p.add_argument("--ledger", required=True, type=Path, help="ledger.json or the run directory")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_report)

    p = sub.add_parser("convert", help="convert IDX files to a manifest dataset")
    for split in ("train", "val", "test"):
        p.add_argument(f"--{split}-images", type=Path)
        p.add_argument(f"--{split}-labels", type=Path)
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--pixel-dtype", choices=("float32", "uint8"), default="uint8")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_convert)

    p = sub.add_parser("synth", help="generate a synthetic manifest dataset")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=800)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pixel-dtype", choices=("float32", "uint8"), default="float32")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_synth)

    p = sub.add_parser("check", help="gradient and invariant self-tests")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    if args.deterministic:
        set_deterministic(True)
    try:
        return args.func(args)
    except UnlearnLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
