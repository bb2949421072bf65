"""``nvt`` command line: train, eval, bench, inspect-noise, dataset, gradcheck.

Each command prints exactly one JSON document on stdout; logs go to stderr.
Exit codes: 0 ok, 2 config, 3 training abort, 4 format, 5 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Any

import numpy as np

from nvt import data as D
from nvt import verify
from nvt.config import load_run_config
from nvt.errors import (
    ConfigError,
    DatasetError,
    EstimationError,
    FormatError,
    TrainingAborted,
)
from nvt.evaluate import evaluate, latency_bench
from nvt.model import ViTConfig, init_params, load_checkpoint
from nvt.noise import NoiseConfig, build_quality_matrix, entropy_delta_empirical, entropy_delta_exact
from nvt.train import train

log = logging.getLogger("nvt")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_FORMAT, EXIT_VERIFY = 0, 2, 3, 4, 5

BENCH_DEFAULT = ViTConfig(image_size=224, patch_size=16, embed_dim=32, depth=2, num_heads=2, num_classes=8)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, "argv")


def _emit(doc: Any) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True, default=_json_default) + "\n")
    sys.stdout.flush()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _finite(x: float | None):
    if x is None or math.isfinite(x):
        return x
    return "-inf" if x < 0 else "inf"


# train ------------------------------------------------------------------------


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    root = rc.resolve_path(rc.data.root)
    if not root.exists():
        raise ConfigError(f"dataset path {root} does not exist", "data.root")
    train_set = D.load_dataset(root, rc.data.train_split)
    val_set = D.load_dataset(root, rc.data.val_split)
    for name, ds in (("train", train_set), ("val", val_set)):
        if ds.num_classes != rc.model.num_classes:
            raise ConfigError(
                f"{name} split has {ds.num_classes} classes but the model has {rc.model.num_classes}",
                "model.num_classes",
            )
    norm = rc.data.norm or D.compute_norm_stats(train_set.images)
    noise = rc.noise.resolve(rc.model.depth) if rc.noise is not None else None
    out_dir = rc.resolve_path(args.out or rc.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(rc.to_json(), indent=2, sort_keys=True) + "\n")

    params = init_params(rc.model, rc.train.seed)
    ckpt, history = train(
        params, rc.model, noise, train_set, val_set, rc.train,
        norm=norm, augment=rc.data.augment, out_dir=out_dir, scale_range=rc.data.scale_range,
        extra_meta={"class_names": train_set.class_names},
    )
    best = history.best_row()
    _emit({
        "checkpoint": str(ckpt),
        "history": str(out_dir / "history.jsonl"),
        "best_epoch": history.best_epoch,
        "best_val_top1": best["val_top1"],
        "best_val_top5": best["val_top5"],
        "final_train_acc": history.rows[-1]["train_acc"],
        "noise": None if noise is None else noise.to_json(),
        "norm": norm.to_json(),
    })
    return EXIT_OK


# eval -------------------------------------------------------------------------


def cmd_eval(args) -> int:
    params, cfg, noise, meta = load_checkpoint(args.checkpoint)
    dataset = D.load_dataset(args.data, args.split)
    if dataset.num_classes != cfg.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, checkpoint has {cfg.num_classes}", "--data"
        )
    if "norm" in meta:
        norm = D.NormStats.from_json(meta["norm"])
    else:
        log.warning("checkpoint carries no normalization stats; computing them from the eval split")
        norm = D.compute_norm_stats(dataset.images)
    batch_size = args.batch_size or meta.get("eval_batch_size") or 32
    size = args.image_size or cfg.image_size
    report = evaluate(params, cfg, noise, dataset, size, norm, batch_size, topk=args.topk)
    if args.per_class_csv:
        with open(args.per_class_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_index", "class_name", "count", "top1"])
            for c, (acc, n) in enumerate(zip(report.per_class_top1, report.per_class_count)):
                w.writerow([c, dataset.class_names[c], n, "" if acc is None else acc])
    doc = report.to_json()
    doc["checkpoint"] = str(args.checkpoint)
    doc["split"] = args.split
    doc["image_size"] = size
    _emit(doc)
    return EXIT_OK


# bench ------------------------------------------------------------------------


def cmd_bench(args) -> int:
    noise = None
    if args.checkpoint:
        params, cfg, noise, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = load_run_config(args.config).model if args.config else BENCH_DEFAULT
        params = init_params(cfg, 0)
        if args.config:
            rc = load_run_config(args.config)
            noise = rc.noise.resolve(cfg.depth) if rc.noise else None
    results = [
        latency_bench(params, cfg, noise, r, iterations=args.iterations, warmup=args.warmup)
        for r in args.resolution
    ]
    _emit({
        "results": [{k: v for k, v in r.items() if k != "environment"} for r in results],
        "environment": results[0]["environment"],
        "model": cfg.to_json(),
        "statistic": "median",
    })
    return EXIT_OK


# inspect-noise ----------------------------------------------------------------


def _noise_from_args(args) -> tuple[NoiseConfig | None, ViTConfig | None, int | None]:
    if args.checkpoint:
        _, cfg, noise, meta = load_checkpoint(args.checkpoint)
        return noise, cfg, meta.get("eval_batch_size")
    if args.config:
        rc = load_run_config(args.config)
        return rc.noise, rc.model, rc.train.batch_size
    if args.kind:
        custom = json.loads(args.custom) if args.custom else None
        return NoiseConfig(kind=args.kind, alpha=args.alpha, custom=custom), None, None
    raise ConfigError("give --checkpoint, --config, or --kind", "argv")


def cmd_inspect_noise(args) -> int:
    noise, cfg, default_batch = _noise_from_args(args)
    if noise is None:
        noise = NoiseConfig("identity")
        log.info("no noise configured; reporting the identity transform")
    batch = args.batch or default_batch
    tokens = args.tokens or (cfg.seq_len if cfg else None)
    dim = args.dim or (cfg.embed_dim if cfg else None)
    for flag, value in (("--batch", batch), ("--tokens", tokens), ("--dim", dim)):
        if not value:
            raise ConfigError("required (no model/config to take it from)", flag)
    q = build_quality_matrix(noise, batch)
    report = entropy_delta_exact(q, tokens, dim)
    doc: dict[str, Any] = {
        "kind": noise.kind,
        "alpha": noise.alpha,
        "layer_index": noise.layer_index,
        "batch": batch,
        "tokens": tokens,
        "channels": dim,
        "q": q.realized.tolist(),
        "sign": report.sign,
        "log_abs_det_q": _finite(report.log_abs_det_q),
        "delta_h": _finite(report.effective_log_det),
        "singular": report.singular,
    }
    if args.empirical:
        if batch * tokens * dim > 256:
            raise ConfigError(f"B*T*D = {batch * tokens * dim} too large for a covariance estimate (max 256)",
                              "--empirical")
        try:
            emp = entropy_delta_empirical(q, tokens, dim, trials=args.trials, seed=args.seed)
            doc["empirical"] = {"delta_h": emp.empirical_delta, "std_error": emp.std_error,
                                "trials": emp.sample_count}
        except EstimationError as exc:
            doc["empirical"] = {"error": str(exc), "rank": exc.rank, "trials": args.trials}
    _emit(doc)
    return EXIT_OK


# dataset ----------------------------------------------------------------------


def cmd_dataset(args) -> int:
    if args.action == "scan":
        _emit(D.scan_image_folder(args.root, args.split).to_json())
    elif args.action == "convert":
        splits = {s: D.dataset_from_manifest(D.scan_image_folder(args.root, s)) for s in args.splits}
        D.save_packed_dataset(args.out, splits)
        _emit({"path": str(args.out), "splits": {s: len(ds) for s, ds in splits.items()}})
    elif args.action == "synth":
        splits = {
            "train": D.synth_dataset(args.classes, args.per_class, args.size, args.seed),
            "val": D.synth_dataset(args.classes, args.val_per_class, args.size, args.seed + 1),
        }
        D.save_packed_dataset(args.out, splits)
        _emit({"path": str(args.out), "splits": {s: len(ds) for s, ds in splits.items()},
               "classes": args.classes, "image_size": args.size, "seed": args.seed})
    elif args.action == "stats":
        ds = D.load_dataset(args.root, args.split)
        _emit(D.compute_norm_stats(ds.images).to_json())
    return EXIT_OK


# gradcheck --------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = verify.run(seed=args.seed)
    failing = sorted(k for k, v in results.items() if not v["passed"])
    _emit({"tolerance": verify.TOLERANCE, "results": results, "failing": failing, "passed": not failing})
    return EXIT_VERIFY if failing else EXIT_OK


# entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nvt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override output.dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="image-folder root or packed .nvt dataset")
    e.add_argument("--split", default="val")
    e.add_argument("--batch-size", type=int)
    e.add_argument("--image-size", type=int)
    e.add_argument("--topk", type=int, default=5)
    e.add_argument("--per-class-csv")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="median single-image forward latency")
    src = b.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--checkpoint")
    b.add_argument("--resolution", type=int, nargs="+", default=[224, 384])
    b.add_argument("--iterations", type=int, default=20)
    b.add_argument("--warmup", type=int, default=2)
    b.set_defaults(func=cmd_bench)

    n = sub.add_parser("inspect-noise", help="realized Q and its entropy change")
    src = n.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--checkpoint")
    src.add_argument("--kind", choices=["identity", "cyclic_mix", "cyclic_shift_add", "custom"])
    n.add_argument("--alpha", type=float)
    n.add_argument("--custom", help="JSON nested list for --kind custom")
    n.add_argument("--batch", type=int)
    n.add_argument("--tokens", type=int)
    n.add_argument("--dim", type=int)
    n.add_argument("--empirical", action="store_true")
    n.add_argument("--trials", type=int, default=100_000)
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(func=cmd_inspect_noise)

    d = sub.add_parser("dataset", help="dataset utilities")
    dsub = d.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = dsub.add_parser("scan")
    s.add_argument("--root", required=True)
    s.add_argument("--split", default="train")
    c = dsub.add_parser("convert")
    c.add_argument("--root", required=True)
    c.add_argument("--splits", nargs="+", default=["train", "val"])
    c.add_argument("--out", required=True)
    y = dsub.add_parser("synth")
    y.add_argument("--classes", type=int, default=8)
    y.add_argument("--per-class", type=int, default=64)
    y.add_argument("--val-per-class", type=int, default=16)
    y.add_argument("--size", type=int, default=32)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", required=True)
    st = dsub.add_parser("stats")
    st.add_argument("--root", required=True)
    st.add_argument("--split", default="train")
    d.set_defaults(func=cmd_dataset)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    value = os.environ.get("NVT_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"not an integer: {value!r}", "NVT_THREADS") from None
    return threadpool_limits(max(n, 1))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger("nvt").setLevel(logging.INFO)
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        code, extra, message = EXIT_CONFIG, {"field": exc.field}, str(exc)
    except DatasetError as exc:
        code, extra, message = EXIT_CONFIG, {}, str(exc)
    except TrainingAborted as exc:
        code, message = EXIT_ABORT, str(exc)
        extra = {"epoch": exc.epoch, "batch": exc.batch, "loss": _finite(exc.loss), "lr": exc.lr}
    except FormatError as exc:
        code, extra, message = EXIT_FORMAT, {"offset": exc.offset}, str(exc)
    log.error("%s", message)
    _emit({"error": message, "exit_code": code, **extra})
    return code


if __name__ == "__main__":
    sys.exit(main())
