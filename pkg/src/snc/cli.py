"""Command-line surface: train, extract, knn, retrieve, flips, export.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Output
files are written atomically, so failed commands leave no partial files.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import os
import sys
from pathlib import Path

import numpy as np

from . import codestore, config, kernels
from .data import Dataset
from .errors import ConfigurationError, SncError
from .evaluation import (
    FlipLedger,
    FlipTracker,
    compare_methods,
    flip_series,
    report_text,
    write_pr_csv,
    write_report,
)
from .io import atomic_write_text
from .model import (
    forward,
    init_network,
    layer_signals,
    load_checkpoint,
    resolve_layer,
    save_checkpoint,
    train,
)
from .submask import masks_for_layer, pack_rows, unpack_rows


def _add_common(parser: argparse.ArgumentParser, *, seed: bool = False, out=None):
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="kernel threads, 0 = auto (SNC_THREADS env is the fallback)",
    )
    if seed:
        parser.add_argument("--seed", type=int, default=None, help="override [train] seed")
    if out:
        parser.add_argument("--out", default=None, help=out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snc",
        description="Train locally competitive networks and query their "
        "bit-packed subnetwork codes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", required=True)
    _add_common(p, seed=True, out="output directory (overrides [output] dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract a mask store from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--layer", type=int, default=None, help="hidden layer index")
    p.add_argument("--theta", type=float, default=None, help="sigmoid threshold")
    _add_common(p)
    p.add_argument("--out", required=True, help="store file to write")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("knn", help="compare softmax against kNN variants")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--weighting", choices=codestore.WEIGHTINGS, default=None)
    _add_common(p, out="directory for report.txt")
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("retrieve", help="rank store entries against a query")
    p.add_argument("--store", required=True)
    p.add_argument("--query-id", type=int, default=None)
    p.add_argument("--query-bits", default=None, help="external query as a 0/1 string")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--csv", default=None, help="also write rows as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("flips", help="flip-rate series from epoch mask snapshots")
    p.add_argument("--masks", required=True, help="directory of epoch_*.sbmk files")
    _add_common(p, out="CSV file to write")
    p.set_defaults(func=cmd_flips)

    p = sub.add_parser("export", help="dump masks or activations as CSV")
    p.add_argument("--store", default=None)
    p.add_argument("--what", choices=("masks", "activations"), default="masks")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--layer", type=int, default=None)
    _add_common(p)
    p.add_argument("--out", required=True, help="CSV file to write")
    p.set_defaults(func=cmd_export)
    return parser


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("SNC_THREADS", "").strip()
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigurationError(f"bad SNC_THREADS value {env!r}") from exc
    return 0


def _load_pair(cfg) -> tuple[Dataset, Dataset | None]:
    return config.load_datasets(cfg)


def _pick_split(cfg, which: str) -> Dataset:
    train_set, test_set = _load_pair(cfg)
    if which == "train":
        return train_set
    if test_set is None:
        raise ConfigurationError("config defines no test split ([data] test_*)")
    return test_set


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def cmd_train(args) -> None:
    cfg = config.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = Path(args.out or cfg.out_dir)
    if not str(out_dir.name):
        raise ConfigurationError("missing [output] dir (or pass --out)")
    cfg.out_dir = str(out_dir)

    full_train, _ = _load_pair(cfg)
    from .data import split as split_dataset

    train_set, val_set = split_dataset(full_train, cfg.val_fraction, seed=cfg.seed)
    specs = config.layer_specs(cfg, input_dim=full_train.features.shape[1])
    net = init_network(specs, full_train.class_count, cfg.seed)

    hooks = []
    tracker = None
    if cfg.flips_enabled:
        count = min(cfg.flips_track, len(train_set))
        layer = cfg.flips_layer if cfg.flips_layer is not None else cfg.mask_layer
        tracker = FlipTracker(
            train_set.features[:count],
            train_set.ids[:count],
            layer_index=layer,
            theta=cfg.theta,
        )
        hooks.append(tracker)

    best, log = train(net, train_set, val_set, config.train_config(cfg), hooks)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, out_dir / "checkpoint.sncm")
    rows = ["epoch,train_loss,val_error"]
    rows += [f"{s.epoch},{_fmt(s.train_loss)},{_fmt(s.val_error_rate)}" for s in log]
    atomic_write_text(out_dir / "epochs.csv", "\n".join(rows) + "\n")
    atomic_write_text(out_dir / "config.ini", config.resolved_text(cfg))

    if tracker is not None and tracker.ledger is not None:
        ledger = tracker.ledger
        mask_dir = out_dir / "flip_masks"
        for epoch, codes in zip(ledger.epochs, ledger.snapshots):
            store = codestore.build(
                codes,
                train_set.labels[: len(ledger.ids)],
                ledger.ids,
                ledger.length_bits,
                full_train.class_count,
            )
            codestore.save(store, mask_dir / f"epoch_{epoch:04d}.sbmk")
        if len(ledger.snapshots) >= 2:
            series = flip_series(ledger)
            lines = ["epoch,mean_flip_fraction"]
            lines += [
                f"{e},{_fmt(v)}" for e, v in zip(ledger.epochs[1:], series.tolist())
            ]
            atomic_write_text(out_dir / "flips.csv", "\n".join(lines) + "\n")

    best_epoch = min(log, key=lambda s: (s.val_error_rate, s.epoch))
    print(f"trained {len(log)} epochs; best val error {best_epoch.val_error_rate:.4f} "
          f"at epoch {best_epoch.epoch}")
    print(f"wrote {out_dir / 'checkpoint.sncm'}")


def cmd_extract(args) -> None:
    cfg = config.load_config(args.config)
    net = load_checkpoint(args.checkpoint)
    dataset = _pick_split(cfg, args.split)
    layer = args.layer if args.layer is not None else cfg.mask_layer
    theta = args.theta if args.theta is not None else cfg.theta
    codes, bits = masks_for_layer(net, dataset.features, layer, theta)
    store = codestore.build(
        codes, dataset.labels, dataset.ids, bits, dataset.class_count
    )
    codestore.save(store, args.out)
    print(f"wrote {args.out}: {len(store)} codes of {bits} bits")


def cmd_knn(args) -> None:
    cfg = config.load_config(args.config)
    net = load_checkpoint(args.checkpoint)
    store = codestore.load(args.store)
    reference, queries = _load_pair(cfg)
    if queries is None:
        raise ConfigurationError("config defines no test split ([data] test_*)")
    report = compare_methods(
        net,
        reference,
        queries,
        layer_index=cfg.mask_layer,
        k=args.k if args.k is not None else cfg.k,
        weighting=args.weighting or cfg.weighting,
        theta=cfg.theta,
        store=store,
    )
    text = report_text(report)
    print(text, end="")
    if args.out:
        out_dir = Path(args.out)
        write_report(report, out_dir / "report.txt")
        if report.pr_points:
            write_pr_csv(report.pr_points, out_dir / "pr.csv")
        print(f"wrote {out_dir / 'report.txt'}")


def cmd_retrieve(args) -> None:
    store = codestore.load(args.store)
    if (args.query_id is None) == (args.query_bits is None):
        raise ConfigurationError("pass exactly one of --query-id / --query-bits")
    exclude = None
    if args.query_id is not None:
        rows = np.flatnonzero(store.ids == args.query_id)
        if rows.size == 0:
            raise SncError(f"unknown query id {args.query_id}")
        query = store.codes[rows[0]]
        exclude = args.query_id
    else:
        bits = args.query_bits.strip()
        if set(bits) - {"0", "1"} or len(bits) != store.length_bits:
            raise ConfigurationError(
                f"--query-bits must be {store.length_bits} characters of 0/1"
            )
        query = pack_rows(np.frombuffer(bits.encode(), dtype=np.uint8).reshape(1, -1) - ord("0"))[0]
    neighbors = codestore.topk(store, query, args.k, exclude_id=exclude)
    print("id\tlabel\tdistance")
    for n in neighbors:
        print(f"{n.id}\t{n.label}\t{n.distance}")
    if args.csv:
        buf = _io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["id", "label", "distance"])
        for n in neighbors:
            writer.writerow([n.id, n.label, n.distance])
        atomic_write_text(args.csv, buf.getvalue())


def cmd_flips(args) -> None:
    mask_dir = Path(args.masks)
    files = sorted(mask_dir.glob("epoch_*.sbmk"))
    if len(files) < 2:
        raise SncError(f"need at least 2 epoch_*.sbmk files in {mask_dir}")
    ledger = None
    for path in files:
        epoch = int(path.stem.split("_")[1])
        store = codestore.load(path)
        if ledger is None:
            ledger = FlipLedger(store.ids.copy(), store.length_bits)
        ledger.append(epoch, store.codes.copy())
    series = flip_series(ledger)
    lines = ["epoch,mean_flip_fraction"]
    print("epoch\tmean_flip_fraction")
    for epoch, value in zip(ledger.epochs[1:], series.tolist()):
        print(f"{epoch}\t{value:.6f}")
        lines.append(f"{epoch},{_fmt(value)}")
    if args.out:
        atomic_write_text(args.out, "\n".join(lines) + "\n")


def cmd_export(args) -> None:
    if args.what == "masks":
        if not args.store:
            raise ConfigurationError("--store is required for mask export")
        store = codestore.load(args.store)
        bits = unpack_rows(store.codes, store.length_bits)
        header = ["id", "label"] + [f"b{i}" for i in range(store.length_bits)]
        lines = [",".join(header)]
        for i in range(len(store)):
            row = bits[i].astype("U1")
            lines.append(f"{store.ids[i]},{store.labels[i]}," + ",".join(row))
        atomic_write_text(args.out, "\n".join(lines) + "\n")
        print(f"wrote {args.out}: {len(store)} rows")
        return
    if not (args.config and args.checkpoint):
        raise ConfigurationError("--config and --checkpoint are required for activations")
    cfg = config.load_config(args.config)
    net = load_checkpoint(args.checkpoint)
    dataset = _pick_split(cfg, args.split)
    layer = args.layer if args.layer is not None else cfg.mask_layer
    postact, _ = layer_signals(net, dataset.features, layer)
    header = ["id", "label"] + [f"a{i}" for i in range(postact.shape[1])]
    lines = [",".join(header)]
    for i in range(len(dataset)):
        values = ",".join(_fmt(v) for v in postact[i])
        lines.append(f"{dataset.ids[i]},{dataset.labels[i]},{values}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}: {len(dataset)} rows")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        kernels.set_threads(_resolve_threads(args))
        args.func(args)
        return 0
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SncError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    sys.exit(main())
