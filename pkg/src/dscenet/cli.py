"""Command-line front end: gen | split | train | eval | ablate.

Every command echoes its merged configuration into its output directory so a
run can be reproduced from the artifacts alone. Flags override values from an
optional JSON config file. Exit codes: 0 success, 2 usage or configuration,
3 I/O, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .data import (
    CLASS_NAMES,
    GenConfig,
    generate_synthetic,
    load_manifest,
    load_split,
    split_manifest,
    split_table,
    write_dataset,
)
from .errors import (
    BagFormatError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
    ParseError,
)
from .metrics import format_percent, roc_csv
from .model import ModelConfig, ModelParams, Variant, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, history_to_jsonl, train

USAGE_EXIT = 2
IO_EXIT = 3
NUMERIC_EXIT = 4

_ABLATION_ROWS = ("none", "no_cf", "no_ds", "full")
_ROW_TITLES = {
    "none": "w/o DS, w/o CF",
    "no_cf": "w/o CF",
    "no_ds": "w/o DS",
    "full": "full",
}


def _parse_ints(text: str, n: int, what: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}") from None
    if len(values) != n:
        raise ConfigError(f"{what} needs exactly {n} values, got {len(values)}")
    return values


def _echo_config(outdir: Path, name: str, payload: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _gen_config(args: argparse.Namespace) -> GenConfig:
    return GenConfig(
        class_counts=_parse_ints(args.counts, 4, "--counts"),
        n_patches=_parse_ints(args.n_patches, 2, "--n-patches"),
        feature_dim=args.feature_dim,
        clinical_dim=args.clinical_dim,
        signal_fraction=args.signal_fraction,
        image_shift=args.image_shift,
        pair_gap=args.pair_gap,
        background_shift=args.background_shift,
        clinical_shift=args.clinical_shift,
        noise=args.noise,
        scale_jitter=args.scale_jitter,
    )


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = _gen_config(args)
    bags, manifest = generate_synthetic(cfg, args.seed)
    out = Path(args.out)
    write_dataset(bags, manifest, out)
    _echo_config(out, "config.json", {"command": "gen", "seed": args.seed, **cfg.to_dict()})
    histogram = [0] * len(CLASS_NAMES)
    for bag in bags:
        histogram[bag.label] += 1
    parts = [f"{name}: {n}" for name, n in zip(CLASS_NAMES, histogram)]
    print("  ".join(parts) + f"  total: {len(bags)}")
    print(f"manifest: {out / 'manifest.json'}  hash: {manifest.hash()}")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    mpath = Path(args.manifest)
    manifest = load_manifest(mpath)
    split_manifest(manifest, args.seed, mpath.parent, force=args.force)
    mpath.write_text(manifest.to_json())
    _echo_config(
        mpath.parent, "split_config.json",
        {"command": "split", "seed": args.seed, "force": args.force},
    )
    table = split_table(manifest)
    header = ["", *CLASS_NAMES, "sum"]
    rows = [
        ("Train dataset", table["train"]),
        ("Validation dataset", table["val"]),
        ("Test dataset", table["test"]),
    ]
    widths = [20, 6, 6, 8, 6, 6]
    print("".join(h.ljust(w) for h, w in zip(header, widths)))
    for title, counts in rows:
        cells = [title, *[str(c) for c in counts], str(sum(counts))]
        print("".join(c.ljust(w) for c, w in zip(cells, widths)))
    return 0


def _train_one(
    manifest_path: str,
    out: Path,
    variant_name: str,
    epochs: int,
    lr: float,
    seed: int,
    scale_pooling: bool = True,
) -> dict:
    """Train one arm and write its run directory; returns test-split metrics."""
    mpath = Path(manifest_path)
    manifest = load_manifest(mpath)
    if not any(c.split for c in manifest.cases):
        raise ConfigError("manifest has no split assignment; run the split command first")
    root = mpath.parent
    train_set = load_split(manifest, root, "train")
    val_set = load_split(manifest, root, "val")

    variant = Variant.from_name(variant_name)
    config = ModelConfig(
        feature_dim=manifest.feature_dim,
        clinical_dim=manifest.clinical_dim,
        scale_pooling=scale_pooling,
    )
    params = ModelParams.init(config, variant, seed)
    cfg = TrainConfig(learning_rate=lr, epochs=epochs, seed=seed, variant=variant)
    best, history = train(train_set, val_set, params, cfg)

    best_epoch = max(history, key=lambda r: (r.val_macro_auc, -r.epoch)).epoch
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out / "model.ckpt", best,
        extra={"seed": seed, "selection": "best_val_macro_auc", "best_epoch": best_epoch},
    )
    (out / "history.jsonl").write_text(history_to_jsonl(history))
    _echo_config(
        out, "config.json",
        {
            "command": "train", "manifest": str(manifest_path), "variant": variant_name,
            "epochs": epochs, "lr": lr, "seed": seed, "scale_pooling": scale_pooling,
        },
    )

    test_set = load_split(manifest, root, "test")
    report = evaluate(best, test_set)
    return {
        "variant": variant_name,
        "accuracy": report.accuracy,
        "auc": report.macro_auc,
        "precision": report.macro_precision,
        "recall": report.macro_recall,
        "f1": report.macro_f1,
    }


def cmd_train(args: argparse.Namespace) -> int:
    row = _train_one(
        args.manifest, Path(args.out), args.variant, args.epochs, args.lr, args.seed,
    )
    print(
        f"{args.variant}: test ACC {format_percent(row['accuracy'])}  "
        f"AUC {format_percent(row['auc'])}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    params, _ = load_checkpoint(Path(args.checkpoint))
    mpath = Path(args.manifest)
    manifest = load_manifest(mpath)
    if (
        params.config.feature_dim != manifest.feature_dim
        or params.config.clinical_dim != manifest.clinical_dim
    ):
        raise ConfigError(
            f"checkpoint dims ({params.config.feature_dim}, {params.config.clinical_dim}) "
            f"do not match manifest ({manifest.feature_dim}, {manifest.clinical_dim})"
        )
    dataset = load_split(manifest, mpath.parent, args.split)
    report = evaluate(params, dataset)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    for cm, curve in zip(report.per_class, report.roc):
        (out / f"roc_{cm.label}.csv").write_text(roc_csv(curve))
    rows = ["true\\pred," + ",".join(CLASS_NAMES)]
    for name, row in zip(CLASS_NAMES, report.confusion.counts.tolist()):
        rows.append(name + "," + ",".join(str(v) for v in row))
    (out / "confusion.csv").write_text("\n".join(rows) + "\n")
    _echo_config(
        out, "config.json",
        {
            "command": "eval", "checkpoint": str(args.checkpoint),
            "manifest": str(args.manifest), "split": args.split,
        },
    )
    print(
        f"{args.split}: ACC {format_percent(report.accuracy)}  "
        f"AUC {format_percent(report.macro_auc)}  cases {report.confusion.total}"
    )
    return 0


def _ablate_arm(job: tuple) -> dict:
    manifest, out, variant, epochs, lr, seed = job
    return _train_one(manifest, Path(out), variant, epochs, lr, seed)


def _write_ablation(out: Path, rows: list[dict]) -> None:
    lines = ["variant,accuracy,auc,precision,recall,f1"]
    for row in rows:
        lines.append(
            f"{row['variant']},{format_percent(row['accuracy'])},{format_percent(row['auc'])},"
            f"{format_percent(row['precision'])},{format_percent(row['recall'])},"
            f"{format_percent(row['f1'])}"
        )
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")

    text = [
        "".join(h.ljust(w) for h, w in zip(
            ["", "ACC", "AUC", "Precision", "Recall", "F1"], [18, 8, 8, 11, 8, 8]
        ))
    ]
    for row in rows:
        cells = [
            _ROW_TITLES[row["variant"]],
            format_percent(row["accuracy"]), format_percent(row["auc"]),
            format_percent(row["precision"]), format_percent(row["recall"]),
            format_percent(row["f1"]),
        ]
        text.append("".join(c.ljust(w) for c, w in zip(cells, [18, 8, 8, 11, 8, 8])))
    (out / "ablation.txt").write_text("\n".join(text) + "\n")


def cmd_ablate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(
        out, "config.json",
        {
            "command": "ablate", "manifest": str(args.manifest),
            "epochs": args.epochs, "lr": args.lr, "seed": args.seed,
            "parallel": args.parallel,
        },
    )
    jobs = [
        (args.manifest, str(out / name), name, args.epochs, args.lr, args.seed)
        for name in _ABLATION_ROWS
    ]
    rows: list[dict] = []
    if args.parallel:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            rows = list(pool.map(_ablate_arm, jobs))
        _write_ablation(out, rows)
    else:
        for job in jobs:
            try:
                rows.append(_ablate_arm(job))
            finally:
                _write_ablation(out, rows)
    print((out / "ablation.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dscenet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=7)
    common.add_argument("--config", type=str, default=None, help="JSON file of flag defaults")
    common.add_argument("-o", "--out", type=str, default="runs/out")

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--counts", type=str, default="81,126,88,88")
    g.add_argument("--n-patches", type=str, default="8,24")
    g.add_argument("--feature-dim", type=int, default=64)
    g.add_argument("--clinical-dim", type=int, default=10)
    g.add_argument("--signal-fraction", type=float, default=0.5)
    g.add_argument("--image-shift", type=float, default=1.6)
    g.add_argument("--pair-gap", type=float, default=0.5)
    g.add_argument("--background-shift", type=float, default=1.6)
    g.add_argument("--clinical-shift", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--scale-jitter", type=float, default=0.3)
    g.set_defaults(fn=cmd_gen)

    s = sub.add_parser("split", parents=[common], help="assign train/val/test splits")
    s.add_argument("--manifest", type=str, required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_split)

    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("--manifest", type=str, required=True)
    t.add_argument("--variant", choices=["full", "no_ds", "no_cf", "none"], default="full")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-4)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--manifest", type=str, required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train and compare all variants")
    a.add_argument("--manifest", type=str, required=True)
    a.add_argument("--epochs", type=int, default=200)
    a.add_argument("--lr", type=float, default=1e-4)
    a.add_argument("--parallel", action="store_true")
    a.set_defaults(fn=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return IO_EXIT
        except json.JSONDecodeError as exc:
            print(f"error: bad config file: {exc}", file=sys.stderr)
            return USAGE_EXIT
        if not isinstance(overrides, dict):
            print("error: config file must hold a JSON object", file=sys.stderr)
            return USAGE_EXIT
        parser.set_defaults(**overrides)
        args = parser.parse_args(argv)  # explicit flags still win
    try:
        return args.fn(args)
    except (ConfigError, ContractError, ParseError, DimensionError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (OSError, BagFormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERIC_EXIT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
