"""Command-line driver: ``kanjinet {ingest,train,eval,attribute}``.

Options may also come from a ``key = value`` file given with ``--config``;
flags on the command line win over file values. Exit codes: 0 success,
2 input error, 3 divergence, 4 incompatible checkpoint/dataset, 5 bad
argument.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from . import attribution, data, ensemble
from .errors import (
    DivergenceError,
    IncompatibleError,
    KanjiNetError,
    SpecMismatchError,
    TransferError,
)
from .models import build_arch, build_model
from .pipeline import is_kanji_input
from .training import DEFAULT_EPOCHS, TrainConfig, load_checkpoint, save_checkpoint, train, transfer_init

log = logging.getLogger("kanjinet")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_INCOMPATIBLE, EXIT_BAD_ARG = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def read_config(path):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(action, value):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction, argparse.BooleanOptionalAction)):
        low = value.lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise CliError(f"config key {action.dest}: expected a boolean, got {value!r}")
        flag = low in ("1", "true", "yes", "on")
        return (not flag) if isinstance(action, argparse._StoreFalseAction) else flag
    convert = action.type or str
    try:
        if action.nargs in ("+", "*"):
            return [convert(v) for v in value.replace(",", " ").split()]
        return convert(value)
    except (TypeError, ValueError):
        raise CliError(f"config key {action.dest}: bad value {value!r}") from None


def apply_config(subparser, path):
    values = read_config(path)
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config", "command")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise CliError(f"{path}: unknown keys {unknown}")
    subparser.set_defaults(**{k: _coerce(actions[k], v) for k, v in values.items()})


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require(path, what):
    if path is None:
        raise CliError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _data_dir(args):
    if args.data:
        return args.data
    if args.dataset:
        return Path(args.data_root) / args.dataset
    raise CliError("give --data DIR or --dataset NAME")


def load_ingested(args):
    """Read ``manifest.json`` plus the two KFDS caches written by ``ingest``."""
    directory = _require(_data_dir(args), "dataset directory")
    manifest_path = _require(directory / "manifest.json", "dataset manifest")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if args.dataset and manifest["dataset"] != args.dataset:
        raise CliError(f"{directory} holds {manifest['dataset']}, not {args.dataset}")
    for name, digest in manifest.get("checksums", {}).items():
        if _sha256(_require(directory / name, "dataset cache")) != digest:
            raise CliError(f"{directory / name}: checksum differs from manifest")
    label_map = manifest["label_map"]
    train_ds = data.load_cache(directory / "train.kfds", label_map, manifest["dataset"])
    test_ds = data.load_cache(directory / "test.kfds", label_map, manifest["dataset"])
    return manifest, train_ds, test_ds


def _split_summary(ds):
    return {"samples": len(ds), "class_counts": ds.class_counts().tolist()}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    raw = _require(args.raw, "raw dataset path")
    kwargs = {}
    if args.dataset == "kkanji":
        kwargs = {"top_classes": args.top_classes,
                  "split": data.SplitSpec(Fraction(args.train_fraction).limit_denominator(1000), args.seed)}
    elif args.top_classes:
        raise CliError("--top-classes only applies to kkanji")
    train_ds, test_ds = data.load_dataset(args.dataset, raw, **kwargs)
    out = Path(args.out) / args.dataset
    out.mkdir(parents=True, exist_ok=True)
    data.save_cache(train_ds, out / "train.kfds")
    data.save_cache(test_ds, out / "test.kfds")
    total = len(train_ds) + len(test_ds)
    manifest = {
        "dataset": args.dataset,
        "source": str(raw),
        "input_shape": list(train_ds.input_shape),
        "num_classes": train_ds.num_classes,
        "label_map": train_ds.label_map,
        "train": _split_summary(train_ds),
        "test": _split_summary(test_ds),
        "train_ratio": len(train_ds) / total if total else 0.0,
        "seed": args.seed,
        "checksums": {name: _sha256(out / name) for name in ("train.kfds", "test.kfds")},
    }
    if args.dataset == "kkanji":
        manifest["top_classes"] = args.top_classes
        manifest["train_fraction"] = args.train_fraction
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"{args.dataset}: {len(train_ds)} train / {len(test_ds)} test, {train_ds.num_classes} classes -> {out}")
    return EXIT_OK


def cmd_train(args):
    manifest, train_ds, test_ds = load_ingested(args)
    name = manifest["dataset"]
    kanji = is_kanji_input(train_ds.input_shape) if args.kanji is None else args.kanji
    arch = args.arch
    if arch == "cnn3" and args.base is None and not args.scratch:
        raise CliError("cnn3 needs --base CHECKPOINT (or --scratch to train without transfer)")
    spec = build_arch(arch, train_ds.input_shape, train_ds.num_classes, kanji)
    if arch == "cnn3" and args.base is not None:
        base = load_checkpoint(_require(args.base, "base checkpoint"))
        model = transfer_init(base, spec, freeze=args.freeze, seed=args.seed)
    else:
        model = build_model(spec, args.seed)
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs or DEFAULT_EPOCHS.get(name, 10),
        seed=args.seed,
        optimizer=args.optimizer,
        freeze_prefix=args.freeze_prefix,
    )
    trained, history = train(model, train_ds, test_ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = args.name or f"{name}_{arch}"
    metadata = {
        "dataset": name,
        "epochs": len(history),
        "val_accuracy": history.val_acc[-1],
        "seed": args.seed,
        "base": Path(args.base).name if args.base else None,
        "frozen": sorted(k for k, v in trained.trainable.items() if not v),
    }
    save_checkpoint(trained, metadata, out / f"{stem}.ckpt")
    (out / f"{stem}_history.csv").write_text(history.to_csv(), encoding="utf-8")
    print(f"{stem}: val accuracy {100 * history.val_acc[-1]:.2f}% -> {out / (stem + '.ckpt')}")
    return EXIT_OK


def _load_members(paths):
    return [load_checkpoint(_require(p, "checkpoint")).to_model() for p in paths]


def cmd_eval(args):
    manifest, train_ds, test_ds = load_ingested(args)
    models = _load_members(args.checkpoints)
    report = ensemble.evaluate_members(models, test_ds, args.vote, train_counts=train_ds.class_counts(),
                                       names=[Path(p).name for p in args.checkpoints])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(ensemble.report_json(report), encoding="utf-8")
    table = ensemble.format_report(report)
    (out / "metrics.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_attribute(args):
    manifest, train_ds, test_ds = load_ingested(args)
    ds = test_ds if args.split == "test" else train_ds
    for idx in args.indices:
        if idx < 0 or idx >= len(ds):
            raise CliError(f"sample index {idx} outside 0..{len(ds) - 1}", EXIT_BAD_ARG)
    models = _load_members(args.checkpoints)
    for m in models:
        if m.spec.input_shape != ds.input_shape:
            raise IncompatibleError(f"{m.spec.name} expects {m.spec.input_shape}, dataset has {ds.input_shape}")
    out = Path(args.out) / args.method
    out.mkdir(parents=True, exist_ok=True)
    for idx in args.indices:
        image = ds.images[idx]
        target = int(ds.labels[idx])
        if args.method == "occlusion":
            maps = [attribution.occlusion_map(m, image, target, args.patch, args.stride, args.baseline)
                    for m in models]
        else:
            maps = [attribution.input_gradient_map(m, image, target) for m in models]
        path = out / f"{manifest['dataset']}_{idx}_grid.pgm"
        attribution.render_grid([maps], [image], path)
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=0, help="0 = sequential deterministic mode")


def _data_args(p):
    p.add_argument("--data", help="directory written by ingest")
    p.add_argument("--dataset", choices=sorted(data.LOADERS), help="read <data-root>/<dataset>")
    p.add_argument("--data-root", default=".", help="parent directory of ingested datasets")


def build_parser():
    parser = argparse.ArgumentParser(prog="kanjinet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a raw dataset into KFDS caches plus a manifest")
    _common(p)
    p.add_argument("--dataset", required=True, choices=sorted(data.LOADERS))
    p.add_argument("--raw", help="directory holding the official files (or the K-Kanji PNG tree)")
    p.add_argument("--top-classes", type=int, default=0, help="keep the N most populated classes (kkanji)")
    p.add_argument("--train-fraction", type=float, default=0.7, help="stratified split ratio (kkanji)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one ensemble member")
    _common(p)
    _data_args(p)
    p.add_argument("--arch", required=True, choices=["cnn1", "cnn2", "cnn3", "cnn3-base"])
    p.add_argument("--base", help="cnn3-base checkpoint whose stem seeds cnn3")
    p.add_argument("--freeze", action="store_true", help="keep transferred stem weights fixed")
    p.add_argument("--scratch", action="store_true", help="train cnn3 without a pre-trained stem")
    p.add_argument("--kanji", action=argparse.BooleanOptionalAction, default=None,
                   help="Kanji variant layers (default: on for 64x64 inputs)")
    p.add_argument("--epochs", type=int, default=0, help="0 = per-dataset default")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--freeze-prefix", default=None)
    p.add_argument("--name", help="output file stem")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score members and their maxsum ensemble")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--vote", choices=["soft", "hard"], default="soft")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attribute", help="render saliency grids for selected samples")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--indices", nargs="+", type=int, required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--method", choices=["occlusion", "gradient"], default="occlusion")
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--baseline", type=float, default=0.0)
    p.set_defaults(func=cmd_attribute)
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.config:
            apply_config(_subparser(parser, args.command), _require(args.config, "config file"))
            args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"kanjinet: error: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"kanjinet: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IncompatibleError, TransferError, SpecMismatchError) as exc:
        print(f"kanjinet: incompatible: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (KanjiNetError, OSError) as exc:
        print(f"kanjinet: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
