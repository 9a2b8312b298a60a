"""Command-line interface: ``splicefx <command> ...``.

Exit codes: 0 success, 1 usage, 2 input I/O, 3 unsupported format,
4 internal error.
"""

import argparse
import csv
import json
import logging
import math
import secrets
import sys
from pathlib import Path

import numpy as np

from . import dctfeat, harness, metrics
from . import model as mdl
from . import splicegen
from .jpeg import CorruptStream, UnsupportedFormat, parse_coefficients

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_INTERNAL = 0, 1, 2, 3, 4

log = logging.getLogger("splicefx")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p, top=False):
    # on subparsers the defaults are suppressed so they do not clobber values
    # given before the subcommand
    default = None if top else argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=default, help="random seed (echoed to stderr)")
    p.add_argument("--json", action="store_true", default=False if top else argparse.SUPPRESS,
                   help="machine-readable output")
    p.add_argument("--verbose", "-v", action="store_true",
                   default=False if top else argparse.SUPPRESS)


def build_parser():
    p = _Parser(prog="splicefx", description="JPEG splice forensics toolkit")
    _global_flags(p, top=True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("inspect", help="show JPEG structure and coefficient histogram summary")
    s.add_argument("file")
    s.add_argument("--figure", help="also write a PNG of selected AC histograms")
    _global_flags(s)

    s = sub.add_parser("features", help="write a DCTF feature cache")
    s.add_argument("inputs", nargs="*")
    s.add_argument("--out", required=True)
    s.add_argument("--label", choices=("original", "spliced"),
                   help="label stored for every sample (default: unknown, 255)")
    _global_flags(s)

    s = sub.add_parser("gen", help="generate a splice dataset")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--corpus", help="directory of source images")
    src.add_argument("--procedural", action="store_true", help="use procedural sources (default)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=256, help="procedural image size")
    s.add_argument("--out", required=True)
    _global_flags(s)

    d = harness.TrainConfig()
    s = sub.add_parser("train", help="cross-validated training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--branch", choices=("cnn", "inn"), default="cnn")
    s.add_argument("--spatial", default="none", help="tiny | embed:<file> | none")
    s.add_argument("--epochs", type=int, default=d.epochs)
    s.add_argument("--batch", type=int, default=d.batch_size)
    s.add_argument("--lr", type=float, default=d.initial_lr)
    s.add_argument("--lr-decay", type=float, default=d.lr_decay_factor)
    s.add_argument("--lr-step", type=int, default=d.lr_step_epochs)
    s.add_argument("--folds", type=int, default=d.folds)
    s.add_argument("--max-folds", type=int, help="train only the first N folds")
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    s.add_argument("--out", required=True, help="checkpoint path")
    _global_flags(s)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=("test", "all"), default="test",
                   help="held-out test split recorded at training time, or every row")
    s.add_argument("--roc", help="also write the ROC CSV here")
    s.add_argument("--embeddings", help="EMBD sidecar for embedding models")
    s.add_argument("--no-figures", action="store_true")
    _global_flags(s)

    s = sub.add_parser("predict", help="classify one JPEG")
    s.add_argument("--model", required=True)
    s.add_argument("--embeddings")
    s.add_argument("file")
    _global_flags(s)

    s = sub.add_parser("roc", help="write ROC points as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=("test", "all"), default="test")
    s.add_argument("--embeddings")
    s.add_argument("--out", required=True)
    s.add_argument("--no-figures", action="store_true")
    _global_flags(s)
    return p


def _emit(args, doc, text):
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(text)


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


# -- commands -------------------------------------------------------------------

def cmd_inspect(args):
    coef = parse_coefficients(_read(args.file))
    hist = dctfeat.ac_histograms(coef)
    nz = [int(v) for v in hist.nonzero_bins()]
    tables = {str(k): np.asarray(v).astype(int).tolist() for k, v in sorted(coef.quant_tables.items())}
    rows, cols = coef.block_grid(0)
    doc = {
        "file": args.file, "width": coef.width, "height": coef.height,
        "components": len(coef.components), "subsampling": coef.subsampling,
        "sampling_factors": [[c.h_sampling, c.v_sampling] for c in coef.components],
        "restart_interval": coef.restart_interval, "quant_tables": tables,
        "luma_blocks": int(rows * cols), "nonzero_bins": nz,
    }
    lines = [f"{args.file}: {coef.width}x{coef.height}, {len(coef.components)} component(s), "
             f"{coef.subsampling}",
             f"luma blocks: {rows * cols} ({rows}x{cols})"]
    for k, t in tables.items():
        lines.append(f"quant table {k}:")
        lines.extend("  " + " ".join(f"{v:3d}" for v in row) for row in t)
    lines.append("non-zero bins per AC coefficient 1..16: " + " ".join(map(str, nz)))
    _emit(args, doc, "\n".join(lines))
    if args.figure:
        from . import plots
        plots.histogram_figure(hist, args.figure, title=Path(args.file).name)
    return EXIT_OK


def cmd_features(args):
    if not args.inputs:
        raise UsageError("features needs at least one input file")
    feats, paths = [], []
    for path in args.inputs:
        try:
            feats.append(dctfeat.extract_features(_read(path)))
            paths.append(path)
        except (UnsupportedFormat, CorruptStream, dctfeat.EmptyImage, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
    if not feats:
        raise OSError("no input could be read as a baseline JPEG")
    label = {"original": 0, "spliced": 1}.get(args.label, 255)
    dctfeat.write_cache(args.out, feats, [label] * len(feats), paths)
    _emit(args, {"out": args.out, "samples": len(feats), "skipped": len(args.inputs) - len(feats)},
          f"wrote {len(feats)} samples to {args.out}")
    return EXIT_OK


def cmd_gen(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    rows = splicegen.gen_dataset(args.count, args.seed, args.out, corpus_dir=args.corpus,
                                 size=args.size)
    manifest = str(Path(args.out) / "manifest.csv")
    _emit(args, {"manifest": manifest, "rows": len(rows)},
          f"wrote {len(rows)} samples, manifest {manifest}")
    return EXIT_OK


def _parse_spatial(value):
    if value in ("none", "tiny"):
        return value, None
    if value.startswith("embed:") and len(value) > 6:
        return "embed", value[6:]
    raise UsageError(f"--spatial must be tiny, embed:<file> or none, got {value!r}")


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(float(h["train_loss"])), repr(float(h["val_loss"])),
                        repr(float(h["val_acc"])), repr(float(h["lr"]))])


def write_roc_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, fpr, tpr in points:
            w.writerow(["inf" if math.isinf(t) else repr(float(t)), repr(float(fpr)),
                        repr(float(tpr))])


def _sibling(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix)


def cmd_train(args):
    spatial, embed_file = _parse_spatial(args.spatial)
    if not Path(args.manifest).is_file():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    try:
        config = harness.TrainConfig(
            epochs=args.epochs, batch_size=args.batch, initial_lr=args.lr,
            lr_decay_factor=args.lr_decay, lr_step_epochs=args.lr_step, seed=args.seed,
            folds=args.folds, branch=args.branch, spatial=spatial, augment=not args.no_augment)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = harness.load_dataset(args.manifest, spatial=spatial, embeddings=embed_file)
    result = harness.train(config, data, max_folds=args.max_folds)
    best = result.best
    meta = result.metadata()
    meta["manifest"] = str(args.manifest)
    if embed_file:
        meta["embeddings"] = str(embed_file)
    mdl.save(best.model, args.out, metadata=meta)
    hist_path = _sibling(args.out, "_history.csv")
    write_history_csv(best.history, hist_path)
    if not args.no_figures:
        from . import plots
        plots.history_figure(best.history, _sibling(args.out, "_history.png"))
    folds = [{"fold": f.fold, "best_epoch": f.best_epoch, "val_acc": f.best_val_acc,
              "test": json.loads(f.test_report.to_json())} for f in result.folds]
    for f in folds:
        f["test"].pop("roc")
    names = ("acc", "precision", "recall", "f1", "mcc", "auc")
    mean = {n: result.mean_test(n) for n in names}
    doc = {"checkpoint": str(args.out), "history": str(hist_path),
           "selected_fold": best.fold, "folds": folds, "mean_test": mean}
    lines = [f"fold {f['fold']}: best epoch {f['best_epoch']}, val acc {f['val_acc']:.4f}, "
             f"test acc {f['test']['acc']:.4f}" for f in folds]
    lines.append("mean test: " + ", ".join(f"{n} {mean[n]:.4f}" for n in names))
    lines.append(f"saved fold {best.fold} to {args.out}")
    _emit(args, doc, "\n".join(lines))
    return EXIT_OK


def _load_eval(args):
    model, meta = mdl.load(args.model, with_metadata=True)
    spatial = model.config.spatial
    embed_file = getattr(args, "embeddings", None) or meta.get("embeddings")
    data = harness.load_dataset(args.manifest, spatial=spatial, embeddings=embed_file)
    if args.split == "test" and "seed" in meta:
        idx = harness.test_indices(data, meta)
    else:
        idx = np.arange(len(data))
    return model, data, idx


def cmd_eval(args):
    model, data, idx = _load_eval(args)
    rep = harness.evaluate(model, data, idx)
    if args.roc:
        write_roc_csv(rep.roc, args.roc)
        if not args.no_figures:
            from . import plots
            plots.roc_figure(rep.roc, _sibling(args.roc, ".png"), auc=rep.auc)
    if args.json:
        print(rep.to_json(indent=2, sort_keys=True))
    else:
        print(f"n={len(idx)} tp={rep.tp} tn={rep.tn} fp={rep.fp} fn={rep.fn}")
        print(f"acc {rep.acc:.4f}  precision {rep.precision:.4f}  recall {rep.recall:.4f}  "
              f"f1 {rep.f1:.4f}  mcc {rep.mcc:.4f}  auc {rep.auc:.4f}")
        if rep.degenerate:
            print("degenerate (zero denominator): " + ", ".join(rep.degenerate))
    return EXIT_OK


def cmd_predict(args):
    model = mdl.load(args.model)
    embedding = None
    if model.config.spatial == "embed":
        if not args.embeddings:
            raise mdl.MissingEmbedding("this model needs --embeddings")
        _, table = mdl.read_embeddings(args.embeddings)
        embedding = mdl.lookup_embedding(table, args.file)
    out = mdl.predict(model, _read(args.file), embedding)
    out["file"] = args.file
    _emit(args, out, f"{args.file}: {out['label']} (p_spliced={out['p_spliced']:.4f})")
    return EXIT_OK


def cmd_roc(args):
    model, data, idx = _load_eval(args)
    scores = harness.predict_proba(model, data, idx)
    points = metrics.roc_points(scores, data.labels[idx])
    write_roc_csv(points, args.out)
    if not args.no_figures:
        from . import plots
        plots.roc_figure(points, _sibling(args.out, ".png"),
                         auc=metrics.auc(scores, data.labels[idx]))
    _emit(args, {"out": args.out, "points": len(points)},
          f"wrote {len(points)} ROC points to {args.out}")
    return EXIT_OK


COMMANDS = {"inspect": cmd_inspect, "features": cmd_features, "gen": cmd_gen,
            "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "roc": cmd_roc}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors exit 1, --help exits 0
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.seed is None:
        args.seed = secrets.randbelow(2**31)
    print(f"seed: {args.seed}", file=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"splicefx: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UnsupportedFormat, mdl.ConfigError) as exc:
        print(f"splicefx: unsupported: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (OSError, CorruptStream, mdl.LoadError, mdl.MissingEmbedding,
            splicegen.InsufficientCorpus, dctfeat.EmptyImage) as exc:
        print(f"splicefx: input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (harness.TooSmall, splicegen.RangeError) as exc:
        print(f"splicefx: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        log.debug("internal error", exc_info=True)
        print(f"splicefx: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
