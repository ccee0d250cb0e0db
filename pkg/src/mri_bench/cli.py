"""Command-line entry point.

Subcommands:
    prepare    scan a dataset tree into a manifest (optionally verifying
               the published class counts)
    train      train one backbone from a manifest into a run directory
    evaluate   evaluate a checkpoint on a manifest split
    report     aggregate run directories into a results table and curves

Every config key is exposed as a --section.key=value flag (e.g.
--train.batch_size=4); a --config INI file supplies the base values and
flags win. Exit codes: 0 success, 2 usage/configuration problems, 3 count
verification failure under --strict, 4 numerical failure during training.

Deep-learning imports happen inside the commands that need them, so
`prepare` and `report` stay quick. Each invocation is a single process;
concurrent invocations must target distinct run directories.
"""

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, override_flags
from .dataset import (KAGGLE_CLASS_COUNTS, KAGGLE_STATED_TOTAL, load_manifest,
                      save_manifest, scan_dataset, stratified_split,
                      verify_counts)
from .errors import MriBenchError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VERIFICATION = 3
EXIT_NUMERICAL = 4

logger = logging.getLogger("mri_bench.cli")


class _OverrideAction(argparse.Action):
    """Collects --section.key=value flags into a list of override strings."""

    def __call__(self, parser, namespace, values, option_string=None):
        items = list(getattr(namespace, self.dest) or [])
        items.append(f"{option_string[2:]}={values}")
        setattr(namespace, self.dest, items)


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group(
        "configuration",
        "base values come from --config (INI), then --section.key flags win")
    group.add_argument("--config", metavar="PATH",
                       help="INI config file (defaults apply when omitted)")
    for section, key, default in override_flags():
        group.add_argument(f"--{section}.{key}", metavar="VALUE",
                           action=_OverrideAction, dest="overrides",
                           default=[], help=f"default: {default}")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mri-bench",
        description="Training and evaluation harness for 4-class brain-MRI "
                    "classification with pretrained backbones.",
        allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _config_parent()

    p = sub.add_parser("prepare", parents=[common], allow_abbrev=False,
                       help="scan a dataset tree into a manifest csv")
    p.add_argument("--root", metavar="DIR",
                   help="dataset root (shorthand for --dataset.root)")
    p.add_argument("--layout", choices=("pre_split", "flat"),
                   help="directory layout (shorthand for --dataset.layout)")
    p.add_argument("--ratio", type=float,
                   help="train fraction for stratified splitting")
    p.add_argument("--seed", type=int, help="split seed")
    p.add_argument("--out", metavar="PATH", default="manifest.csv",
                   help="manifest output path (default: manifest.csv)")
    p.add_argument("--resplit", action="store_true",
                   help="discard existing split assignments and re-split")
    p.add_argument("--expect-paper", action="store_true",
                   help="verify class counts against the published table")
    p.add_argument("--strict", action="store_true",
                   help="exit 3 when --expect-paper finds a mismatch")

    t = sub.add_parser("train", parents=[common], allow_abbrev=False,
                       help="train one model into a run directory")
    t.add_argument("--manifest", metavar="PATH", required=True)
    t.add_argument("--backbone", metavar="ID",
                   help="shorthand for --model.backbone")
    t.add_argument("--run-dir", metavar="DIR",
                   help="run directory (default: <output.run_root>/<backbone>)")
    t.add_argument("--force", action="store_true",
                   help="reuse a run directory that already has a history.csv")

    e = sub.add_parser("evaluate", parents=[common], allow_abbrev=False,
                       help="evaluate a checkpoint on a manifest split")
    e.add_argument("--checkpoint", metavar="PATH", required=True)
    e.add_argument("--manifest", metavar="PATH", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--batch-size", type=int, default=8)
    e.add_argument("--out", metavar="PATH", help="also write the report here")

    r = sub.add_parser("report", parents=[common], allow_abbrev=False,
                       help="aggregate run directories into table and plots")
    r.add_argument("--runs", metavar="DIR", nargs="*", default=[],
                   help="run directories to aggregate")
    r.add_argument("--out-dir", metavar="DIR", default="report")

    return parser


def _load_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    return config.apply_overrides(args.overrides)


def cmd_prepare(args) -> int:
    config = _load_config(args)
    dataset_overrides = []
    if args.root is not None:
        dataset_overrides.append(f"dataset.root={args.root}")
    if args.layout is not None:
        dataset_overrides.append(f"dataset.layout={args.layout}")
    if args.ratio is not None:
        dataset_overrides.append(f"dataset.ratio={args.ratio}")
    if args.seed is not None:
        dataset_overrides.append(f"dataset.seed={args.seed}")
    config = config.apply_overrides(dataset_overrides)
    section = config.dataset

    manifest = scan_dataset(section.root, layout=section.layout)
    if section.layout == "flat" or args.resplit:
        manifest = stratified_split(manifest, section.ratio, section.seed,
                                    reset=args.resplit)

    if args.expect_paper:
        verification = verify_counts(manifest, KAGGLE_CLASS_COUNTS,
                                     stated_total=KAGGLE_STATED_TOTAL)
        print(verification.render())
        if not verification.all_match and args.strict:
            print("error: class counts differ from the published table "
                  "(--strict)", file=sys.stderr)
            return EXIT_VERIFICATION

    save_manifest(manifest, args.out)
    counts = manifest.counts()
    print(f"manifest written to {args.out}: {len(manifest)} images"
          + (f" ({manifest.skipped} skipped)" if manifest.skipped else ""))
    for name, (total, train_n, val_n) in counts.items():
        print(f"  {name}: {total} total, {train_n} train, {val_n} val")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    if args.backbone:
        config = config.apply_overrides([f"model.backbone={args.backbone}"])
    manifest = load_manifest(args.manifest)

    run_dir = Path(args.run_dir) if args.run_dir else (
        Path(config.output.run_root) / config.model.backbone)
    if (run_dir / "history.csv").exists() and not args.force:
        raise MriBenchError(
            f"{run_dir} already contains a history.csv; pass --force to "
            "overwrite or choose a different --run-dir"
        )

    # heavy imports deferred until a training run is actually requested
    from .model import build_model
    from .train import DataPipeline, train

    backbone_spec = config.to_backbone_spec()
    augmentation = config.to_augmentation_spec()
    train_pipeline = DataPipeline(
        manifest, "train", backbone_id=backbone_spec.id,
        input_size=backbone_spec.input_size, batch_size=config.train.batch_size,
        augmentation=augmentation, seed=config.train.seed,
        offline_copies=config.augment.offline_copies)
    val_pipeline = DataPipeline(
        manifest, "val", backbone_id=backbone_spec.id,
        input_size=backbone_spec.input_size, batch_size=config.train.batch_size,
        augmentation=None, seed=config.train.seed)

    model = build_model(backbone_spec, config.to_head_spec(),
                        trainable_scope=config.model.trainable_scope,
                        seed=config.train.seed)
    history = train(model, train_pipeline, val_pipeline,
                    config.to_train_config(), run_dir,
                    config_snapshot=config.to_ini())

    last = history.epochs[-1]
    print(f"trained {history.model_id} for {len(history.epochs)} epoch(s)"
          + (" (stopped early)" if history.stopped_early else ""))
    print(f"best epoch {history.best_epoch}; last epoch: "
          f"train_acc={last.train_accuracy:.4f} val_acc={last.val_accuracy:.4f}")
    if history.checkpoint_path:
        print(f"checkpoint: {history.checkpoint_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        raise MriBenchError(f"checkpoint {checkpoint} does not exist")

    from .evaluate import evaluate, render_report  # heavy import

    report = evaluate(checkpoint, manifest, split=args.split,
                      batch_size=args.batch_size)
    text = render_report(report)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluate import (PLOT_METRICS, PLOT_SPLITS, emit_results_table,
                           plot_curves, read_run_history, summarize_best)

    histories = [read_run_history(run) for run in args.runs]
    if not histories:
        logger.warning("no run directories given; emitting an empty table")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "results.csv"
    emit_results_table([], histories, table_path)
    print(f"results table: {table_path}")
    if histories:
        for metric in PLOT_METRICS:
            for split in PLOT_SPLITS:
                path = plot_curves(histories, metric, split,
                                   out_dir / f"{metric}_{split}.png")
                print(f"plot: {path}")
        from .evaluate import result_row
        rows = [result_row(h) for h in histories]
        best_id = summarize_best(rows)[0]
        best_row = next(r for r in rows if r.model == best_id)
        print(f"best validation accuracy: {best_row.model} "
              f"({best_row.val_accuracy:.4f}, {best_row.epochs} epochs)")
    return EXIT_OK


_COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MriBenchError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
