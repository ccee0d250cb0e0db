"""Checkpoint evaluation and run-directory reporting.

Covers the single-checkpoint path (confusion matrix, per-class metrics,
text report) and the aggregation path (results table across runs, training
curves). The confusion matrix and per-class precision/recall/F1 go beyond
the plain accuracy/loss comparison and are marked as extensions in the
rendered report. Per-class ratios with an empty denominator are reported
as 0 and flagged rather than raising.
"""

import configparser
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import optim
from .dataset import DatasetManifest
from .errors import CheckpointIncompatibleError, ConfigurationError
from .train import (HISTORY_HEADER, DataPipeline, EpochMetrics,
                    TrainingHistory)

logger = logging.getLogger("mri_bench.evaluate")

RESULTS_HEADER = "model,epochs,train_accuracy,train_loss,val_accuracy,val_loss"

PLOT_METRICS = ("loss", "accuracy")
PLOT_SPLITS = ("train", "val")


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Counts with true class on rows, predicted class on columns."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"label arrays must be 1-D and equal length, "
                         f"got {y_true.shape} and {y_pred.shape}")
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        out[t, p] += 1
    return out


@dataclass(frozen=True)
class PerClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int
    degenerate: Tuple[str, ...] = ()


def per_class_metrics(confusion: np.ndarray,
                      class_names: Sequence[str]) -> Dict[str, PerClassMetrics]:
    """Precision/recall/F1 per class; 0/0 ratios become 0 and are flagged."""
    confusion = np.asarray(confusion)
    out = {}
    for i, name in enumerate(class_names):
        tp = int(confusion[i, i])
        support = int(confusion[i, :].sum())
        predicted = int(confusion[:, i].sum())
        degenerate = []
        if predicted == 0:
            precision = 0.0
            degenerate.append("precision")
        else:
            precision = tp / predicted
        if support == 0:
            recall = 0.0
            degenerate.append("recall")
        else:
            recall = tp / support
        if precision + recall == 0.0:
            f1 = 0.0
            degenerate.append("f1")
        else:
            f1 = 2 * precision * recall / (precision + recall)
        if degenerate:
            logger.warning("class %s has undefined %s (reported as 0)",
                           name, ", ".join(degenerate))
        out[name] = PerClassMetrics(precision=precision, recall=recall, f1=f1,
                                    support=support, predicted=predicted,
                                    degenerate=tuple(degenerate))
    return out


@dataclass(frozen=True)
class EvaluationReport:
    """Metrics for one model; the split that was evaluated fills its pair
    of accuracy/loss fields and the confusion matrix."""

    model_id: str
    split: str
    num_samples: int
    confusion: Tuple[Tuple[int, ...], ...]
    per_class: Dict[str, PerClassMetrics]
    class_names: Tuple[str, ...]
    epochs_trained: Optional[int] = None
    train_accuracy: Optional[float] = None
    train_loss: Optional[float] = None
    val_accuracy: Optional[float] = None
    val_loss: Optional[float] = None

    @property
    def accuracy(self) -> float:
        value = self.val_accuracy if self.split == "val" else self.train_accuracy
        return float("nan") if value is None else value

    @property
    def loss(self) -> float:
        value = self.val_loss if self.split == "val" else self.train_loss
        return float("nan") if value is None else value


def _sidecar_epochs_trained(checkpoint_path: Path) -> Optional[int]:
    sidecar = checkpoint_path.with_name(checkpoint_path.name + ".meta")
    if not sidecar.exists():
        return None
    for line in sidecar.read_text().splitlines():
        if line.startswith("epochs_trained = "):
            try:
                return int(line.split("=", 1)[1])
            except ValueError:
                return None
    return None


def evaluate(checkpoint_path, manifest: DatasetManifest, split: str = "val",
             batch_size: int = 8) -> EvaluationReport:
    """Evaluate a saved checkpoint on one manifest split, inference mode."""
    from .model import load_checkpoint, read_checkpoint_meta  # heavy import

    checkpoint_path = Path(checkpoint_path)
    handle = load_checkpoint(checkpoint_path)
    meta = read_checkpoint_meta(checkpoint_path)
    num_classes = handle.head_spec.num_classes
    if num_classes != len(manifest.class_names):
        raise CheckpointIncompatibleError(
            f"checkpoint predicts {num_classes} classes but manifest defines "
            f"{len(manifest.class_names)}"
        )
    pipeline = DataPipeline(
        manifest, split, backbone_id=handle.backbone_spec.id,
        input_size=handle.backbone_spec.input_size, batch_size=batch_size,
        augmentation=None)
    all_true, all_pred = [], []
    loss_sum = 0.0
    count = 0
    for x, labels, onehot in pipeline.eval_batches():
        logits = handle.logits(x, training=False)
        loss_sum += optim.cross_entropy_from_logits(logits, onehot) * len(labels)
        all_true.append(labels)
        all_pred.append(np.argmax(logits, axis=-1))
        count += len(labels)
    y_true = np.concatenate(all_true)
    y_pred = np.concatenate(all_pred)
    confusion = confusion_matrix(y_true, y_pred, num_classes)
    accuracy = float(np.trace(confusion)) / count
    loss = loss_sum / count
    epochs_trained = _sidecar_epochs_trained(checkpoint_path)
    if epochs_trained is None:
        epochs_trained = meta.get("extra", {}).get("epoch")
    return EvaluationReport(
        model_id=handle.backbone_spec.id,
        split=split,
        num_samples=count,
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
        per_class=per_class_metrics(confusion, manifest.class_names),
        class_names=tuple(manifest.class_names),
        epochs_trained=epochs_trained,
        train_accuracy=accuracy if split == "train" else None,
        train_loss=loss if split == "train" else None,
        val_accuracy=accuracy if split == "val" else None,
        val_loss=loss if split == "val" else None,
    )


def render_report(report: EvaluationReport) -> str:
    lines = [
        f"model = {report.model_id}",
        f"split = {report.split}",
        f"samples = {report.num_samples}",
        f"accuracy = {report.accuracy:.4f}",
        f"loss = {report.loss:.4f}",
    ]
    if report.epochs_trained is not None:
        lines.append(f"epochs_trained = {report.epochs_trained}")
    lines.append("")
    lines.append("confusion matrix (rows = true, columns = predicted; "
                 "extension beyond the accuracy/loss comparison):")
    width = max(len(n) for n in report.class_names) + 2
    header = " " * width + "".join(f"{n:>{width}}" for n in report.class_names)
    lines.append(header)
    for name, row in zip(report.class_names, report.confusion):
        lines.append(f"{name:<{width}}" + "".join(f"{v:>{width}}" for v in row))
    lines.append("")
    lines.append("per-class metrics (extension):")
    for name in report.class_names:
        m = report.per_class[name]
        flag = f"  (undefined: {', '.join(m.degenerate)})" if m.degenerate else ""
        lines.append(f"{name}: precision={m.precision:.4f} recall={m.recall:.4f} "
                     f"f1={m.f1:.4f} support={m.support}{flag}")
    return "\n".join(lines) + "\n"


def write_report(report: EvaluationReport, path) -> None:
    Path(path).write_text(render_report(report))


@dataclass(frozen=True)
class ResultRow:
    model: str
    epochs: Optional[int]
    train_accuracy: Optional[float]
    train_loss: Optional[float]
    val_accuracy: Optional[float]
    val_loss: Optional[float]


def best_epoch_metrics(history: TrainingHistory) -> EpochMetrics:
    """The row of the first minimum validation loss (the checkpointed epoch)."""
    if not history.epochs:
        raise ValueError("history has no epochs")
    return min(history.epochs, key=lambda m: (m.val_loss, m.epoch))


def result_row(history: TrainingHistory,
               report: Optional[EvaluationReport] = None) -> ResultRow:
    """Summary row for one model.

    The history supplies the epoch count and, at its best-validation-loss
    epoch, the four metrics; a report, when given, overrides the metrics of
    the split it evaluated (a re-evaluation of the saved checkpoint is more
    authoritative than the history row).
    """
    epochs = None
    train_accuracy = train_loss = val_accuracy = val_loss = None
    model = None
    if history is not None:
        best = best_epoch_metrics(history)
        model = history.model_id
        epochs = len(history.epochs)
        train_accuracy, train_loss = best.train_accuracy, best.train_loss
        val_accuracy, val_loss = best.val_accuracy, best.val_loss
    if report is not None:
        model = model or report.model_id
        if epochs is None:
            epochs = report.epochs_trained
        if report.train_accuracy is not None:
            train_accuracy, train_loss = report.train_accuracy, report.train_loss
        if report.val_accuracy is not None:
            val_accuracy, val_loss = report.val_accuracy, report.val_loss
    if model is None:
        raise ValueError("result_row needs a history or a report")
    return ResultRow(model=model, epochs=epochs, train_accuracy=train_accuracy,
                     train_loss=train_loss, val_accuracy=val_accuracy,
                     val_loss=val_loss)


def build_result_rows(reports: Sequence[EvaluationReport],
                      histories: Sequence[TrainingHistory]) -> List[ResultRow]:
    """Pair reports and histories by model id; history order wins, then
    report-only models follow."""
    reports = list(reports or [])
    histories = list(histories or [])
    report_by_id = {}
    for r in reports:
        report_by_id.setdefault(r.model_id, r)
    history_by_id = {}
    order = []
    for h in histories:
        if h.model_id not in history_by_id:
            history_by_id[h.model_id] = h
            order.append(h.model_id)
    for r in reports:
        if r.model_id not in history_by_id and r.model_id not in order:
            order.append(r.model_id)
    return [result_row(history_by_id.get(mid), report_by_id.get(mid))
            for mid in order]


def _cell(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.4f}"


def emit_results_table(reports: Sequence[EvaluationReport],
                       histories: Sequence[TrainingHistory], out) -> None:
    """Write the comparison table (one row per model, 4 decimal places)."""
    rows = build_result_rows(reports, histories)
    lines = [RESULTS_HEADER]
    for r in rows:
        epochs = "" if r.epochs is None else str(r.epochs)
        lines.append(",".join([r.model, epochs, _cell(r.train_accuracy),
                               _cell(r.train_loss), _cell(r.val_accuracy),
                               _cell(r.val_loss)]))
    Path(out).write_text("\n".join(lines) + "\n")


def summarize_best(reports) -> List[str]:
    """Model ids ranked by validation accuracy descending; ties broken by
    lower validation loss, then lexicographic id.

    Accepts EvaluationReports, ResultRows, or anything else exposing
    val_accuracy/val_loss plus a model_id or model attribute.
    """
    def key(r):
        acc = r.val_accuracy if r.val_accuracy is not None else float("-inf")
        loss = r.val_loss if r.val_loss is not None else float("inf")
        return (-acc, loss, _model_id_of(r))

    return [_model_id_of(r) for r in sorted(reports, key=key)]


def _model_id_of(r) -> str:
    return getattr(r, "model_id", None) or getattr(r, "model")


def load_history_csv(path, model_id: str) -> TrainingHistory:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != HISTORY_HEADER:
        raise ConfigurationError(
            f"{path}: expected history header {HISTORY_HEADER!r}, "
            f"got {lines[0] if lines else '<empty>'!r}"
        )
    epochs: List[EpochMetrics] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ConfigurationError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            epochs.append(EpochMetrics(
                epoch=int(parts[0]),
                train_loss=float(parts[1]),
                train_accuracy=float(parts[2]),
                val_loss=float(parts[3]),
                val_accuracy=float(parts[4]),
                wall_seconds=float(parts[5]),
            ))
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{lineno}: {exc}") from exc
    if not epochs:
        raise ConfigurationError(f"{path}: history contains no epochs")
    best = min(epochs, key=lambda m: (m.val_loss, m.epoch))
    return TrainingHistory(
        model_id=model_id,
        epochs=tuple(epochs),
        best_epoch=best.epoch,
        stopped_early=False,  # not recorded in the csv
        checkpoint_path=None,
    )


def _model_id_for_run(run_dir: Path) -> str:
    sidecar = run_dir / "best.ckpt.meta"
    if sidecar.exists():
        for line in sidecar.read_text().splitlines():
            if line.startswith("model = "):
                return line.split("=", 1)[1].strip()
    snapshot = run_dir / "config.snapshot"
    if snapshot.exists():
        parser = configparser.ConfigParser()
        try:
            parser.read_string(snapshot.read_text())
            if parser.has_option("model", "backbone"):
                return parser.get("model", "backbone")
        except configparser.Error:
            pass
    return run_dir.name


def read_run_history(run_dir) -> TrainingHistory:
    """History of one run directory, with the model id recovered from its files."""
    run_dir = Path(run_dir)
    history_path = run_dir / "history.csv"
    if not history_path.exists():
        raise ConfigurationError(f"{run_dir} has no history.csv")
    return load_history_csv(history_path, _model_id_for_run(run_dir))


def plot_curves(histories: Sequence[TrainingHistory], metric: str, split: str,
                out) -> Path:
    """Write one curve plot: x = epoch, y = `metric` on `split`, one line
    per model."""
    if metric not in PLOT_METRICS:
        raise ValueError(f"metric must be one of {PLOT_METRICS}, got {metric!r}")
    if split not in PLOT_SPLITS:
        raise ValueError(f"split must be one of {PLOT_SPLITS}, got {split!r}")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    attr = f"{split}_{'accuracy' if metric == 'accuracy' else 'loss'}"
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for history in histories:
        xs = [m.epoch for m in history.epochs]
        ys = [getattr(m, attr) for m in history.epochs]
        ax.plot(xs, ys, marker="o", markersize=2.5, label=history.model_id)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"{split} {metric}")
    ax.set_title(f"{metric} on {split} split")
    if histories:
        ax.legend()
    ax.grid(True, alpha=0.3)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return out
