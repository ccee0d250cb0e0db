"""Training loop: seeded data pipeline, Adam updates, early stopping on
validation loss, and a crash-readable run directory.

The optimizer is the numpy `adam_step` from `optim`; gradients come from
the substrate's tape, get converted to arrays, updated out-of-process from
the graph, and written back. That keeps the update rule identical to the
one the unit tests exercise directly.

Run directory layout:
    config.snapshot   exact configuration text the run started from
    history.csv       one row per completed epoch, flushed immediately
    best.ckpt         weights at the best validation loss so far
    best.ckpt.meta    small text sidecar (best epoch, losses, seed)
    log.txt           timestamped progress log
"""

import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, List, Optional, Tuple

import numpy as np

from . import optim
from .augment import (AugmentationSpec, apply_augmentation, load_image,
                      normalize_for_backbone, resize)
from .dataset import DatasetManifest
from .errors import ConfigurationError, NumericalError
from .seeding import derive_seed

if TYPE_CHECKING:
    from .model import ModelHandle

logger = logging.getLogger("mri_bench.train")

HISTORY_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 42
    input_size: Tuple[int, int] = (512, 512)
    class_weighting: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError(
                f"patience must lie in [1, max_epochs={self.max_epochs}], got {self.patience}"
            )
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be two positive ints, got {self.input_size}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int  # 1-based
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    wall_seconds: float

    def __post_init__(self):
        for name in ("train_accuracy", "val_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("train_loss", "val_loss"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class TrainingHistory:
    model_id: str
    epochs: Tuple[EpochMetrics, ...]
    best_epoch: int
    stopped_early: bool
    checkpoint_path: Optional[str]


@dataclass(frozen=True)
class EarlyStopState:
    """Tracks the best validation loss seen so far; improvement is strict.

    One call to `update_early_stop` per epoch; the state counts epochs
    itself so its `best_epoch` is 1-based like EpochMetrics.
    """

    patience: int
    epoch: int = 0
    best_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0


def update_early_stop(state: EarlyStopState,
                      val_loss: float) -> Tuple[EarlyStopState, bool, bool]:
    """Advance the early-stopping state by one epoch.

    Returns (new_state, should_checkpoint, should_stop). Checkpointing
    requires strict improvement; a tie with the best loss counts as no
    improvement. Stop fires once `patience` consecutive epochs fail to
    improve.
    """
    if not math.isfinite(val_loss):
        raise ValueError(f"val_loss must be finite, got {val_loss}")
    epoch = state.epoch + 1
    if val_loss < state.best_loss:
        new = replace(state, epoch=epoch, best_loss=val_loss, best_epoch=epoch,
                      epochs_since_improvement=0)
        return new, True, False
    new = replace(state, epoch=epoch,
                  epochs_since_improvement=state.epochs_since_improvement + 1)
    return new, False, new.epochs_since_improvement >= new.patience


class DataPipeline:
    """Loads, resizes, augments, and normalizes one manifest split.

    With `offline_copies == 0` augmentation is online: every epoch draws a
    fresh transform per sample. With `offline_copies == k > 0` the split is
    materialized as original + k augmented variants per record, each
    variant's transform fixed across epochs (drawn once from the record's
    path), and no online draws happen.
    """

    def __init__(self, manifest: DatasetManifest, split: str, backbone_id: str,
                 input_size: Tuple[int, int] = (512, 512), batch_size: int = 8,
                 augmentation: Optional[AugmentationSpec] = None, seed: int = 0,
                 offline_copies: int = 0):
        records = manifest.records_for_split(split)
        if not records:
            raise ConfigurationError(f"manifest has no records in split {split!r}")
        if offline_copies < 0:
            raise ValueError(f"offline_copies must be non-negative, got {offline_copies}")
        self.manifest = manifest
        self.split = split
        self.backbone_id = backbone_id
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.batch_size = int(batch_size)
        self.seed = seed
        aug = augmentation if augmentation is not None and augmentation.enabled else None
        self.augmentation = aug
        self.offline_copies = offline_copies if aug is not None else 0
        self.records = records
        self.labels = np.array([manifest.class_index(r.label) for r in records],
                               dtype=np.int64)
        # (record_index, variant): variant None is the original image,
        # variant k is the k-th materialized augmented copy
        self.items: List[Tuple[int, Optional[int]]] = [
            (i, None) for i in range(len(records))
        ]
        if self.offline_copies:
            for k in range(self.offline_copies):
                self.items.extend((i, k) for i in range(len(records)))

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.manifest.class_names)

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.items) / self.batch_size)

    def _load_raw(self, record_index: int):
        record = self.records[record_index]
        img = load_image(self.manifest.resolve_path(record))
        return resize(img, self.input_size[0], self.input_size[1])

    def _item_image(self, item_index: int, epoch: Optional[int]) -> np.ndarray:
        record_index, variant = self.items[item_index]
        img = self._load_raw(record_index)
        if variant is not None:
            rng = np.random.default_rng(derive_seed(
                self.seed, "augment_offline", self.records[record_index].path, str(variant)))
            img = apply_augmentation(img, self.augmentation, rng)
        elif self.augmentation is not None and self.offline_copies == 0 and epoch is not None:
            # per-(epoch, record) generator: draws do not depend on shuffle
            # order or on how loading is parallelized
            rng = np.random.default_rng(derive_seed(
                self.seed, "augment", str(epoch), str(record_index)))
            img = apply_augmentation(img, self.augmentation, rng)
        return normalize_for_backbone(img, self.backbone_id).data

    def _assemble(self, item_indices, epoch: Optional[int]):
        xs, ys = [], []
        for i in item_indices:
            xs.append(self._item_image(int(i), epoch))
            ys.append(self.labels[self.items[int(i)][0]])
        labels = np.asarray(ys, dtype=np.int64)
        onehot = optim.one_hot(labels, self.num_classes).astype(np.float32)
        return np.stack(xs), labels, onehot

    def training_batches(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Shuffled, augmented batches; order and draws depend only on (seed, epoch)."""
        order = np.random.default_rng(
            derive_seed(self.seed, "shuffle", str(epoch))).permutation(len(self.items))
        for start in range(0, len(order), self.batch_size):
            yield self._assemble(order[start:start + self.batch_size], epoch)

    def eval_batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Manifest-order batches of the original images, no augmentation."""
        indices = [i for i, item in enumerate(self.items) if item[1] is None]
        for start in range(0, len(indices), self.batch_size):
            yield self._assemble(indices[start:start + self.batch_size], None)

    def class_weights(self) -> np.ndarray:
        """Inverse-frequency weights: total / (num_classes * class_count)."""
        counts = np.bincount(self.labels, minlength=self.num_classes).astype(np.float64)
        if np.any(counts == 0):
            missing = [self.manifest.class_names[i]
                       for i in np.nonzero(counts == 0)[0]]
            raise ConfigurationError(
                f"split {self.split!r} has no samples for: {', '.join(missing)}")
        return counts.sum() / (self.num_classes * counts)


def _format_history_row(m: EpochMetrics) -> str:
    return (f"{m.epoch},{m.train_loss!r},{m.train_accuracy!r},"
            f"{m.val_loss!r},{m.val_accuracy!r},{m.wall_seconds:.3f}")


def _render_fallback_snapshot(model: "ModelHandle", config: TrainConfig) -> str:
    lines = ["[model]",
             f"backbone = {model.backbone_spec.id}",
             f"input_size = {model.backbone_spec.input_size[0]},{model.backbone_spec.input_size[1]}",
             f"trainable_scope = {model.trainable_scope}",
             "",
             "[train]"]
    for key in ("learning_rate", "batch_size", "max_epochs", "patience",
                "beta1", "beta2", "epsilon", "seed"):
        lines.append(f"{key} = {getattr(config, key)}")
    return "\n".join(lines) + "\n"


def _evaluate_split(model: "ModelHandle", pipeline: DataPipeline) -> Tuple[float, float]:
    total_loss = 0.0
    correct = 0
    count = 0
    for x, labels, onehot in pipeline.eval_batches():
        logits = model.logits(x, training=False)
        total_loss += optim.cross_entropy_from_logits(logits, onehot) * len(labels)
        correct += int(np.sum(np.argmax(logits, axis=-1) == labels))
        count += len(labels)
    return total_loss / count, correct / count


def train(model: "ModelHandle", train_pipeline: DataPipeline,
          val_pipeline: DataPipeline, config: TrainConfig, run_dir,
          config_snapshot: Optional[str] = None) -> TrainingHistory:
    """Run the full training protocol and populate `run_dir`.

    Raises NumericalError when a loss or gradient goes non-finite; the
    history written so far stays on disk.
    """
    import tensorflow as tf  # heavy import, deferred so reporting stays light

    from .model import save_checkpoint

    if config.input_size != model.backbone_spec.input_size:
        raise ConfigurationError(
            f"config input size {config.input_size} does not match model "
            f"input size {model.backbone_spec.input_size}"
        )
    for pipe, name in ((train_pipeline, "training"), (val_pipeline, "validation")):
        if pipe.input_size != model.backbone_spec.input_size:
            raise ConfigurationError(
                f"{name} pipeline input size {pipe.input_size} does not match "
                f"model input size {model.backbone_spec.input_size}"
            )
    if train_pipeline.batch_size != config.batch_size:
        raise ConfigurationError(
            f"training pipeline batch size {train_pipeline.batch_size} does not "
            f"match config batch size {config.batch_size}"
        )

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = config_snapshot if config_snapshot is not None else _render_fallback_snapshot(model, config)
    (run_dir / "config.snapshot").write_text(snapshot)
    ckpt_path = run_dir / "best.ckpt"

    handler = logging.FileHandler(run_dir / "log.txt")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    prior_level = logger.level
    logger.setLevel(logging.INFO)

    variables = model.trainable_variables
    adam = optim.AdamState.initialize(
        [np.asarray(v) for v in variables],
        beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)
    stop_state = EarlyStopState(patience=config.patience)
    metrics: List[EpochMetrics] = []
    stopped_early = False
    class_weights = None
    if config.class_weighting:
        class_weights = train_pipeline.class_weights()

    try:
        logger.info("training %s: %d train / %d val samples, batch %d, lr %g, "
                    "max %d epochs, patience %d, seed %d",
                    model.backbone_spec.id, len(train_pipeline), len(val_pipeline),
                    config.batch_size, config.learning_rate, config.max_epochs,
                    config.patience, config.seed)
        with open(run_dir / "history.csv", "w") as history_file:
            history_file.write(HISTORY_HEADER + "\n")
            history_file.flush()
            for epoch in range(1, config.max_epochs + 1):
                tick = time.perf_counter()
                loss_sum = 0.0
                correct = 0
                seen = 0
                for batch_index, (x, labels, onehot) in enumerate(
                        train_pipeline.training_batches(epoch)):
                    x_t = tf.convert_to_tensor(x)
                    y_t = tf.convert_to_tensor(onehot)
                    with tf.GradientTape() as tape:
                        logits = model.logits_tensor(x_t, training=True)
                        log_probs = logits - tf.reduce_logsumexp(logits, axis=-1,
                                                                 keepdims=True)
                        sample_losses = -tf.reduce_sum(y_t * log_probs, axis=-1)
                        if class_weights is not None:
                            w = tf.constant(class_weights[labels], dtype=sample_losses.dtype)
                            sample_losses = w * sample_losses
                        loss_t = tf.reduce_mean(sample_losses)
                    grads = tape.gradient(loss_t, variables)
                    loss_value = float(loss_t)
                    grad_arrays = [np.asarray(g) for g in grads]
                    if not math.isfinite(loss_value) or any(
                            not np.all(np.isfinite(g)) for g in grad_arrays):
                        logger.error("non-finite loss or gradient at epoch %d batch %d",
                                     epoch, batch_index + 1)
                        raise NumericalError(
                            f"non-finite loss or gradient at epoch {epoch} "
                            f"batch {batch_index + 1}"
                        )
                    params = [np.asarray(v) for v in variables]
                    new_params, adam = optim.adam_step(
                        params, grad_arrays, adam, config.learning_rate)
                    for var, value in zip(variables, new_params):
                        var.assign(value)
                    logits_np = np.asarray(logits)
                    loss_sum += loss_value * len(labels)
                    correct += int(np.sum(np.argmax(logits_np, axis=-1) == labels))
                    seen += len(labels)
                train_loss = loss_sum / seen
                train_acc = correct / seen
                val_loss, val_acc = _evaluate_split(model, val_pipeline)
                wall = time.perf_counter() - tick
                epoch_metrics = EpochMetrics(epoch, train_loss, train_acc,
                                             val_loss, val_acc, wall)
                metrics.append(epoch_metrics)
                history_file.write(_format_history_row(epoch_metrics) + "\n")
                history_file.flush()
                logger.info("epoch %d/%d train_loss=%.4f train_acc=%.4f "
                            "val_loss=%.4f val_acc=%.4f wall=%.1fs",
                            epoch, config.max_epochs, train_loss, train_acc,
                            val_loss, val_acc, wall)
                stop_state, improved, should_stop = update_early_stop(
                    stop_state, val_loss)
                if improved:
                    save_checkpoint(model, ckpt_path, extra_meta={
                        "epoch": epoch,
                        "val_loss": val_loss,
                        "val_accuracy": val_acc,
                        "seed": config.seed,
                    })
                    logger.info("val_loss improved to %.4f, checkpoint written", val_loss)
                if should_stop:
                    stopped_early = True
                    logger.info("early stop at epoch %d: no improvement for %d epochs "
                                "(best epoch %d, val_loss %.4f)",
                                epoch, config.patience, stop_state.best_epoch,
                                stop_state.best_loss)
                    break
        _write_sidecar(ckpt_path, model.backbone_spec.id, stop_state,
                       len(metrics), stopped_early, config.seed)
    finally:
        logger.removeHandler(handler)
        handler.close()
        logger.setLevel(prior_level)

    return TrainingHistory(
        model_id=model.backbone_spec.id,
        epochs=tuple(metrics),
        best_epoch=stop_state.best_epoch,
        stopped_early=stopped_early,
        checkpoint_path=str(ckpt_path) if ckpt_path.exists() else None,
    )


def _write_sidecar(ckpt_path: Path, model_id: str, stop_state: EarlyStopState,
                   epochs_trained: int, stopped_early: bool, seed: int) -> None:
    if not ckpt_path.exists():
        return
    lines = [
        f"model = {model_id}",
        f"best_epoch = {stop_state.best_epoch}",
        f"best_val_loss = {stop_state.best_loss!r}",
        f"epochs_trained = {epochs_trained}",
        f"stopped_early = {stopped_early}",
        f"seed = {seed}",
    ]
    ckpt_path.with_name(ckpt_path.name + ".meta").write_text("\n".join(lines) + "\n")
