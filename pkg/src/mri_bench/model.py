"""Model assembly: pretrained backbone plus a compact dense classification head.

The head is rebuilt from explicit specs rather than deserialized, so a
checkpoint is just the flat list of weight arrays plus the specs needed to
reconstruct the architecture. All stochastic pieces (initializers, dropout)
carry seeds derived from one base seed, which keeps rebuilds reproducible
across processes.

This module imports the deep-learning stack at module load; callers that
only need manifests or configs should not import it.
"""

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import keras
import tensorflow as tf
from keras import ops

from . import optim
from .backbones import get_backbone
from .errors import CheckpointIncompatibleError
from .seeding import derive_seed

POOLING_MODES = ("adaptive_4x4", "kernel_2x2")
TRAINABLE_SCOPES = ("all", "head_only")
WEIGHT_MODES = ("imagenet_pretrained", "random")

_CHECKPOINT_FORMAT = 1


def _keras_seed(base_seed: int, *roles: str) -> int:
    # keras seed arguments are happiest in int32 range
    return derive_seed(base_seed, *roles) % (2 ** 31 - 1)


@dataclass(frozen=True)
class HeadSpec:
    """Classification head: pool, flatten, dense stack with dropout, logits."""

    pooling: str = "adaptive_4x4"
    pooled_spatial: Tuple[int, int] = (4, 4)  # target grid for adaptive pooling
    dense_widths: Tuple[int, ...] = (1024, 1024)
    dropout_rate: float = 0.5
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "pooled_spatial", tuple(int(v) for v in self.pooled_spatial))
        object.__setattr__(self, "dense_widths", tuple(int(v) for v in self.dense_widths))
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if any(v < 1 for v in self.pooled_spatial) or len(self.pooled_spatial) != 2:
            raise ValueError(f"pooled_spatial must be two positive ints, got {self.pooled_spatial}")
        if not self.dense_widths or any(w < 1 for w in self.dense_widths):
            raise ValueError(f"dense_widths must be positive, got {self.dense_widths}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")


@dataclass(frozen=True)
class BackboneSpec:
    """Which backbone to instantiate, at what input size, with which weights."""

    id: str
    input_size: Tuple[int, int] = (512, 512)
    weights: str = "imagenet_pretrained"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        info = get_backbone(self.id)  # raises RegistryError for unknown ids
        if len(self.input_size) != 2 or min(self.input_size) < info.min_input:
            raise ValueError(
                f"input_size {self.input_size} below minimum {info.min_input} for {self.id}"
            )
        if self.weights not in WEIGHT_MODES:
            raise ValueError(f"weights must be one of {WEIGHT_MODES}, got {self.weights!r}")

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.input_size[0], self.input_size[1], 3)

    @property
    def feature_channels(self) -> int:
        return get_backbone(self.id).feature_channels


@dataclass(frozen=True)
class LayerPlan:
    """One head layer: its name, per-sample output shape, parameter count."""

    name: str
    output_shape: Tuple[int, ...]
    params: int


def _adaptive_bins(size: int, bins: int) -> List[Tuple[int, int]]:
    # bin i covers [floor(i*size/bins), ceil((i+1)*size/bins))
    return [
        (math.floor(i * size / bins), math.ceil((i + 1) * size / bins))
        for i in range(bins)
    ]


class AdaptiveAveragePooling2D(keras.layers.Layer):
    """Average pooling to a fixed output grid regardless of input size.

    Bin i along an axis of length n covers [floor(i*n/k), ceil((i+1)*n/k)),
    so bins tile the input exactly and overlap only when n is not a
    multiple of k.
    """

    def __init__(self, output_size: Tuple[int, int], **kwargs):
        super().__init__(**kwargs)
        self.output_size = (int(output_size[0]), int(output_size[1]))
        if min(self.output_size) < 1:
            raise ValueError(f"output_size must be positive, got {output_size}")

    def build(self, input_shape):
        if input_shape[1] is None or input_shape[2] is None:
            raise ValueError("adaptive pooling requires static spatial dimensions")
        self._bins_h = _adaptive_bins(int(input_shape[1]), self.output_size[0])
        self._bins_w = _adaptive_bins(int(input_shape[2]), self.output_size[1])

    def call(self, x):
        rows = []
        for hs, he in self._bins_h:
            cols = [
                ops.mean(x[:, hs:he, ws:we, :], axis=(1, 2))
                for ws, we in self._bins_w
            ]
            rows.append(ops.stack(cols, axis=1))
        return ops.stack(rows, axis=1)

    def compute_output_shape(self, input_shape):
        return (input_shape[0], self.output_size[0], self.output_size[1], input_shape[3])

    def get_config(self):
        config = super().get_config()
        config["output_size"] = self.output_size
        return config


def _pooled_dims(feature_shape: Tuple[int, int, int], spec: HeadSpec) -> Tuple[int, int]:
    h, w, _ = feature_shape
    if spec.pooling == "adaptive_4x4":
        return spec.pooled_spatial
    if h < 2 or w < 2:
        raise ValueError(f"kernel_2x2 pooling needs spatial dims >= 2, got {h}x{w}")
    return (h // 2, w // 2)


def _plan_for_shape(feature_shape: Tuple[int, int, int], spec: HeadSpec) -> List[LayerPlan]:
    h, w, c = (int(v) for v in feature_shape)
    ph, pw = _pooled_dims((h, w, c), spec)
    plan = [
        LayerPlan("head_pool", (ph, pw, c), 0),
        LayerPlan("head_flatten", (ph * pw * c,), 0),
    ]
    fan_in = ph * pw * c
    for i, width in enumerate(spec.dense_widths, start=1):
        plan.append(LayerPlan(f"head_dense_{i}", (width,), (fan_in + 1) * width))
        if spec.dropout_rate > 0.0:
            plan.append(LayerPlan(f"head_dropout_{i}", (width,), 0))
        fan_in = width
    plan.append(LayerPlan("head_output", (spec.num_classes,), (fan_in + 1) * spec.num_classes))
    return plan


def build_head(feature_channels: int, spec: Optional[HeadSpec] = None,
               feature_hw: Optional[Tuple[int, int]] = None) -> List[LayerPlan]:
    """Layer-by-layer head description: names, per-sample shapes, parameters.

    With adaptive pooling the plan depends only on `feature_channels`;
    `feature_hw` (spatial dims of the incoming feature map) is required for
    kernel_2x2 pooling, where the pooled grid depends on the input size.
    The final dense layer is paired with softmax at inference.
    """
    if feature_channels < 1:
        raise ValueError(f"feature_channels must be positive, got {feature_channels}")
    spec = spec or HeadSpec()
    if feature_hw is None:
        if spec.pooling == "kernel_2x2":
            raise ValueError("kernel_2x2 pooling needs feature_hw to size its output")
        feature_hw = spec.pooled_spatial
    return _plan_for_shape((feature_hw[0], feature_hw[1], feature_channels), spec)


def head_parameter_count(feature_channels: int, spec: Optional[HeadSpec] = None,
                         feature_hw: Optional[Tuple[int, int]] = None) -> int:
    return sum(row.params for row in build_head(feature_channels, spec, feature_hw))


def build_head_model(feature_shape: Tuple[int, int, int], spec: HeadSpec,
                     seed: int = 0, dtype: str = "float32") -> keras.Model:
    """Functional head model mapping feature maps to class logits.

    Dense kernels draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with seeds
    derived from `seed`; biases start at zero. The final layer emits
    logits; callers apply softmax when probabilities are needed.
    """
    h, w, c = (int(v) for v in feature_shape)
    inputs = keras.Input(shape=(h, w, c), dtype=dtype, name="head_features")
    if spec.pooling == "adaptive_4x4":
        pool = AdaptiveAveragePooling2D(spec.pooled_spatial, name="head_pool", dtype=dtype)
    else:
        _pooled_dims((h, w, c), spec)  # validates spatial dims
        pool = keras.layers.AveragePooling2D(pool_size=2, strides=2,
                                             name="head_pool", dtype=dtype)
    x = pool(inputs)
    x = keras.layers.Flatten(name="head_flatten", dtype=dtype)(x)
    ph, pw = _pooled_dims((h, w, c), spec)
    fan_in = ph * pw * c
    for i, width in enumerate(spec.dense_widths, start=1):
        limit = 1.0 / math.sqrt(fan_in)
        x = keras.layers.Dense(
            width,
            activation="relu",
            kernel_initializer=keras.initializers.RandomUniform(
                -limit, limit, seed=_keras_seed(seed, "init", f"dense_{i}")),
            bias_initializer="zeros",
            name=f"head_dense_{i}",
            dtype=dtype,
        )(x)
        if spec.dropout_rate > 0.0:
            x = keras.layers.Dropout(
                spec.dropout_rate,
                seed=_keras_seed(seed, "dropout", str(i)),
                name=f"head_dropout_{i}",
                dtype=dtype,
            )(x)
        fan_in = width
    limit = 1.0 / math.sqrt(fan_in)
    logits = keras.layers.Dense(
        spec.num_classes,
        kernel_initializer=keras.initializers.RandomUniform(
            -limit, limit, seed=_keras_seed(seed, "init", "output")),
        bias_initializer="zeros",
        name="head_output",
        dtype=dtype,
    )(x)
    return keras.Model(inputs, logits, name="head")


@dataclass
class ModelHandle:
    """A built backbone/head pair plus the specs that produced it."""

    backbone_spec: BackboneSpec
    head_spec: HeadSpec
    trainable_scope: str
    backbone: keras.Model
    head: keras.Model

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.backbone.outputs[0].shape[1:])

    @property
    def parameter_count(self) -> int:
        return int(sum(int(np.prod(w.shape)) for w in self.all_variables))

    def logits_tensor(self, x, training: bool = False):
        backbone_training = training and self.trainable_scope == "all"
        feats = self.backbone(x, training=backbone_training)
        return self.head(feats, training=training)

    def logits(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        return np.asarray(self.logits_tensor(tf.convert_to_tensor(x), training=training))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Softmax class probabilities; rows sum to 1."""
        return optim.softmax(self.logits(x, training=False))

    @property
    def trainable_variables(self):
        if self.trainable_scope == "head_only":
            return list(self.head.trainable_weights)
        return list(self.backbone.trainable_weights) + list(self.head.trainable_weights)

    @property
    def all_variables(self):
        return list(self.backbone.weights) + list(self.head.weights)


def count_parameters(handle: ModelHandle, scope: str = "all") -> int:
    if scope == "all":
        weights = handle.all_variables
    elif scope == "trainable":
        weights = handle.trainable_variables
    elif scope == "head":
        weights = list(handle.head.weights)
    else:
        raise ValueError(f"scope must be all, trainable, or head, got {scope!r}")
    return int(sum(int(np.prod(w.shape)) for w in weights))


def build_model(backbone_spec: BackboneSpec, head_spec: Optional[HeadSpec] = None,
                trainable_scope: str = "all", seed: int = 0,
                load_pretrained: bool = True) -> ModelHandle:
    """Instantiate backbone and head.

    `load_pretrained=False` skips the pretrained-weight fetch even when the
    spec says imagenet_pretrained; checkpoint loading uses this because the
    saved arrays overwrite every variable anyway.
    """
    if trainable_scope not in TRAINABLE_SCOPES:
        raise ValueError(f"trainable_scope must be one of {TRAINABLE_SCOPES}, got {trainable_scope!r}")
    head_spec = head_spec or HeadSpec()
    info = get_backbone(backbone_spec.id)
    # Pin the global generators so random backbone init reproduces across
    # processes; explicit layer seeds below are independent of this.
    keras.utils.set_random_seed(_keras_seed(seed, "backbone_init"))
    weights = backbone_spec.weights if load_pretrained else "random"
    backbone = info.build(backbone_spec.input_shape, weights)
    if backbone_spec.weights == "random":
        # Freshly initialized normalization statistics adapt far too slowly
        # at the stock momentum for short runs, leaving inference-mode
        # forward passes miscalibrated. 0.9 tracks the live activation
        # distribution; training-mode computation is unaffected.
        for layer in backbone.layers:
            if isinstance(layer, keras.layers.BatchNormalization):
                layer.momentum = 0.9
    if trainable_scope == "head_only":
        backbone.trainable = False
    feature_shape = tuple(int(d) for d in backbone.outputs[0].shape[1:])
    if feature_shape[2] != info.feature_channels:
        raise CheckpointIncompatibleError(
            f"{backbone_spec.id} produced {feature_shape[2]} feature channels, "
            f"registry says {info.feature_channels}"
        )
    head = build_head_model(feature_shape, head_spec, seed=seed)
    return ModelHandle(
        backbone_spec=backbone_spec,
        head_spec=head_spec,
        trainable_scope=trainable_scope,
        backbone=backbone,
        head=head,
    )


def _weight_key(i: int) -> str:
    return f"w{i:05d}"


def save_checkpoint(handle: ModelHandle, path, extra_meta: Optional[dict] = None) -> None:
    """Write all weights plus reconstruction metadata, atomically."""
    path = Path(path)
    weights = handle.all_variables
    meta = {
        "format_version": _CHECKPOINT_FORMAT,
        "backbone": asdict(handle.backbone_spec),
        "head": asdict(handle.head_spec),
        "trainable_scope": handle.trainable_scope,
        "variable_paths": [getattr(w, "path", w.name) for w in weights],
        "extra": extra_meta or {},
    }
    arrays = {_weight_key(i): np.asarray(w) for i, w in enumerate(weights)}
    tmp = path.with_name(path.name + ".tmp")
    try:
        # savez is handed an open file object so the final name is exactly `path`
        with open(tmp, "wb") as f:
            np.savez(f, __meta__=np.asarray(json.dumps(meta)), **arrays)
        os.replace(tmp, path)
    except BaseException:
        # a failed write must not clobber the previous good checkpoint
        tmp.unlink(missing_ok=True)
        raise


def read_checkpoint_meta(path) -> dict:
    with np.load(Path(path), allow_pickle=False) as archive:
        return json.loads(str(archive["__meta__"]))


def _require_match(kind: str, field: str, saved, expected) -> None:
    if saved != expected:
        raise CheckpointIncompatibleError(
            f"checkpoint {kind} {field} is {saved!r}, caller expects {expected!r}"
        )


def load_checkpoint(path, backbone_spec: Optional[BackboneSpec] = None,
                    head_spec: Optional[HeadSpec] = None) -> ModelHandle:
    """Rebuild the model a checkpoint describes and restore its weights.

    Optional expected specs are compared against the stored ones; any
    difference raises an incompatibility error naming the field.
    """
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointIncompatibleError(f"{path} is not a readable checkpoint: {exc}") from exc
    with archive:
        meta = json.loads(str(archive["__meta__"]))
        backbone_meta = dict(meta["backbone"])
        backbone_meta["input_size"] = tuple(backbone_meta["input_size"])
        head_meta = dict(meta["head"])
        head_meta["pooled_spatial"] = tuple(head_meta["pooled_spatial"])
        head_meta["dense_widths"] = tuple(head_meta["dense_widths"])
        saved_backbone = BackboneSpec(**backbone_meta)
        saved_head = HeadSpec(**head_meta)
        if backbone_spec is not None:
            _require_match("backbone", "id", saved_backbone.id, backbone_spec.id)
            _require_match("backbone", "input_size", saved_backbone.input_size,
                           backbone_spec.input_size)
        if head_spec is not None:
            for field_name in ("pooling", "pooled_spatial", "dense_widths",
                               "dropout_rate", "num_classes"):
                _require_match("head", field_name, getattr(saved_head, field_name),
                               getattr(head_spec, field_name))
        handle = build_model(
            saved_backbone,
            saved_head,
            trainable_scope=meta["trainable_scope"],
            load_pretrained=False,
        )
        weights = handle.all_variables
        paths = meta["variable_paths"]
        if len(weights) != len(paths):
            raise CheckpointIncompatibleError(
                f"checkpoint stores {len(paths)} variables, rebuilt model has {len(weights)}"
            )
        for i, w in enumerate(weights):
            arr = archive[_weight_key(i)]
            if tuple(arr.shape) != tuple(w.shape):
                raise CheckpointIncompatibleError(
                    f"variable {paths[i]}: checkpoint shape {tuple(arr.shape)} "
                    f"does not match model shape {tuple(w.shape)}"
                )
            w.assign(arr)
    return handle


@dataclass(frozen=True)
class GradientCheckResult:
    max_rel_error: float
    coordinates_checked: int
    variables_checked: int


def gradient_check(feature_shape: Tuple[int, int, int] = (4, 4, 12),
                   head_spec: Optional[HeadSpec] = None,
                   batch_size: int = 4, samples_per_variable: int = 3,
                   epsilon: float = 1e-5, seed: int = 0) -> GradientCheckResult:
    """Compare analytic head gradients against central finite differences.

    Runs a small head in float64 (float32 cannot resolve the target
    tolerance) with dropout inactive, samples coordinates from every
    trainable variable, and reports the worst relative error.
    """
    spec = head_spec or HeadSpec(pooled_spatial=(2, 2), dense_widths=(24, 16),
                                 dropout_rate=0.0, num_classes=4)
    head = build_head_model(feature_shape, spec, seed=seed, dtype="float64")
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    x = tf.constant(rng.normal(size=(batch_size,) + tuple(feature_shape)), tf.float64)
    labels = rng.integers(0, spec.num_classes, size=batch_size)
    y = tf.constant(optim.one_hot(labels, spec.num_classes), tf.float64)

    def loss_value():
        logits = head(x, training=False)
        log_probs = logits - tf.reduce_logsumexp(logits, axis=-1, keepdims=True)
        return -tf.reduce_mean(tf.reduce_sum(y * log_probs, axis=-1))

    with tf.GradientTape() as tape:
        loss = loss_value()
    grads = tape.gradient(loss, head.trainable_weights)

    max_rel = 0.0
    coords = 0
    for var, grad in zip(head.trainable_weights, grads):
        base = np.asarray(var).copy()
        flat_grad = np.asarray(grad).ravel()
        n = min(samples_per_variable, base.size)
        for idx in rng.choice(base.size, size=n, replace=False):
            for sign in (+1.0, -1.0):
                pert = base.ravel().copy()
                pert[idx] += sign * epsilon
                var.assign(pert.reshape(base.shape))
                if sign > 0:
                    loss_plus = float(loss_value())
                else:
                    loss_minus = float(loss_value())
            var.assign(base)
            fd = (loss_plus - loss_minus) / (2.0 * epsilon)
            analytic = float(flat_grad[idx])
            denom = max(abs(fd), abs(analytic), 1e-8)
            max_rel = max(max_rel, abs(fd - analytic) / denom)
            coords += 1
    return GradientCheckResult(max_rel_error=max_rel, coordinates_checked=coords,
                               variables_checked=len(head.trainable_weights))
