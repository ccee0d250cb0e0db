"""Registry of pretrained convolutional backbones.

Each entry records the published architecture facts the harness relies on
(final feature-map depth, minimum input size), the input normalization the
packaged weights expect, and the provenance of the canonical pretrained
weight file (URL + md5). Builders import keras lazily so that dataset-only
workflows never pay the framework import cost.

Normalization is expressed uniformly: pixels are scaled to [0, 1], channels
optionally reordered, then shifted/scaled per channel. The constants for
each entry map unit-range RGB input to exactly the tensor domain the
packaged model consumes:

* ``resnet50`` weights were trained on caffe-style input (BGR, per-channel
  mean subtraction, no std scaling).
* ``efficientnet_b1``/``efficientnet_b7`` embed their rescaling and
  ImageNet normalization inside the graph and consume raw 0..255 values,
  so the external constants map unit range back to the raw domain.
* ``efficientnet_v2_b1`` is built without its internal rescaling layer and
  consumes [-1, 1] input.
"""

import os
from dataclasses import dataclass, field
from typing import Tuple

from .errors import RegistryError, WeightFetchError

# Environment variable relocating the pretrained-weight cache.
CACHE_ENV_VAR = "MRI_BENCH_CACHE"

_CAFFE_MEAN_BGR = (103.939, 116.779, 123.68)


@dataclass(frozen=True)
class BackboneInfo:
    """Static facts about one registered backbone."""

    id: str
    feature_channels: int
    min_input: int
    channel_order: str  # "rgb" or "bgr": order the model consumes
    norm_mean: Tuple[float, float, float]  # in unit range, in channel_order
    norm_std: Tuple[float, float, float]
    weight_url: str
    weight_md5: str
    builder_kwargs: dict = field(default_factory=dict)

    def build(self, input_shape, weights: str):
        """Construct the keras feature extractor (classifier top removed).

        `weights` is "imagenet_pretrained" or "random". Download/IO
        failures and checksum mismatches are surfaced as `WeightFetchError`
        with the corresponding reason.
        """
        if weights not in ("imagenet_pretrained", "random"):
            raise RegistryError(f"unknown weights mode {weights!r}")
        cache = os.environ.get(CACHE_ENV_VAR)
        if cache:
            os.environ.setdefault("KERAS_HOME", cache)
        from keras import applications  # deferred: heavy import

        builders = {
            "resnet50": applications.ResNet50,
            "efficientnet_b1": applications.EfficientNetB1,
            "efficientnet_b7": applications.EfficientNetB7,
            "efficientnet_v2_b1": applications.EfficientNetV2B1,
        }
        kwargs = dict(
            include_top=False,
            weights="imagenet" if weights == "imagenet_pretrained" else None,
            input_shape=tuple(input_shape),
        )
        kwargs.update(self.builder_kwargs)
        try:
            return builders[self.id](**kwargs)
        except ValueError as exc:
            msg = str(exc)
            if "hash" in msg.lower() or "incomplete or corrupted" in msg.lower():
                raise WeightFetchError(
                    f"pretrained weights for {self.id} failed checksum validation: {msg}",
                    reason="checksum",
                ) from exc
            raise
        except Exception as exc:
            if kwargs["weights"] is None:
                raise
            raise WeightFetchError(
                f"could not fetch pretrained weights for {self.id} "
                f"from {self.weight_url}: {exc}",
                reason="network",
            ) from exc


REGISTRY = {
    info.id: info
    for info in [
        BackboneInfo(
            id="resnet50",
            feature_channels=2048,
            min_input=32,
            channel_order="bgr",
            norm_mean=tuple(m / 255.0 for m in _CAFFE_MEAN_BGR),
            norm_std=(1 / 255.0,) * 3,
            weight_url=(
                "https://storage.googleapis.com/tensorflow/keras-applications/"
                "resnet/resnet50_weights_tf_dim_ordering_tf_kernels_notop.h5"
            ),
            weight_md5="4d473c1dd8becc155b73f8504c6f6626",
        ),
        BackboneInfo(
            id="efficientnet_b1",
            feature_channels=1280,
            min_input=32,
            channel_order="rgb",
            norm_mean=(0.0, 0.0, 0.0),
            norm_std=(1 / 255.0,) * 3,
            weight_url=(
                "https://storage.googleapis.com/keras-applications/"
                "efficientnetb1_notop.h5"
            ),
            weight_md5="74c4e6b3e1f6a1eea24c589628592432",
        ),
        BackboneInfo(
            id="efficientnet_b7",
            feature_channels=2560,
            min_input=32,
            channel_order="rgb",
            norm_mean=(0.0, 0.0, 0.0),
            norm_std=(1 / 255.0,) * 3,
            weight_url=(
                "https://storage.googleapis.com/keras-applications/"
                "efficientnetb7_notop.h5"
            ),
            weight_md5="cbcfe4450ddf6f3ad90b1b398090fe4a",
        ),
        BackboneInfo(
            id="efficientnet_v2_b1",
            feature_channels=1280,
            min_input=32,
            channel_order="rgb",
            norm_mean=(128 / 255.0,) * 3,
            norm_std=(128 / 255.0,) * 3,
            weight_url=(
                "https://storage.googleapis.com/tensorflow/keras-applications/"
                "efficientnet_v2/efficientnetv2-b1_notop.h5"
            ),
            weight_md5="0e80663031ca32d657f9caa404b6ec37",
            builder_kwargs={"include_preprocessing": False},
        ),
    ]
}


def backbone_ids():
    return sorted(REGISTRY)


def get_backbone(backbone_id: str) -> BackboneInfo:
    try:
        return REGISTRY[backbone_id]
    except KeyError:
        raise RegistryError(
            f"unknown backbone {backbone_id!r}; registered: {', '.join(backbone_ids())}"
        ) from None
