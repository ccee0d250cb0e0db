"""Reproducible training and evaluation harness for 4-class brain-MRI
classification with pretrained CNN backbones.

Importing this package is cheap; the deep-learning substrate loads only
when `model`, `train`, or `evaluate` are imported.
"""

__version__ = "0.1.0"

from .dataset import CLASS_NAMES  # noqa: F401
from .errors import MriBenchError  # noqa: F401
