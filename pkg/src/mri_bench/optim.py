"""Adam optimizer and classification losses as pure numpy functions.

The training loop owns its parameter updates through `adam_step` rather
than delegating to a framework optimizer, so the update rule is a plain
testable function: bias-corrected first/second moments, epsilon added
outside the square root. Loss helpers compute in float64 with log-sum-exp
/ clipping so they stay finite for extreme logits.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    step: int
    m: List[np.ndarray]
    v: List[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    @classmethod
    def initialize(cls, params: Sequence[np.ndarray], beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-7) -> "AdamState":
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        return cls(
            step=0,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, learning_rate: float
              ) -> Tuple[List[np.ndarray], AdamState]:
    """One Adam update. Returns new parameters and the advanced state.

    Inputs are not mutated; the returned state reuses freshly computed
    moment arrays.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"parameter/gradient/state length mismatch: "
            f"{len(params)}, {len(grads)}, {len(state.m)}"
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(
                f"shape mismatch at index {i}: param {p.shape}, grad {g.shape}, "
                f"moment {state.m[i].shape}"
            )
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_params = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m_t = b1 * m + (1.0 - b1) * g
        v_t = b2 * v + (1.0 - b2) * np.square(g)
        m_hat = m_t / (1.0 - b1 ** t)
        v_hat = v_t / (1.0 - b2 ** t)
        new_params.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m_t)
        new_v.append(v_t)
    return new_params, AdamState(step=t, m=new_m, v=new_v, beta1=b1,
                                 beta2=b2, epsilon=state.epsilon)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels out of range [0, {num_classes}): {labels.min()}..{labels.max()}"
        )
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def categorical_cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean cross-entropy from probability rows; clipped away from log(0)."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probs {p.shape}, onehot {y.shape}")
    p = np.clip(p, 1e-12, 1.0)
    return float(-np.mean(np.sum(y * np.log(p), axis=-1)))


def cross_entropy_from_logits(logits: np.ndarray, onehot: np.ndarray) -> float:
    """Mean cross-entropy straight from logits via log-sum-exp."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: logits {x.shape}, onehot {y.shape}")
    return float(-np.mean(np.sum(y * log_softmax(x), axis=-1)))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the integer label."""
    preds = np.argmax(np.asarray(logits), axis=-1)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: preds {preds.shape}, labels {labels.shape}")
    if labels.size == 0:
        raise ValueError("cannot compute accuracy of an empty batch")
    return float(np.mean(preds == labels))
