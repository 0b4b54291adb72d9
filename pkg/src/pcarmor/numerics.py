"""Dense float64 array ops and the exact gradient rules the classifier is built from.

Everything here is a pure function over numpy arrays: inputs are never mutated,
outputs are freshly allocated. Gradient conventions that the rest of the package
relies on are fixed in one place: ReLU uses subgradient 0 at 0, column max-pool
breaks ties toward the smallest row index, and cross-entropy returns the mean
loss with the matching (softmax - onehot)/batch gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "matmul",
    "relu_forward",
    "relu_backward",
    "softmax_rows",
    "log_softmax_rows",
    "max_pool_cols",
    "cross_entropy_with_grad",
    "AdamState",
    "adam_update",
]


def _as_f64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with explicit conformance checking.

    Raises ValueError naming both shapes when the inner dimensions disagree,
    instead of whatever numpy would say.
    """
    a = _as_f64(a, "a")
    b = _as_f64(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def relu_forward(x) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(_as_f64(x, "x"), 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    """Route the upstream gradient through the ReLU mask of x.

    The subgradient at x == 0 is 0, so a dead unit stays exactly dead and
    repeated runs are bit-identical.
    """
    x = _as_f64(x, "x")
    upstream = _as_f64(upstream, "upstream")
    if x.shape != upstream.shape:
        raise ValueError(f"relu_backward shape mismatch: {x.shape} vs {upstream.shape}")
    return np.where(x > 0.0, upstream, 0.0)


def softmax_rows(z) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's max before exp."""
    z = _as_f64(z, "z")
    if z.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D input, got shape {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(z) -> np.ndarray:
    """Row-wise log-softmax computed from stabilized logits (no log(softmax))."""
    z = _as_f64(z, "z")
    if z.ndim != 2:
        raise ValueError(f"log_softmax_rows expects a 2-D input, got shape {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def max_pool_cols(x) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise max over the rows of x.

    Returns (pooled, argmax): pooled[j] = max_i x[i, j] and argmax[j] is the
    winning row index, ties resolved toward the smallest index so the backward
    scatter is deterministic.
    """
    x = _as_f64(x, "x")
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"max_pool_cols needs a 2-D input with >= 1 row, got shape {x.shape}")
    arg = np.argmax(x, axis=0)
    return x.max(axis=0), arg


def cross_entropy_with_grad(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus its exact gradient w.r.t. the logits.

    grad = (softmax - onehot) / batch_size, so summing per-sample contributions
    reproduces the gradient of the mean loss.
    """
    logits = _as_f64(logits, "logits")
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got shape {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(
            f"labels shape {labels.shape} does not match logits batch {logits.shape[0]}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(n)
    log_probs = log_softmax_rows(logits)
    loss = float(-log_probs[rows, labels].mean())
    grad = softmax_rows(logits)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        p = np.asarray(params, dtype=np.float64)
        return cls(m=np.zeros_like(p), v=np.zeros_like(p), step=0)


def adam_update(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step; returns (new_params, new_state).

    eps sits outside the square root: p -= lr * m_hat / (sqrt(v_hat) + eps).
    Neither the inputs nor the passed-in state are mutated.
    """
    params = _as_f64(params, "params")
    grads = _as_f64(grads, "grads")
    if params.shape != grads.shape:
        raise ValueError(f"adam_update shape mismatch: params {params.shape} vs grads {grads.shape}")
    if params.shape != state.m.shape:
        raise ValueError(f"adam_update state shape {state.m.shape} does not match params {params.shape}")
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * (grads * grads)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, step=t)
