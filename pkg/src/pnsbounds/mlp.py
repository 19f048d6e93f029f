"""Minimal MLP machinery on flat parameter vectors.

The architectures in this package are small and fixed, so forward passes and
reverse-mode gradients are written by hand against a named parameter layout
instead of pulling in an autodiff framework.  All parameters of a network
live in one flat float64 vector; a :class:`ParamLayout` maps names to shaped
views into that vector.  Every routine supports an optional leading "draw"
axis on the parameters (a stack of parameter vectors evaluated on shared
inputs), which is what the epistemic sampler and batched inference use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamLayout:
    """Named, shaped views into a flat parameter vector.

    ``entries`` is a tuple of (name, shape, fan_in); fan_in drives the
    scaled-uniform initialization of both weights and biases of a layer.
    """

    entries: tuple

    def __post_init__(self):
        offsets = {}
        pos = 0
        for name, shape, _ in self.entries:
            offsets[name] = (pos, tuple(shape))
            pos += int(np.prod(shape))
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "size", pos)

    @property
    def names(self):
        return tuple(name for name, _, _ in self.entries)

    def shape(self, name) -> tuple:
        return self._offsets[name][1]

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        """A reshaped view (shared memory) of one named tensor.

        ``flat`` may carry leading draw axes; the tensor shape is appended.
        """
        start, shape = self._offsets[name]
        size = int(np.prod(shape))
        lead = flat.shape[:-1]
        return flat[..., start : start + size].reshape(*lead, *shape)

    def views(self, flat: np.ndarray) -> dict:
        return {name: self.view(flat, name) for name in self.names}

    def indices(self, names) -> np.ndarray:
        """Flat-vector indices covering the named tensors, in layout order."""
        ranges = []
        for name in names:
            start, shape = self._offsets[name]
            ranges.append(np.arange(start, start + int(np.prod(shape))))
        return np.concatenate(ranges) if ranges else np.empty(0, dtype=np.int64)

    def init(self, seed) -> np.ndarray:
        """Scaled-uniform fan-in initialization, U(-1/sqrt(fan), 1/sqrt(fan))."""
        rng = np.random.default_rng(seed)
        flat = np.empty(self.size)
        for name, shape, fan_in in self.entries:
            bound = 1.0 / np.sqrt(max(1, fan_in))
            self.view(flat, name)[...] = rng.uniform(-bound, bound, size=shape)
        return flat


def mlp_entries(prefix: str, sizes) -> tuple:
    """Layout entries for a chain of linear layers d0 -> d1 -> ... -> dL."""
    entries = []
    for i in range(len(sizes) - 1):
        fan = sizes[i]
        entries.append((f"{prefix}W{i}", (sizes[i], sizes[i + 1]), fan))
        entries.append((f"{prefix}b{i}", (sizes[i + 1],), fan))
    return tuple(entries)


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits):
    """Numerically stabilized softmax over the last axis (max subtraction)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def _as_draws(arr, tensor_ndim):
    """Ensure one leading draw axis; returns (array, had_draw_axis)."""
    if arr.ndim == tensor_ndim:
        return arr[None, ...], False
    if arr.ndim == tensor_ndim + 1:
        return arr, True
    raise ValueError(f"unexpected array rank {arr.ndim}")


def chain_forward(layout: ParamLayout, prefix: str, n_layers: int, flat, X,
                  final_linear: bool = True):
    """Forward through ``n_layers`` linear layers with ReLU between them.

    ``flat`` is (P,) or (m, P) for m parameter draws; ``X`` is (n, d) shared
    across draws or (m, n, d).  Returns (output, cache); the cache stores the
    layer inputs and pre-activations needed by :func:`chain_backward`.
    """
    flat = np.asarray(flat, dtype=float)
    params, multi = _as_draws(flat, 1)
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        a = np.broadcast_to(X[None, ...], (params.shape[0],) + X.shape)
    else:
        a = X
    inputs, preacts = [], []
    for i in range(n_layers):
        W = layout.view(params, f"{prefix}W{i}")
        b = layout.view(params, f"{prefix}b{i}")
        inputs.append(a)
        z = np.matmul(a, W) + b[:, None, :]
        last = i == n_layers - 1
        if last and final_linear:
            a = z
            preacts.append(None)
        else:
            preacts.append(z)
            a = relu(z)
    cache = {"inputs": inputs, "preacts": preacts, "multi": multi,
             "final_linear": final_linear}
    return (a if multi else a[0]), cache


def chain_backward(layout: ParamLayout, prefix: str, n_layers: int, flat,
                   cache, d_out, grads):
    """Reverse pass matching :func:`chain_forward`; accumulates into grads.

    ``grads`` is a flat array shaped like ``flat``.  Returns the gradient
    with respect to the chain input (with the draw axis iff the forward had
    one).
    """
    flat = np.asarray(flat, dtype=float)
    params, multi = _as_draws(flat, 1)
    gflat, _ = _as_draws(np.asarray(grads), 1)
    d = d_out if cache["multi"] else d_out[None, ...]
    for i in reversed(range(n_layers)):
        last = i == n_layers - 1
        if not (last and cache["final_linear"]):
            d = d * (cache["preacts"][i] > 0)
        a_in = cache["inputs"][i]
        W = layout.view(params, f"{prefix}W{i}")
        dW = layout.view(gflat, f"{prefix}W{i}")
        db = layout.view(gflat, f"{prefix}b{i}")
        dW += np.matmul(a_in.transpose(0, 2, 1), d)
        db += d.sum(axis=1)
        d = np.matmul(d, W.transpose(0, 2, 1))
    return d if cache["multi"] else d[0]


@dataclass
class AdamState:
    """First/second moment accumulators for Adam (decay 0.9/0.999, eps 1e-8)."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), t=0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


def run_training(
    params: np.ndarray,
    loss_grad_fn,
    n_rows: int,
    *,
    learning_rate: float,
    batch_size: int,
    epochs: int,
    shuffle_seed,
    epoch_callback=None,
) -> np.ndarray:
    """Seeded minibatch Adam loop shared by all the networks here.

    ``loss_grad_fn(params, row_indices)`` must return (loss, grad).  The
    final-epoch parameters are returned; there is no early stopping.  The
    shuffle stream is seeded, so identical inputs give identical outputs.
    """
    if n_rows < 1:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(shuffle_seed)
    state = AdamState.zeros(params.size)
    batch_size = min(batch_size, n_rows)
    for epoch in range(epochs):
        order = rng.permutation(n_rows)
        for start in range(0, n_rows, batch_size):
            batch = order[start : start + batch_size]
            loss, grad = loss_grad_fn(params, batch)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss!r} at epoch {epoch}, "
                    f"batch starting {start}"
                )
            adam_step(state, params, grad, learning_rate)
        if epoch_callback is not None:
            epoch_callback(epoch, params)
    return params
