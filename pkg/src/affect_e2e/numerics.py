"""Differentiable numerical kernels for the 1-D convolutional affect model.

Conventions: activations are time-major float64 arrays of shape
(frames, channels).  Every function here is pure; the only parameter
mutation in the package happens inside :func:`adam_step`, which updates
arrays in place and must be serialized by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class InputTooShortError(ValueError):
    """Raised when an input has fewer frames than an operation can consume."""

    def __init__(self, frames: int, required: int, unit: str = "frames"):
        super().__init__(
            f"input too short: {frames} {unit}, need at least {required}"
        )
        self.frames = frames
        self.required = required


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient tensor contains NaN or Inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in tensor '{name}'")
        self.tensor_name = name


@dataclass
class ConvLayerParams:
    """Strided valid-mode 1-D convolution parameters.

    weights has shape (out_channels, kernel_width, in_channels); bias has
    shape (out_channels,).
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_width(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]


@dataclass
class DenseParams:
    """Affine layer: weights (out, in), bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray


def round_to_float32(a: np.ndarray) -> np.ndarray:
    """Snap values onto the float32 grid while keeping float64 storage.

    Parameters kept on this grid survive the 32-bit checkpoint format
    bit-exactly.
    """
    return a.astype(np.float32).astype(np.float64)


def conv_output_frames(frames: int, kernel_width: int, stride: int) -> int:
    """Valid-mode output frame count: floor((F - k) / s) + 1."""
    return (frames - kernel_width) // stride + 1


def conv1d_forward(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Strided valid-mode 1-D convolution; affine map only, no nonlinearity.

    Output frame i is the affine image of the input slice
    [i*stride, i*stride + kernel_width).
    """
    frames = x.shape[0]
    k = params.kernel_width
    if frames < k:
        raise InputTooShortError(frames, k)
    # windows: (out_frames, in_channels, kernel_width)
    windows = sliding_window_view(x, k, axis=0)[:: params.stride]
    out = np.einsum("ict,otc->io", windows, params.weights, optimize=True)
    return out + params.bias


def conv1d_backward(
    x: np.ndarray, params: ConvLayerParams, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of sum(upstream * conv1d_forward(x, params)).

    Returns (grad_input, grad_weights, grad_bias) with the shapes of
    x, params.weights and params.bias.
    """
    k, s = params.kernel_width, params.stride
    out_frames = conv_output_frames(x.shape[0], k, s)
    expected = (out_frames, params.out_channels)
    if upstream.shape != expected:
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match "
            f"forward output shape {expected}"
        )
    windows = sliding_window_view(x, k, axis=0)[::s]
    grad_bias = upstream.sum(axis=0)
    grad_weights = np.einsum("io,ict->otc", upstream, windows, optimize=True)
    grad_input = np.zeros_like(x)
    # per-tap contribution: (out_frames, kernel_width, in_channels)
    per_tap = np.einsum("io,otc->itc", upstream, params.weights, optimize=True)
    last = (out_frames - 1) * s
    for t in range(k):
        grad_input[t : t + last + 1 : s] += per_tap[:, t, :]
    return grad_input, grad_weights, grad_bias


def elu(x: np.ndarray) -> np.ndarray:
    """Exponential linear unit with unit alpha: x if x > 0 else exp(x) - 1."""
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of elu: 1 if x > 0 else exp(x)."""
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def elu_grad_from_output(y: np.ndarray) -> np.ndarray:
    """Derivative of elu expressed through its output: 1 if y > 0 else y + 1.

    Valid because elu is invertible on each branch; lets the backward pass
    run from retained activations without storing pre-activations.
    """
    return np.where(y > 0, 1.0, y + 1.0)


def global_average_pool(layer_output: np.ndarray) -> np.ndarray:
    """Per-channel arithmetic mean over frames."""
    if layer_output.shape[0] < 1:
        raise ValueError("cannot pool over zero frames")
    return layer_output.mean(axis=0)


def global_average_pool_backward(grad: np.ndarray, frames: int) -> np.ndarray:
    """Spread a pooled-vector gradient uniformly back over frames."""
    return np.broadcast_to(grad / frames, (frames, grad.shape[0])).copy()


def dense(x: np.ndarray, params: DenseParams) -> np.ndarray:
    """Affine map W x + b for a vector x."""
    return params.weights @ x + params.bias


def weighted_average_fusion(
    pooled: list[np.ndarray], fusion: list[np.ndarray], bias: np.ndarray
) -> np.ndarray:
    """ELU(sum_l W_l @ pooled_l + bias): learned combination of pooled layers."""
    if len(pooled) != len(fusion):
        raise ValueError(
            f"{len(pooled)} pooled vectors but {len(fusion)} fusion matrices"
        )
    z = bias.copy()
    for p, w in zip(pooled, fusion):
        z += w @ p
    return elu(z)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax via max subtraction; output sums to 1."""
    if logits.size == 0:
        raise ValueError("softmax of empty vector")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, output in (0, 1)."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cross_entropy_loss(probs: np.ndarray, target_class: int) -> float:
    """Negative log-likelihood of the target class."""
    if not 0 <= target_class < probs.shape[0]:
        raise IndexError(f"target class {target_class} out of range")
    return float(-np.log(probs[target_class]))


def cross_entropy_grad_logits(probs: np.ndarray, target_class: int) -> np.ndarray:
    """Gradient of cross-entropy w.r.t. the logits: probs - one_hot(target)."""
    g = probs.copy()
    g[target_class] -= 1.0
    return g


def mse_loss(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared error (1/N) sum((p - g)^2) over the vector."""
    d = pred - truth
    return float(d @ d / d.shape[0])


def mse_grad(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Gradient of mse_loss w.r.t. pred: 2 (p - g) / N."""
    return 2.0 * (pred - truth) / pred.shape[0]


@dataclass
class AdamState:
    """Adam moment estimates plus hyperparameters, keyed like the params."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-4

    @classmethod
    def for_params(
        cls, params: dict[str, np.ndarray], learning_rate: float = 1e-4, **kwargs
    ) -> "AdamState":
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(m=m, v=v, learning_rate=learning_rate, **kwargs)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> None:
    """One bias-corrected Adam update; mutates params and state in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for tensor '{name}'")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        params[name] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
