"""Dense MLPs with hand-written reverse mode, Adam/SGD, and a seedable RNG.

Everything is float64 numpy. Networks are plain lists of weight matrices
(``d_out x d_in``) and bias vectors; inputs are row batches ``(n, d_in)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")

_MASK64 = (1 << 64) - 1


class NumericError(ValueError):
    """Shape mismatch or non-finite value in a numeric routine."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    raise NumericError(f"unknown activation {name!r}")


def activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z`` (output ``a``)."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(z.dtype)  # relu'(0) := 0
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    raise NumericError(f"unknown activation {name!r}")


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise NumericError("an MLP needs >= 1 layer and one bias per weight")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise NumericError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise NumericError(f"layer {i}: input dim {w.shape[1]} != previous output dim")
        if self.hidden_activation not in ("relu", "sigmoid", "tanh"):
            raise NumericError(f"bad hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("identity", "sigmoid", "tanh"):
            raise NumericError(f"bad output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        """New params of the same architecture holding the values of ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise NumericError(f"flat vector has shape {vec.shape}, expected ({self.n_params},)")
        ws, bs, off = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[off:off + w.size].reshape(w.shape).copy())
            off += w.size
            bs.append(vec[off:off + b.size].copy())
            off += b.size
        return MlpParams(ws, bs, self.hidden_activation, self.output_activation)


@dataclass
class MlpGrad:
    """Gradient shaped like an :class:`MlpParams` (optionally with a leading batch axis)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "MlpGrad":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def batch_flat(self) -> np.ndarray:
        """``(n, P)`` matrix for a per-sample gradient (leading batch axis)."""
        n = self.weights[0].shape[0]
        return np.concatenate([a.reshape(n, -1) for a in self.arrays()], axis=1)

    def scaled(self, c: float) -> "MlpGrad":
        return MlpGrad([c * w for w in self.weights], [c * b for b in self.biases])

    def __add__(self, other: "MlpGrad") -> "MlpGrad":
        return MlpGrad(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def sample(self, i: int) -> "MlpGrad":
        return MlpGrad([w[i] for w in self.weights], [b[i] for b in self.biases])


@dataclass
class MlpCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer
    post: list[np.ndarray]  # activation output of each layer
    squeeze: bool = False


def init_mlp(
    dims: Sequence[int],
    rng: "Rng",
    hidden_activation: str = "relu",
    output_activation: str = "identity",
    scale: float | None = None,
) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) weights (or +-scale if given), zero biases."""
    if len(dims) < 2:
        raise NumericError("need at least input and output dims")
    ws, bs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = scale if scale is not None else 1.0 / np.sqrt(d_in)
        ws.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
        bs.append(np.zeros(d_out))
    return MlpParams(ws, bs, hidden_activation, output_activation)


def mlp_forward(params: MlpParams, inputs: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Forward pass for one vector ``(d_in,)`` or a row batch ``(n, d_in)``."""
    x = np.asarray(inputs, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise NumericError(f"input shape {np.shape(inputs)} incompatible with input dim {params.weights[0].shape[1]}")
    cache = MlpCache([], [], [], squeeze)
    last = len(params.weights) - 1
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        act = params.output_activation if i == last else params.hidden_activation
        a = activate(act, z)
        cache.inputs.append(h)
        cache.pre.append(z)
        cache.post.append(a)
        h = a
    return (h[0] if squeeze else h), cache


def mlp_backward(
    params: MlpParams,
    cache: MlpCache,
    output_grad: np.ndarray,
    per_sample: bool = False,
) -> tuple[MlpGrad, np.ndarray]:
    """Reverse pass.

    ``output_grad`` holds dL/d(output) per row. Parameter gradients are summed
    over rows unless ``per_sample`` is set, in which case each weight/bias
    gradient carries a leading batch axis.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise NumericError(f"output grad shape {np.shape(output_grad)} != output shape {cache.post[-1].shape}")
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in reversed(range(n_layers)):
        act = params.output_activation if i == n_layers - 1 else params.hidden_activation
        dz = g * activation_grad(act, cache.pre[i], cache.post[i])
        if per_sample:
            gw[i] = dz[:, :, None] * cache.inputs[i][:, None, :]
            gb[i] = dz.copy()
        else:
            gw[i] = dz.T @ cache.inputs[i]
            gb[i] = dz.sum(axis=0)
        g = dz @ params.weights[i]
    return MlpGrad(gw, gb), (g[0] if cache.squeeze else g)


def per_sample_grads(
    params: MlpParams,
    inputs: np.ndarray,
    loss_grad_fn: Callable[[np.ndarray], np.ndarray],
) -> list[MlpGrad]:
    """Gradient of each sample's own loss.

    ``loss_grad_fn`` maps the ``(n, d_out)`` network output to dL_i/d(output_i).
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[0] == 0:
        raise NumericError("per_sample_grads needs a nonempty batch")
    out, cache = mlp_forward(params, x)
    grads, _ = mlp_backward(params, cache, loss_grad_fn(out), per_sample=True)
    return [grads.sample(i) for i in range(x.shape[0])]


def _check_finite(arrays: Sequence[np.ndarray], what: str) -> None:
    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite {what} in array {i} (shape {a.shape})")


def _check_shapes(params: MlpParams, grad: MlpGrad) -> None:
    for p, g in zip(params.arrays(), grad.arrays()):
        if p.shape != g.shape:
            raise NumericError(f"gradient shape {g.shape} != parameter shape {p.shape}")


def sgd_step(params: MlpParams, grad: MlpGrad, lr: float) -> MlpParams:
    _check_shapes(params, grad)
    _check_finite(grad.arrays(), "gradient")
    return MlpParams(
        [w - lr * g for w, g in zip(params.weights, grad.weights)],
        [b - lr * g for b, g in zip(params.biases, grad.biases)],
        params.hidden_activation,
        params.output_activation,
    )


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()])


def adam_step(params: MlpParams, grad: MlpGrad, state: AdamState, lr: float) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    _check_shapes(params, grad)
    _check_finite(grad.arrays(), "gradient")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_arrays, ms, vs = [], [], []
    for p, g, m, v in zip(params.arrays(), grad.arrays(), state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_arrays.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        ms.append(m)
        vs.append(v)
    new = MlpParams(new_arrays[0::2], new_arrays[1::2], params.hidden_activation, params.output_activation)
    return new, AdamState(ms, vs, t, b1, b2, state.eps)


def polyak(target: MlpParams, live: MlpParams, tau: float) -> MlpParams:
    return MlpParams(
        [(1.0 - tau) * t + tau * w for t, w in zip(target.weights, live.weights)],
        [(1.0 - tau) * t + tau * b for t, b in zip(target.biases, live.biases)],
        target.hidden_activation,
        target.output_activation,
    )


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


@dataclass
class Rng:
    """PCG64 stream whose 128-bit state and increment come from SplitMix64(seed).

    ``split()`` derives a child seed from a separate SplitMix64 counter, so a
    child never shares state with its parent or siblings.
    """

    seed: int
    _split_state: int = field(init=False, repr=False)
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        s = self.seed & _MASK64
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        self._split_state = s
        bg = np.random.PCG64()
        bg.state = {
            "bit_generator": "PCG64",
            "state": {"state": (words[0] << 64) | words[1], "inc": ((words[2] << 64) | words[3]) | 1},
            "has_uint32": 0,
            "uinteger": 0,
        }
        self.gen = np.random.Generator(bg)

    def split(self) -> "Rng":
        self._split_state, child_seed = splitmix64(self._split_state)
        return Rng(child_seed)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size=size)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self.gen.integers(0, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)
