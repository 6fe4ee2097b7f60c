"""Small feed-forward network engine on numpy.

Batches are row-major (``batch x features``) and layer weights are
``out x in``, so a layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CKPT_MAGIC = "MVFUSE-CKPT-1"

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ValueError("parameter count does not match spec")
        sizes = self.spec.layer_sizes
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ValueError(
                    f"layer {i}: got W{w.shape}, b{b.shape}; "
                    f"expected W{(sizes[i + 1], sizes[i])}, b{(sizes[i + 1],)}"
                )

    def arrays(self) -> list:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, spec: MlpSpec, arrays: Sequence[np.ndarray]) -> "MlpParams":
        arrays = list(arrays)
        return cls(spec, arrays[0::2], arrays[1::2])

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays(self.spec, [a.copy() for a in self.arrays()])

    def zeros_like(self) -> "MlpParams":
        return MlpParams.from_arrays(self.spec, [np.zeros_like(a) for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(spec: MlpSpec, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid(x):
    # split by sign so exp never overflows; keep the range open
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_LO, _SIG_HI)


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_grad(kind, z, a, grad):
    if kind == "relu":
        return grad * (z > 0)
    if kind == "tanh":
        return grad * (1.0 - a * a)
    if kind == "sigmoid":
        return grad * a * (1.0 - a)
    return grad


@dataclass
class Tape:
    """Cached activations from one forward call."""

    params_id: int
    inputs: list = field(default_factory=list)  # input of each affine layer
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


def forward(params: MlpParams, x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.in_dim:
        raise ValueError(f"expected input of shape (batch, {params.spec.in_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("network input contains non-finite values")
    tape = Tape(params_id=id(params))
    h = x
    last = params.spec.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append(h)
        z = h @ w.T + b
        kind = params.spec.output_activation if i == last else params.spec.hidden_activation
        h = _activate(kind, z)
        tape.pre.append(z)
        tape.post.append(h)
    return h, tape


def backward(params: MlpParams, tape: Tape, grad_output) -> tuple:
    """Reverse-mode pass. Returns ``(param_grads, grad_input)``."""
    if tape.params_id != id(params) or len(tape.pre) != params.spec.n_layers:
        raise ValueError("tape was not produced by a forward call on these parameters")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != tape.post[-1].shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {tape.post[-1].shape}")
    last = params.spec.n_layers - 1
    dws, dbs = [None] * (last + 1), [None] * (last + 1)
    for i in range(last, -1, -1):
        kind = params.spec.output_activation if i == last else params.spec.hidden_activation
        g = _activation_grad(kind, tape.pre[i], tape.post[i], g)
        dws[i] = g.T @ tape.inputs[i]
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return MlpParams(params.spec, dws, dbs), g


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays: Sequence[np.ndarray], **hyper) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def _as_arrays(p):
    return p.arrays() if isinstance(p, MlpParams) else list(p)


def adam_step(params, grads, state: OptimizerState):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` may be :class:`MlpParams` or matching lists
    of arrays. Inputs are left untouched; returns ``(new_params, new_state)``
    of the same kind.
    """
    p_arr, g_arr = _as_arrays(params), _as_arrays(grads)
    if len(p_arr) != len(g_arr) or len(p_arr) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(p_arr, g_arr)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arr, g_arr, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
    if isinstance(params, MlpParams):
        return MlpParams.from_arrays(params.spec, new_p), new_state
    return new_p, new_state


def gradcheck(
    spec: MlpSpec,
    loss: Callable[[np.ndarray], tuple],
    seed=0,
    x=None,
    batch: int = 4,
    h: float = 1e-5,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss(output)`` returns ``(value, d value / d output)``. Inputs are
    drawn from ``seed`` when ``x`` is not given.
    """
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng.integers(2**32))
    for b in params.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    if x is None:
        x = rng.normal(size=(batch, spec.in_dim))
    out, tape = forward(params, x)
    _, dout = loss(out)
    grads, _ = backward(params, tape, dout)
    worst = 0.0
    for p, g in zip(params.arrays(), grads.arrays()):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp = loss(forward(params, x)[0])[0]
            p[idx] = orig - h
            lm = loss(forward(params, x)[0])[0]
            p[idx] = orig
            worst = max(worst, relative_error(g[idx], (lp - lm) / (2 * h)))
    return worst


def relative_error(a, b, floor: float = 1e-8) -> float:
    return float(abs(a - b) / max(abs(a), abs(b), floor))


def write_params(fh: io.TextIOBase, params: MlpParams, name: str = "net") -> None:
    spec = params.spec
    fh.write(
        f"net {name} {spec.hidden_activation} {spec.output_activation} "
        + " ".join(str(s) for s in spec.layer_sizes)
        + "\n"
    )
    for a in params.arrays():
        fh.write(" ".join(str(d) for d in a.shape) + "\n")
        fh.write(" ".join(repr(v) for v in a.ravel().tolist()) + "\n")


def read_params(fh: io.TextIOBase) -> tuple:
    head = fh.readline().split()
    if len(head) < 5 or head[0] != "net":
        raise ValueError(f"malformed network header: {' '.join(head)!r}")
    name, hidden, output = head[1], head[2], head[3]
    spec = MlpSpec(tuple(int(s) for s in head[4:]), hidden, output)
    arrays = []
    for _ in range(2 * spec.n_layers):
        shape = tuple(int(s) for s in fh.readline().split())
        values = np.array([float(v) for v in fh.readline().split()], dtype=np.float64)
        arrays.append(values.reshape(shape))
    return name, MlpParams.from_arrays(spec, arrays)


def save_params(path, params: MlpParams) -> None:
    with open(path, "w") as fh:
        fh.write(CKPT_MAGIC + "\n")
        write_params(fh, params)


def load_params(path) -> MlpParams:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (header {magic!r})")
        return read_params(fh)[1]
