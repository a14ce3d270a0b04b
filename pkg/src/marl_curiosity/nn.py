"""Small sequential dense networks with exact reverse-mode gradients.

Everything is float64 numpy. A network is an ordered list of layers, each an
affine map followed by one of three activations: ``relu``, ``identity`` or
``softmax`` (the latter only sensible on the last layer). Inputs may be a
single vector ``(in,)`` or a batch ``(batch, in)``; gradients of batched calls
are summed over the batch, so callers scale the output gradient themselves.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "softmax")
CHECKPOINT_MAGIC = "densenet-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


class CheckpointError(ValueError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(s: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``s``."""
    return s * (grad - (grad * s).sum(axis=-1, keepdims=True))


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class Tape:
    """Per-layer inputs and pre-activations recorded by :meth:`Network.forward`."""

    inputs: list
    pre: list
    outputs: list
    squeeze: bool


class Network:
    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer sizes do not chain: {a.n_out} -> {b.n_in}")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.n_out,):
                raise ValueError("bias shape does not match weight rows")
        self.layers = list(layers)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in checkpoint order: w0, b0, w1, b1, ..."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def copy(self) -> "Network":
        return Network([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.n_in:
            raise ValueError(f"expected input of width {self.n_in}, got shape {x.shape}")
        inputs, pre, outputs = [], [], []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight.T
            z += layer.bias
            pre.append(z)
            if layer.activation == "relu":
                h = np.maximum(z, 0.0)
            elif layer.activation == "softmax":
                h = softmax(z)
            else:
                h = z
            outputs.append(h)
        out = h[0] if squeeze else h
        return out, Tape(inputs, pre, outputs, squeeze)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self, tape: Tape, grad_out: np.ndarray, need_params: bool = True,
        input_columns: slice | None = None, need_input: bool = True,
    ) -> tuple[list[np.ndarray] | None, np.ndarray | None]:
        """Return (parameter gradients, gradient w.r.t. the input).

        ``need_params=False`` skips parameter gradients and ``input_columns``
        restricts the input gradient to a column slice; together they give the
        actor update its d(Q)/d(action) cheaply. ``need_input=False`` skips the
        input gradient altogether.
        """
        g = np.asarray(grad_out, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        if g.shape != tape.outputs[-1].shape:
            raise ValueError(f"output gradient shape {g.shape} does not match {tape.outputs[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if layer.activation == "relu":
                g = g * (tape.pre[k] > 0.0)
            elif layer.activation == "softmax":
                g = softmax_backward(tape.outputs[k], g)
            if need_params:
                grads[2 * k] = g.T @ tape.inputs[k]
                grads[2 * k + 1] = g.sum(axis=0)
            if k == 0:
                if not need_input:
                    return (grads if need_params else None), None
                w = layer.weight if input_columns is None else layer.weight[:, input_columns]
                g = g @ w
            else:
                g = g @ layer.weight
        grad_in = g[0] if tape.squeeze else g
        return (grads if need_params else None), grad_in


def init_network(
    sizes: Sequence[int],
    seed: int | np.random.Generator,
    hidden: str = "relu",
    output: str = "identity",
) -> Network:
    """Build a network with layer widths ``sizes`` (input first).

    Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    if any(int(s) < 1 for s in sizes):
        raise ValueError(f"layer sizes must be >= 1, got {sizes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        act = output if k == len(sizes) - 2 else hidden
        layers.append(Layer(w, np.zeros(n_out), act))
    return Network(layers)


def tune_allocator() -> bool:
    """Keep large temporaries on the glibc heap instead of fresh mmaps.

    Batch-sized arrays are allocated and freed thousands of times per
    episode; with the default threshold each one page-faults anew, which
    costs more than the matrix products on some VMs. No-op off glibc.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    ok = libc.mallopt(m_mmap_threshold, 256 * 1024 * 1024)
    ok &= libc.mallopt(m_trim_threshold, 512 * 1024 * 1024)
    return bool(ok)


def check_finite(arrays, what: str = "gradient") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise TrainingDivergence(f"non-finite {what}")


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


class Adam:
    """Adam with bias correction over an arbitrary list of parameter arrays.

    Updates are applied in place to the arrays handed to :meth:`step`.
    """

    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter/gradient count does not match optimizer state")
        for p, g, m in zip(params, grads, self.m):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        check_finite(grads)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def soft_update(target: Network, online: Network, tau: float) -> Network:
    """In place: every target parameter becomes (1 - tau) * t + tau * o."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if target.sizes != online.sizes:
        raise ValueError(f"shape mismatch {target.sizes} vs {online.sizes}")
    # t + tau * (o - t) keeps t bit-identical when t == o; tau == 1 copies exactly
    for t, o in zip(target.params(), online.params()):
        if tau == 1.0:
            t[...] = o
        else:
            t += tau * (o - t)
    return target


# -- checkpoints -------------------------------------------------------------
#
# A checkpoint is a text manifest followed by raw little-endian float64 data:
#
#   densenet-checkpoint 1
#   layers <L>
#   layer <k> in=<n> out=<m> activation=<name> weight_offset=<bytes> bias_offset=<bytes>
#   ...
#   end
#   <binary blob: w0 (row-major), b0, w1, b1, ...>
#
# Offsets are relative to the first byte after the "end\n" line.


def dumps_network(net: Network) -> bytes:
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", f"layers {len(net.layers)}"]
    blobs = []
    offset = 0
    for k, layer in enumerate(net.layers):
        w = np.ascontiguousarray(layer.weight, dtype="<f8")
        b = np.ascontiguousarray(layer.bias, dtype="<f8")
        lines.append(
            f"layer {k} in={layer.n_in} out={layer.n_out} activation={layer.activation} "
            f"weight_offset={offset} bias_offset={offset + w.nbytes}"
        )
        offset += w.nbytes + b.nbytes
        blobs += [w.tobytes(), b.tobytes()]
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)


def loads_network(data: bytes) -> Network:
    stream = io.BytesIO(data)
    try:
        head = stream.readline().decode("ascii").split()
        if head != [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION)]:
            raise CheckpointError(f"not a densenet checkpoint: {head}")
        n_layers = int(stream.readline().decode("ascii").split()[1])
        specs = []
        for _ in range(n_layers):
            fields = stream.readline().decode("ascii").split()
            kv = dict(f.split("=", 1) for f in fields[2:])
            specs.append(kv)
        if stream.readline().decode("ascii").strip() != "end":
            raise CheckpointError("manifest not terminated")
    except (IndexError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from exc
    blob = stream.read()
    layers = []
    for kv in specs:
        n_in, n_out = int(kv["in"]), int(kv["out"])
        w_off, b_off = int(kv["weight_offset"]), int(kv["bias_offset"])
        if b_off + 8 * n_out > len(blob) or w_off + 8 * n_in * n_out > len(blob):
            raise CheckpointError("checkpoint truncated")
        w = np.frombuffer(blob, dtype="<f8", count=n_in * n_out, offset=w_off).reshape(n_out, n_in)
        b = np.frombuffer(blob, dtype="<f8", count=n_out, offset=b_off)
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64), kv["activation"]))
    return Network(layers)


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_bytes(dumps_network(net))


def load_network(path: str | Path) -> Network:
    return loads_network(Path(path).read_bytes())
