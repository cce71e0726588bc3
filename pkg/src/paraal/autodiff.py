"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Everything upstream (encoders, decoders, losses) is built from the ops in
this module. Design points:

* A ``Tensor`` wraps a numpy float64 array plus a same-shaped gradient
  buffer. Gradients accumulate additively until an optimizer step zeroes
  them.
* Ops record onto the innermost active ``ComputeGraph`` (a linear tape).
  Insertion order is a topological order by construction, so the backward
  pass is a single reverse sweep. Outside any graph, ops just compute
  values (inference mode).
* All randomness flows through numpy ``Generator(PCG64(seed))`` streams.
  Seeds are derived with BLAKE2b over the argument tuple (``derive_seed``),
  which is platform independent, so identical seeds replay identical runs
  anywhere.
* Checkpoint layout (also described in the README): 8-byte magic
  ``b"PARAALV1"``, little-endian uint32 header length, UTF-8 JSON header
  ``{"params": [{"name": ..., "shape": [...]}, ...]}``, then each
  parameter's values as little-endian float64 in header order, C order.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

Array = np.ndarray

CHECKPOINT_MAGIC = b"PARAALV1"


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def derive_seed(*parts) -> int:
    """Fold an arbitrary tuple of ints/strings into a stable 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single PRNG used throughout the package."""
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# Tensor and graph
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array with a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> Array:
        """Flat float64 view of the values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


_GRAPH_STACK: list["ComputeGraph"] = []


class ComputeGraph:
    """Linear tape of op nodes; insertion order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "ComputeGraph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPH_STACK.pop()


def active_graph() -> ComputeGraph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def backward(graph: ComputeGraph, loss: Tensor) -> None:
    """Reverse sweep; accumulates d(loss)/d(tensor) into every .grad."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if graph.consumed:
        raise ValueError("graph already consumed by a backward pass")
    graph.consumed = True
    loss.grad[...] = 1.0
    for node in reversed(graph.nodes):
        node.backward_fn()


def _record(op: str, inputs: tuple[Tensor, ...], out: Tensor, backward_fn) -> Tensor:
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite output from op '{op}'")
    graph = active_graph()
    if graph is not None:
        if graph.consumed:
            raise ValueError(f"cannot record op '{op}' on a consumed graph")
        graph.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also allows adding a 1-D bias to each row of a 2-D input."""
    bias_broadcast = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if a.shape != b.shape and not bias_broadcast:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def back():
        a.grad += out.grad
        if bias_broadcast:
            b.grad += out.grad.sum(axis=0)
        else:
            b.grad += out.grad

    return _record("add", (a, b), out, back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data)

    def back():
        a.grad += out.grad
        b.grad -= out.grad

    return _record("sub", (a, b), out, back)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"multiply: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)

    def back():
        a.grad += b.data * out.grad
        b.grad += a.data * out.grad

    return _record("multiply", (a, b), out, back)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (recorded; the constant gets no grad)."""
    c = float(c)
    out = Tensor(x.data * c)

    def back():
        x.grad += c * out.grad

    return _record("scale", (x,), out, back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(M,N)@(N,) -> (M,) or (M,N)@(N,P) -> (M,P)."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    if b.data.ndim == 1:

        def back():
            a.grad += np.outer(out.grad, b.data)
            b.grad += a.data.T @ out.grad

    else:

        def back():
            a.grad += out.grad @ b.data.T
            b.grad += a.data.T @ out.grad

    return _record("matmul", (a, b), out, back)


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))

    def back():
        x.grad += (1.0 - out.data * out.data) * out.grad

    return _record("tanh", (x,), out, back)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def back():
        x.grad += (x.data > 0.0) * out.grad

    return _record("relu", (x,), out, back)


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; callers guard inputs away from zero."""
    out = Tensor(np.sqrt(x.data))

    def back():
        x.grad += 0.5 / out.data * out.grad

    return _record("sqrt", (x,), out, back)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out = Tensor(np.log(x.data))

    def back():
        x.grad += out.grad / x.data

    return _record("log", (x,), out, back)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat: empty input list")
    if axis not in (0, 1):
        raise ValueError(f"concat: unsupported axis {axis}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back():
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if axis == 0:
                part.grad += out.grad[lo:hi]
            else:
                part.grad += out.grad[:, lo:hi]

    return _record("concat", tuple(parts), out, back)


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack T same-shaped 1-D tensors into a (T, N) tensor."""
    if not rows:
        raise ValueError("stack_rows: empty input list")
    out = Tensor(np.stack([r.data for r in rows], axis=0))

    def back():
        for i, row in enumerate(rows):
            row.grad += out.grad[i]

    return _record("stack_rows", tuple(rows), out, back)


def roll_rows(x: Tensor, shift: int) -> Tensor:
    """Cyclically shift rows; pairs each row with a neighbor for in-batch negatives."""
    if x.data.ndim != 2:
        raise ValueError(f"roll_rows: input must be 2-D, got shape {x.shape}")
    out = Tensor(np.roll(x.data, shift, axis=0))

    def back():
        x.grad += np.roll(out.grad, -shift, axis=0)

    return _record("roll_rows", (x,), out, back)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm.

    Keeps embeddings on a bounded shell so hinge losses cannot be satisfied
    by inflating the whole space.
    """
    if x.data.ndim != 2:
        raise ValueError(f"normalize_rows: input must be 2-D, got shape {x.shape}")
    norms = np.maximum(np.linalg.norm(x.data, axis=1, keepdims=True), eps)
    out = Tensor(x.data / norms)

    def back():
        inner = (out.data * out.grad).sum(axis=1, keepdims=True)
        x.grad += (out.grad - out.data * inner) / norms

    return _record("normalize_rows", (x,), out, back)


def normalize_rows_values(x: Array, eps: float = 1e-12) -> Array:
    """Plain-array twin of normalize_rows."""
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)
    return x / norms


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def back():
        x.grad += out.grad

    return _record("sum", (x,), out, back)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(x.data.mean())

    def back():
        x.grad += out.grad / n

    return _record("mean", (x,), out, back)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis (max-subtraction)."""
    out = Tensor(softmax_values(x.data))

    def back():
        g = out.grad
        y = out.data
        dot = (g * y).sum(axis=-1, keepdims=True)
        x.grad += (g - dot) * y

    return _record("softmax", (x,), out, back)


def softmax_values(x: Array) -> Array:
    """Plain-array stable softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_values(x: Array) -> Array:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of a (V, E) table; indices is a 1-D int sequence."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"embedding_lookup: indices must be 1-D, got shape {idx.shape}")
    if table.data.ndim != 2:
        raise ValueError(f"embedding_lookup: table must be 2-D, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError("embedding_lookup: index out of range")
    out = Tensor(table.data[idx])

    def back():
        np.add.at(table.grad, idx, out.grad)

    return _record("embedding_lookup", (table,), out, back)


def euclidean_sq_distance(a: Tensor, b: Tensor) -> Tensor:
    """Scalar sum of squared elementwise differences."""
    if a.shape != b.shape:
        raise ValueError(f"euclidean_sq_distance: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    out = Tensor((diff * diff).sum())

    def back():
        a.grad += 2.0 * diff * out.grad
        b.grad -= 2.0 * diff * out.grad

    return _record("euclidean_sq_distance", (a, b), out, back)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax probability of targets over a (T, V) logit block.

    Positions whose target equals ignore_index are dropped from the mean.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be (T, V), got shape {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy: targets length {tgt.shape} does not match T={logits.shape[0]}"
        )
    kept = tgt != ignore_index
    n_kept = int(kept.sum())
    if n_kept == 0:
        raise ValueError("cross_entropy: all positions ignored")
    v = logits.shape[1]
    if np.any((tgt[kept] < 0) | (tgt[kept] >= v)):
        raise ValueError("cross_entropy: target index out of range")

    log_probs = log_softmax_values(logits.data)
    rows = np.nonzero(kept)[0]
    out = Tensor(-log_probs[rows, tgt[rows]].mean())

    def back():
        g = float(out.grad)
        probs = np.exp(log_probs[rows])
        probs[np.arange(n_kept), tgt[rows]] -= 1.0
        logits.grad[rows] += probs * (g / n_kept)

    return _record("cross_entropy", (logits,), out, back)


_OP_TABLE = {
    "matmul": lambda inputs: matmul(inputs[0], inputs[1]),
    "add": lambda inputs: add(inputs[0], inputs[1]),
    "multiply": lambda inputs: multiply(inputs[0], inputs[1]),
    "tanh": lambda inputs: tanh(inputs[0]),
    "relu": lambda inputs: relu(inputs[0]),
    "concat": lambda inputs: concat(list(inputs)),
    "mean": lambda inputs: reduce_mean(inputs[0]),
    "sum": lambda inputs: reduce_sum(inputs[0]),
    "softmax": lambda inputs: softmax(inputs[0]),
    "log": lambda inputs: log(inputs[0]),
    "embedding_lookup": lambda inputs: embedding_lookup(
        inputs[0], inputs[1].data.astype(np.int64)
    ),
    "euclidean_sq_distance": lambda inputs: euclidean_sq_distance(inputs[0], inputs[1]),
    "normalize_rows": lambda inputs: normalize_rows(inputs[0]),
}


def forward_op(op: str, inputs: list[Tensor]) -> Tensor:
    """Dispatch one of the named ops; anything else is a usage error."""
    try:
        fn = _OP_TABLE[op]
    except KeyError:
        raise ValueError(f"unknown op '{op}'; expected one of {sorted(_OP_TABLE)}") from None
    return fn(inputs)


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


class DropoutMask:
    """Inverted-dropout mask: entries are 0 or exactly 1/keep_probability."""

    __slots__ = ("keep_probability", "mask", "seed")

    def __init__(self, keep_probability: float, mask: Array, seed: int):
        self.keep_probability = keep_probability
        self.mask = mask
        self.seed = seed


def make_dropout_mask(seed: int, shape, keep_probability: float) -> DropoutMask:
    """Pure function of (seed, shape, keep_probability); replays exactly."""
    _check_keep(keep_probability)
    kept = make_rng(seed).random(shape) < keep_probability
    return DropoutMask(keep_probability, kept / keep_probability, seed)


def apply_dropout_mask(x: Tensor, mask: DropoutMask) -> Tensor:
    return multiply(x, Tensor(mask.mask))


def dropout_forward(
    x: Tensor,
    keep_probability: float,
    rng: np.random.Generator | None,
    training: bool,
) -> tuple[Tensor, DropoutMask]:
    """Train mode samples a fresh mask seed from rng; eval mode is the identity."""
    _check_keep(keep_probability)
    if not training:
        mask = DropoutMask(keep_probability, np.ones(x.shape), 0)
        return x, mask
    seed = int(rng.integers(0, 2**63))
    mask = make_dropout_mask(seed, x.shape, keep_probability)
    return apply_dropout_mask(x, mask), mask


def _check_keep(keep_probability: float) -> None:
    if not (0.0 < keep_probability <= 1.0):
        raise ValueError(f"keep_probability must be in (0, 1], got {keep_probability}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_step(
    params: list[Tensor],
    moments: tuple[list[Array], list[Array]],
    lr: float,
    betas: tuple[float, float],
    eps: float,
    step: int,
) -> None:
    """One bias-corrected Adam update; zeroes grads afterwards."""
    if step < 1:
        raise ValueError(f"adam step counter must be >= 1, got {step}")
    b1, b2 = betas
    first, second = moments
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for i, p in enumerate(params):
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name or i}")
        m = first[i]
        v = second[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad[...] = 0.0


class Adam:
    """Adam with the canonical defaults (betas 0.9/0.999, eps 1e-8, no decay)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, (self.first, self.second), self.lr, self.betas, self.eps, self.t)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Array]) -> None:
    entries = [{"name": name, "shape": list(arr.shape)} for name, arr in params.items()]
    header = json.dumps({"params": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, Array]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        out = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"truncated checkpoint at parameter {entry['name']!r}")
            out[entry["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        return out
