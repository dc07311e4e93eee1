"""
Dense Tensors with Reverse-Mode Autodiff
========================================
Float64 tensors backed by numpy arrays and a thread-local tape recording
every operation whose inputs require gradients.

Features:
- Tape-based reverse mode: ``backward(loss)`` walks the tape in reverse
  topological order and consumes it
- Primitives for the transformer and every tuner: matmul, add, mul, scale,
  transpose, GELU, layer norm, embedding gather, sequence concatenation,
  column slicing, causal attention with optional key/value prefix blocks and
  masked softmax cross-entropy
- Allocator accounting (live bytes and a resettable high-water mark) used for
  peak-memory measurements during evaluation

Usage:
    from peftlab.core.numcore import Tensor, matmul, backward

    w = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = sum_all(matmul(x, w))
    backward(loss)
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from peftlab.core.errors import DataError, ShapeError, StateError

IGNORE_INDEX = -100

_GELU_C = math.sqrt(2.0 / math.pi)

_local = threading.local()


# ============================================================================
# ALLOCATOR ACCOUNTING
# ============================================================================


class AllocationStats:
    """
    Live tensor bytes and their high-water mark for one thread.

    Tensors release against the stats they were allocated on, which may be
    called from the thread that runs the finalizer.
    """

    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self._lock = threading.Lock()

    def allocate(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes = max(0, self.live_bytes - nbytes)

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes


def allocation_stats() -> AllocationStats:
    stats = getattr(_local, "alloc", None)
    if stats is None:
        stats = AllocationStats()
        _local.alloc = stats
    return stats


# ============================================================================
# TENSOR
# ============================================================================


class Tensor:
    """
    Dense float64 array with an optional gradient.

    ``data`` is a row-major numpy array; ``grad``, when present, has the same
    shape. Parameters are mutated only by the optimizer.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        copy: bool = True,
    ):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._nbytes = arr.nbytes
        self._stats = allocation_stats()
        self._stats.allocate(self._nbytes)

    def __del__(self):
        try:
            self._stats.release(self._nbytes)
        except Exception:
            pass

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"


# ============================================================================
# TAPE
# ============================================================================


@dataclass
class Node:
    """One executed operation: inputs, output and the vector-Jacobian product."""

    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of executed operations; inputs always precede outputs."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.recording = True

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    tape = get_tape()
    previous = tape.recording
    tape.recording = False
    try:
        yield
    finally:
        tape.recording = previous


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    tape = get_tape()
    needs_grad = tape.recording and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad, copy=False)
    if needs_grad:
        tape.record(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every tensor requiring gradients on the active tape.

    Gradients accumulate into existing ``grad`` arrays. The tape is consumed.

    Raises:
        ShapeError: loss is not a scalar
        StateError: tape is empty or the loss is not on it
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if not tape.nodes:
        raise StateError("backward called on an empty tape")
    if not loss.requires_grad:
        raise StateError("loss was not produced on the active tape")

    loss.accumulate_grad(np.ones_like(loss.data))
    try:
        for node in reversed(tape.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            grads = node.backward_fn(out_grad)
            for tensor, g in zip(node.inputs, grads):
                if tensor.requires_grad and g is not None:
                    tensor.accumulate_grad(g)
        for node in tape.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
    finally:
        tape.clear()


# ============================================================================
# PRIMITIVES
# ============================================================================


def _is_trailing_vector(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum; ``b`` may be a trailing vector broadcast over rows."""
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if _is_trailing_vector(a, b):
        width = b.shape[0]
        return _emit(
            "add", (a, b), a.data + b.data,
            lambda g: (g, g.reshape(-1, width).sum(axis=0)),
        )
    raise ShapeError(f"add shape mismatch: {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product; ``b`` may be a trailing vector broadcast over rows."""
    a_data, b_data = a.data, b.data
    if a.shape == b.shape:
        return _emit("mul", (a, b), a_data * b_data, lambda g: (g * b_data, g * a_data))
    if _is_trailing_vector(a, b):
        width = b.shape[0]
        return _emit(
            "mul", (a, b), a_data * b_data,
            lambda g: (g * b_data, (g * a_data).reshape(-1, width).sum(axis=0)),
        )
    raise ShapeError(f"mul shape mismatch: {a.shape} and {b.shape}")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", (a,), a.data * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[m×k]`` and ``b[k×n]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data
    return _emit(
        "matmul", (a, b), a_data @ b_data,
        lambda g: (g @ b_data.T, a_data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _emit("gelu", (a,), out, _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma`` and ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm shape mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gamma_data = gamma.data
    out = xhat * gamma_data + beta.data

    def _backward(g):
        g_rows = g.reshape(-1, d)
        d_gamma = (g_rows * xhat.reshape(-1, d)).sum(axis=0)
        d_beta = g_rows.sum(axis=0)
        d_xhat = g * gamma_data
        dx = inv * (
            d_xhat
            - d_xhat.mean(axis=-1, keepdims=True)
            - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, d_gamma, d_beta

    return _emit("layer_norm", (x, gamma, beta), out, _backward)


def embedding(weight: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``weight`` by index."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be a flat sequence, got shape {idx.shape}")
    rows = weight.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise DataError(f"embedding index out of range [0, {rows}): {idx.tolist()}")
    shape = weight.shape

    def _backward(g):
        d_weight = np.zeros(shape)
        np.add.at(d_weight, idx, g)
        return (d_weight,)

    return _emit("embedding", (weight,), weight.data[idx], _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along the sequence axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    trailing = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != trailing:
            raise ShapeError(
                f"concat shape mismatch: {[tt.shape for tt in tensors]}"
            )
    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=0)))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"invalid column slice [{start}:{stop}] of shape {x.shape}")
    shape = x.shape

    def _backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", (x,), x.data[:, start:stop].copy(), _backward)


def causal_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    k_prefix: Optional[Tensor] = None,
    v_prefix: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """
    Multi-head scaled dot-product attention with a causal mask.

    Optional ``k_prefix``/``v_prefix`` blocks (p×d) are prepended to the keys
    and values; every query attends to all of them.

    Returns:
        The attention output (T×d), or ``(output, weights)`` with weights of
        shape (heads, T, p+T) when ``return_weights`` is set.
    """
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if (k_prefix is None) != (v_prefix is None):
        raise ShapeError("key and value prefixes must be supplied together")
    seq, d = q.shape
    if d % n_heads != 0:
        raise ShapeError(f"model width {d} is not divisible by {n_heads} heads")
    head_dim = d // n_heads

    inputs: tuple = (q, k, v)
    prefix_len = 0
    k_full, v_full = k.data, v.data
    if k_prefix is not None:
        if k_prefix.ndim != 2 or k_prefix.shape[1] != d or k_prefix.shape != v_prefix.shape:
            raise ShapeError(
                f"prefix shape mismatch: k {k_prefix.shape}, v {v_prefix.shape}, width {d}"
            )
        prefix_len = k_prefix.shape[0]
        k_full = np.concatenate([k_prefix.data, k.data], axis=0)
        v_full = np.concatenate([v_prefix.data, v.data], axis=0)
        inputs = inputs + (k_prefix, v_prefix)

    def split_heads(a: np.ndarray) -> np.ndarray:
        return a.reshape(a.shape[0], n_heads, head_dim).transpose(1, 0, 2)

    def merge_heads(a: np.ndarray) -> np.ndarray:
        return a.transpose(1, 0, 2).reshape(a.shape[1], d)

    qh, kh, vh = split_heads(q.data), split_heads(k_full), split_heads(v_full)
    factor = 1.0 / math.sqrt(head_dim)
    allowed = np.ones((seq, prefix_len + seq), dtype=bool)
    allowed[:, prefix_len:] = np.tril(np.ones((seq, seq), dtype=bool))

    scores = (qh @ kh.transpose(0, 2, 1)) * factor
    scores = np.where(allowed, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    out = merge_heads(weights @ vh)

    def _backward(g):
        gh = split_heads(g)
        d_v = weights.transpose(0, 2, 1) @ gh
        d_w = gh @ vh.transpose(0, 2, 1)
        d_s = weights * (d_w - (d_w * weights).sum(axis=-1, keepdims=True)) * factor
        d_q = merge_heads(d_s @ kh)
        d_k = merge_heads(d_s.transpose(0, 2, 1) @ qh)
        d_v = merge_heads(d_v)
        grads = (d_q, d_k[prefix_len:], d_v[prefix_len:])
        if prefix_len:
            grads = grads + (d_k[:prefix_len], d_v[:prefix_len])
        return grads

    result = _emit("causal_attention", inputs, out, _backward)
    if return_weights:
        return result, weights
    return result


def softmax_cross_entropy(
    logits: Tensor,
    targets: Sequence[int],
    ignore_value: int = IGNORE_INDEX,
) -> Tensor:
    """
    Mean negative log-softmax over positions whose target is not ``ignore_value``.

    Raises:
        DataError: every position is ignored, or a target is out of range
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross entropy expects T×V logits, got {logits.shape}")
    seq, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (seq,):
        raise ShapeError(f"targets of length {tgt.shape} do not match logits {logits.shape}")
    mask = tgt != ignore_value
    count = int(mask.sum())
    if count == 0:
        raise DataError("no supervised positions")
    picked = tgt[mask]
    if picked.min() < 0 or picked.max() >= vocab:
        raise DataError(f"target index out of range [0, {vocab}): {picked.tolist()}")

    rows = np.nonzero(mask)[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[rows, picked].sum() / count

    def _backward(g):
        grad = np.exp(log_probs)
        grad[rows, picked] -= 1.0
        grad[~mask] = 0.0
        return (grad * (float(g) / count),)

    return _emit("softmax_cross_entropy", (logits,), np.array(loss), _backward)
