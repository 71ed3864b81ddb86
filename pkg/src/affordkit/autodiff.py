"""Minimal reverse-mode autodiff on dense numpy tensors.

Supports tensors of up to 3 axes, a small set of primitives sufficient for
point-cloud encoders, MLP denoisers, and differentiable cosine-similarity
heatmaps, plus SGD/Adam optimizers and a binary checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

COSINE_EPS = 1e-8


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class Tensor:
    """A dense array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_grad_owned")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"tensors are limited to 3 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._grad_owned = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def accumulate_grad(self, g):
        # copy-on-write: a sole contribution is borrowed (never mutated);
        # a private buffer is allocated only once a second one arrives
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name})"


class _Record:
    """One primitive application on the tape."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops; backward walks it in reverse exactly once.

    Use as a context manager around the forward pass. Primitives record onto
    the innermost active tape whenever any input requires a gradient.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        if loss.data.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if self._consumed:
            raise AutodiffError("tape already consumed by backward; re-run the forward pass")
        if not self.records:
            raise AutodiffError("tape is empty; nothing to differentiate")
        self._consumed = True
        loss.accumulate_grad(np.asarray(1.0, dtype=loss.data.dtype))
        # Tape order equals execution order, so the reversed walk sees every
        # consumer before the producing record: output.grad is complete when
        # the record is visited.
        for rec in reversed(self.records):
            g_out = rec.output.grad
            if g_out is None:
                continue
            for inp, g_in in zip(rec.inputs, rec.backward_fn(g_out)):
                if g_in is not None and inp.requires_grad:
                    inp.accumulate_grad(g_in)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(inputs, out_data, backward_fn):
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.records.append(_Record(tuple(inputs), out, backward_fn))
    return out


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# primitives


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports bias-add broadcasting (..., H) + (H,)."""
    if a.data.shape == b.data.shape:
        def backward(g):
            return g, g
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        def backward(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes)
    else:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _record((a, b), a.data + b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    a_data, b_data = a.data, b.data

    def backward(g):
        return g * b_data, g * a_data

    return _record((a, b), a_data * b_data, backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _record((a,), a.data * c, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D @ 2D or batched 3D @ 2D matrix product."""
    if b.data.ndim != 2:
        raise ShapeError(f"matmul: right operand must be 2D, got {b.data.shape}")
    if a.data.ndim not in (2, 3) or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.data.shape} vs {b.data.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = g @ b_data.T
        if a_data.ndim == 3:
            # flatten the batch so the weight gradient is one BLAS call
            gb = a_data.reshape(-1, a_data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = a_data.T @ g
        return ga, gb

    return _record((a, b), a_data @ b_data, backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _record((a,), np.where(mask, a.data, 0.0), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out_data * out_data),)

    return _record((a,), out_data, backward)


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient routes to the arg-max (ties: lowest index)."""
    idx = np.argmax(a.data, axis=axis)
    out_data = np.max(a.data, axis=axis)
    shape = a.data.shape

    def backward(g):
        ga = np.zeros(shape, dtype=g.dtype)
        ax = axis if axis >= 0 else len(shape) + axis
        np.put_along_axis(ga, np.expand_dims(idx, ax), np.expand_dims(g, ax), ax)
        return (ga,)

    return _record((a,), out_data, backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        return (np.full(a.data.shape, g / n, dtype=a.data.dtype),)

    return _record((a,), a.data.mean(), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        gd = (2.0 / n) * diff * g
        return gd, -gd

    return _record((a, b), np.mean(diff * diff), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record(tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


def slice_axis(a: Tensor, axis: int, start: int, size: int) -> Tensor:
    if start < 0 or start + size > a.data.shape[axis]:
        raise ShapeError(
            f"slice: [{start}:{start + size}] out of range for axis {axis} of {a.data.shape}"
        )
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + size)
    sl = tuple(sl)
    shape = a.data.shape

    def backward(g):
        ga = np.zeros(shape, dtype=g.dtype)
        ga[sl] = g
        return (ga,)

    return _record((a,), a.data[sl], backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _record((a,), a.data.reshape(shape), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine between rows of `a` (..., M) and a vector `b` (M,).

    Rows (or `b`) with norm below COSINE_EPS yield 0 with zero gradient.
    """
    if b.data.ndim != 1 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"cosine: shape mismatch {a.data.shape} vs {b.data.shape}")
    a_data, b_data = a.data, b.data
    na = np.linalg.norm(a_data, axis=-1)
    nb = np.linalg.norm(b_data)
    ok = (na > COSINE_EPS) & (nb > COSINE_EPS)
    dots = a_data @ b_data
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dots / denom, 0.0)

    def backward(g):
        g_ok = np.where(ok, g, 0.0)
        # d cos / d a_i = b/(|a||b|) - cos * a_i/|a|^2
        na_safe = np.where(ok, na, 1.0)
        coef = (g_ok / denom)[..., None]
        ga = coef * b_data - (g_ok * cos / (na_safe * na_safe))[..., None] * a_data
        if nb > COSINE_EPS:
            gb = np.tensordot(g_ok / denom, a_data, axes=a_data.ndim - 1) - (
                np.sum(g_ok * cos) / (nb * nb)
            ) * b_data
        else:
            gb = np.zeros_like(b_data)
        return ga, gb

    return _record((a, b), cos, backward)


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """SGD or Adam over a list of parameter tensors."""

    def __init__(self, params, kind="adam", lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.params = list(params)
        self.kind = kind
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        if kind == "adam":
            self._m = [np.zeros_like(p.data) for p in self.params]
            self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise AutodiffError(f"non-finite gradient in parameter {p.name or i}")
            if self.kind == "sgd":
                p.data -= self.lr * g
            else:
                # in-place moment updates; same arithmetic as the textbook
                # m = b1*m + (1-b1)*g recursion, without the temporaries
                m, v = self._m[i], self._v[i]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                m_hat = np.asarray(m / (1 - b1**self.step_count))
                v_hat = np.asarray(v / (1 - b2**self.step_count))
                np.sqrt(v_hat, out=v_hat)
                v_hat += self.eps
                m_hat /= v_hat
                m_hat *= self.lr
                p.data -= m_hat


# ---------------------------------------------------------------------------
# checkpoint format: ordered (name, shape, little-endian float values) records
# plus a JSON manifest carrying an architecture hash.

_MAGIC = b"AKCKPT1\n"


def architecture_hash(named_shapes, extra=None):
    """Stable hash of the ordered parameter names/shapes and optional config."""
    h = hashlib.sha256()
    for name, shape in named_shapes:
        h.update(f"{name}:{tuple(shape)};".encode())
    if extra is not None:
        h.update(json.dumps(extra, sort_keys=True).encode())
    return h.hexdigest()


def save_params(path, params, meta=None):
    """Write ordered named parameters to `path` and a manifest next to it."""
    path = Path(path)
    named = [(p.name or f"param_{i}", p) for i, p in enumerate(params)]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        for name, p in named:
            arr = np.ascontiguousarray(p.data, dtype="<f8")
            header = f"{name} {arr.dtype.str} {' '.join(map(str, arr.shape))}\n"
            f.write(header.encode())
            f.write(arr.tobytes())
            f.write(b"\n")
    manifest = {
        "format": "affordkit-checkpoint-v1",
        "parameters": [{"name": n, "shape": list(p.data.shape)} for n, p in named],
        "architecture_hash": architecture_hash([(n, p.data.shape) for n, p in named],
                                               extra=meta),
        "meta": meta or {},
    }
    with open(path.with_suffix(".manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_params(path):
    """Read a checkpoint; returns (ordered dict name -> ndarray, manifest)."""
    path = Path(path)
    arrays = {}
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise AutodiffError(f"{path}: not an affordkit checkpoint")
        while True:
            header = f.readline()
            if not header:
                break
            name, dtype, *shape = header.decode().split()
            shape = tuple(int(s) for s in shape)
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * np.dtype(dtype).itemsize)
            arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
            f.read(1)  # trailing newline
    with open(path.with_suffix(".manifest.json")) as f:
        manifest = json.load(f)
    return arrays, manifest
