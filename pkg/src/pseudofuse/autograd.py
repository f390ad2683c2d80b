"""Small dense tensor with reverse-mode differentiation.

Only the operations the detector needs are implemented: affine layers,
ReLU/sigmoid gating, concatenation, column slicing, neighbourhood pooling,
segment means for voxel merging and a handful of reductions for the losses.
Everything is float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

SENTINEL = -1


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False
        self.name = name

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

        Leaves must have been reset (``grad is None``) beforehand and the same
        output cannot be back-propagated twice.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward already called on this output")
        order = _topological(self)
        for node in order:
            if node._backward is None and node.requires_grad and node.grad is not None:
                raise RuntimeError(
                    f"leaf {node.name or node!r} still holds a gradient; call zero_grad first"
                )
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._consumed = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _tracks(p):
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out.requires_grad = False
    tracked = any(_tracks(p) for p in parents)
    out._parents = tuple(parents) if tracked else ()
    out._backward = backward if tracked else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    e = np.exp(flat[~pos])
    out[~pos] = e / (1.0 + e)
    return out.reshape(x.shape)


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_array(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return _result(out, (x,), lambda g: (g * sigmoid_array(d),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    )


# linear algebra & shape ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise ValueError(f"invalid axis {axis} for {ndim}-d tensors")
    axis %= ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for k, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if k != axis):
            raise ValueError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Column block ``a[:, start:stop]``."""
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ValueError(f"bad column slice {start}:{stop} of {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop], (a,), backward)


def total(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ValueError("mean of empty tensor")
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def pool(x: Tensor, mode: str = "max", axis: int = 0) -> Tensor:
    """Reduce ``x`` along ``axis`` by max or average."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"invalid axis {axis} for shape {x.shape}")
    axis %= x.ndim
    if x.shape[axis] == 0:
        raise ValueError("cannot pool over an empty axis")
    if mode == "max":
        arg = np.argmax(x.data, axis=axis)
        out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

        def backward(g):
            full = np.zeros_like(x.data)
            np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
            return (full,)

        return _result(out, (x,), backward)
    if mode == "avg":
        n = x.shape[axis]
        return _result(
            x.data.mean(axis=axis),
            (x,),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),),
        )
    raise ValueError(f"unknown pool mode {mode!r}")


def group_pool(x: Tensor, index: np.ndarray, mode: str = "max") -> Tensor:
    """Pool rows of ``x`` (N x C) over neighbourhoods given by ``index`` (M x K).

    Slots holding ``SENTINEL`` are ignored, as are padding slots that repeat the
    first index of their row.  Rows with no members come out as zeros.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or x.ndim != 2:
        raise ValueError("group_pool expects x: N x C and index: M x K")
    m, k = index.shape
    c = x.shape[1]
    valid = index != SENTINEL
    if k > 1:
        dup = np.zeros_like(valid)
        dup[:, 1:] = index[:, 1:] == index[:, :1]
        valid &= ~dup
    safe = np.where(valid, index, 0)
    if x.shape[0] == 0:
        if valid.any():
            raise ValueError("index refers into an empty feature table")
        return _result(np.zeros((m, c)), (x,), lambda g: (np.zeros_like(x.data),))
    gathered = x.data[safe]  # M x K x C
    counts = valid.sum(axis=1)
    nonempty = counts > 0
    if mode == "max":
        masked = np.where(valid[:, :, None], gathered, -np.inf)
        arg = np.argmax(masked, axis=1)  # M x C
        out = np.take_along_axis(masked, arg[:, None, :], axis=1)[:, 0, :]
        out[~nonempty] = 0.0
        src = np.take_along_axis(safe, arg, axis=1)  # M x C source rows

        def backward(g):
            full = np.zeros_like(x.data)
            rows = src[nonempty]
            cols = np.broadcast_to(np.arange(c), rows.shape)
            np.add.at(full, (rows.ravel(), cols.ravel()), g[nonempty].ravel())
            return (full,)

        return _result(out, (x,), backward)
    if mode == "avg":
        weights = valid / np.maximum(counts, 1)[:, None]  # M x K
        out = np.einsum("mk,mkc->mc", weights, gathered)

        def backward(g):
            full = np.zeros_like(x.data)
            contrib = weights[:, :, None] * g[:, None, :]
            np.add.at(full, safe.ravel(), contrib.reshape(-1, c))
            return (full,)

        return _result(out, (x,), backward)
    raise ValueError(f"unknown pool mode {mode!r}")


def segment_mean(x: Tensor, segment: np.ndarray, num_segments: int) -> Tensor:
    """Mean of the rows of ``x`` sharing a segment id."""
    segment = np.asarray(segment, dtype=np.int64)
    counts = np.bincount(segment, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("every segment needs at least one member")
    out = np.zeros((num_segments, x.shape[1]))
    np.add.at(out, segment, x.data)
    out /= counts[:, None]
    return _result(out, (x,), lambda g: ((g / counts[:, None])[segment],))


def scatter_rows(x: Tensor, target: np.ndarray, num_rows: int) -> Tensor:
    """Place row i of ``x`` at row ``target[i]`` of a zero matrix; targets are distinct."""
    target = np.asarray(target, dtype=np.int64)
    if len(np.unique(target)) != len(target):
        raise ValueError("scatter targets must be distinct")
    out = np.zeros((num_rows,) + x.shape[1:])
    out[target] = x.data
    return _result(out, (x,), lambda g: (g[target],))


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        return (full,)

    return _result(x.data[rows], (x,), backward)


# layers -------------------------------------------------------------------


class Linear:
    """Affine map ``y = x W^T + b``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None, name: str = "linear"):
        if in_features < 1 or out_features < 1:
            raise ValueError("layer widths must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)), True, f"{name}.weight")
        self.bias = Tensor(rng.uniform(-bound, bound, out_features), True, f"{name}.bias")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    @classmethod
    def from_arrays(cls, weight, bias, name: str = "linear") -> "Linear":
        weight = np.asarray(weight, dtype=np.float64)
        layer = cls.__new__(cls)
        layer.weight = Tensor(weight, True, f"{name}.weight")
        layer.bias = Tensor(np.asarray(bias, dtype=np.float64).reshape(weight.shape[0]), True, f"{name}.bias")
        return layer


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ValueError(f"linear expects n x {layer.in_features}, got {x.shape}")
    return matmul(x, transpose(layer.weight)) + layer.bias


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator | None = None, name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("an MLP needs an input and an output width")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = [
            Linear(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    @classmethod
    def from_layers(cls, layers: Sequence[Linear]) -> "MLP":
        mlp = cls.__new__(cls)
        mlp.layers = list(layers)
        return mlp

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.layers, x)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


def mlp_forward(layers: Sequence[Linear], x: Tensor) -> Tensor:
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = relu(x)
    return x


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for ``params``; zeros for parameters not reached."""
    for p in params:
        p.zero_grad()
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p in params:
        p.zero_grad()
    return grads


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences over ``params``."""
    analytic = gradients(fn(), params)
    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numerical_gradient(fn, p, h)))
    return worst


# checkpoints --------------------------------------------------------------

_CKPT_MAGIC = "PFCKPT 1"


def save_parameters(path, named: Iterable[tuple[str, Tensor]]) -> None:
    """Write parameters as a text manifest followed by little-endian float64 data.

    Manifest lines are ``name d0,d1,... offset`` with offsets in elements; the
    manifest ends with a line holding ``END``.
    """
    named = list(named)
    lines = [_CKPT_MAGIC]
    offset = 0
    for name, t in named:
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        shape = ",".join(str(s) for s in t.shape) or "-"
        lines.append(f"{name} {shape} {offset}")
        offset += t.data.size
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_parameters(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"\nEND\n")
    if not blob.startswith(_CKPT_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a parameter checkpoint")
    body = blob[end + len(b"\nEND\n"):]
    values = np.frombuffer(body, dtype="<f8")
    out = {}
    for line in blob[:end].decode("ascii").splitlines()[1:]:
        name, shape_txt, offset_txt = line.split()
        shape = () if shape_txt == "-" else tuple(int(s) for s in shape_txt.split(","))
        offset = int(offset_txt)
        size = int(np.prod(shape)) if shape else 1
        if offset + size > values.size:
            raise ValueError(f"{path}: truncated data for {name}")
        out[name] = values[offset:offset + size].reshape(shape).copy()
    return out
