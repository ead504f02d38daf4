"""Dense numeric kernel: tensors with reverse-mode gradients, MLP blocks,
an AdamW optimizer step, and the binary checkpoint format.

Everything is double precision (float64) and CPU-only. Gradients are
computed by a small tape: each op records its parents and a vector-Jacobian
closure, and ``Tensor.backward`` walks the tape in reverse topological
order. The engine covers exactly the ops the rest of the package composes:
broadcast arithmetic, matmul, reductions, row gather/segment-sum, concat,
slicing, and the activation set {silu, gelu, sigmoid, identity}.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "concat",
    "stack",
    "segment_sum",
    "segment_mean",
    "row_norms",
    "MlpParams",
    "mlp_init",
    "mlp_forward",
    "mlp_named",
    "backward",
    "OptimState",
    "adamw_step",
    "save_checkpoint",
    "load_checkpoint",
    "hash_parameters",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 ndarray with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @staticmethod
    def _result(data, parents, vjp) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        a, b = self, self._wrap(other)
        return self._result(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return self._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        a, b = self, self._wrap(other)
        return self._result(
            a.data * b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, self._wrap(other)
        return self._result(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        e = float(exponent)
        out = self.data**e
        return self._result(out, (self,), lambda g: (g * e * self.data ** (e - 1.0),))

    def __matmul__(self, other):
        a, b = self, self._wrap(other)
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        return self._result(
            a.data @ b.data,
            (a, b),
            lambda g: (g @ b.data.T, a.data.T @ g),
        )

    # -- indexing / shaping ---------------------------------------------------

    def __getitem__(self, index):
        src_shape = self.shape

        def vjp(g):
            full = np.zeros(src_shape, dtype=np.float64)
            np.add.at(full, index, g)
            return (full,)

        return self._result(self.data[index], (self,), vjp)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return self._result(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def ravel(self):
        return self.reshape(-1)

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ShapeError("T is defined for 2-D tensors only")
        return self._result(self.data.T.copy(), (self,), lambda g: (g.T,))

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        src_shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, src_shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, src_shape).copy(),)

        return self._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return self._result(out, (self,), lambda g: (g * out,))

    def log(self):
        return self._result(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return self._result(out, (self,), lambda g: (g * 0.5 / out,))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return self._result(out, (self,), lambda g: (g * out * (1.0 - out),))

    def silu(self):
        s = _sigmoid(self.data)
        return self._result(
            self.data * s,
            (self,),
            lambda g: (g * (s + self.data * s * (1.0 - s)),),
        )

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return self._result(x * cdf, (self,), lambda g: (g * (cdf + x * pdf),))

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack[-1]
            if id(node) in seen:
                stack.pop()
                continue
            pending = [p for p in node._parents if id(p) not in seen and p.requires_grad]
            if pending:
                stack.extend(pending)
            else:
                seen.add(id(node))
                stack.pop()
                if node.requires_grad:
                    order.append(node)

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(node.grad)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def backward(loss: Tensor) -> None:
    """Module-level alias for ``loss.backward()``."""
    loss.backward()


# -- structural ops ------------------------------------------------------------


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; gradient splits back by size."""
    tensors = [Tensor._wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp
    )


def stack(tensors: list[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    return concat([t.reshape((1,) + t.shape) for t in tensors], axis=0)


def segment_sum(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``values`` (M, F) into ``num_segments`` buckets."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((num_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, ids, values.data)
    return Tensor._result(out, (values,), lambda g: (g[ids],))


def segment_mean(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Per-bucket mean; empty buckets yield zero rows."""
    counts = np.bincount(segment_ids, minlength=num_segments).astype(np.float64)
    counts = np.maximum(counts, 1.0).reshape((num_segments,) + (1,) * (values.data.ndim - 1))
    return segment_sum(values, segment_ids, num_segments) * (1.0 / counts)


def row_norms(diffs: Tensor, eps: float = 1e-8) -> Tensor:
    """Smoothed per-row Euclidean norm of (M, 3) rows: sqrt(sum(d^2) + eps^2).

    The eps^2 inside the root keeps value and gradient finite at coincident
    points, where the plain norm has an unbounded derivative.
    """
    sq = (diffs.data * diffs.data).sum(axis=-1, keepdims=True)
    out = np.sqrt(sq + eps * eps)
    return Tensor._result(out, (diffs,), lambda g: (g * diffs.data / out,))


_ACTIVATIONS = {
    "silu": Tensor.silu,
    "gelu": Tensor.gelu,
    "sigmoid": Tensor.sigmoid,
    "identity": lambda t: t,
}


# -- MLP blocks ------------------------------------------------------------------


@dataclass
class MlpParams:
    """Weights of a fully connected stack.

    ``weights[l]`` has shape (in_l, out_l) and consecutive layer widths chain.
    ``activation`` is applied after every hidden layer, ``out_activation``
    after the last. ``dropout[l]`` is the rate applied to layer l's input in
    train mode (inverted scaling, so evaluation needs no rescale).
    """

    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "silu"
    out_activation: str = "identity"
    dropout: tuple[float, ...] = ()

    def __post_init__(self):
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"layer widths do not chain: {a.shape} -> {b.shape}")
        for r in self.dropout:
            if not 0.0 <= r < 1.0:
                raise ContractError(f"dropout rate {r} outside [0, 1)")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def tensors(self) -> list[Tensor]:
        return list(self.weights) + list(self.biases)


def mlp_init(
    sizes: list[int],
    rng: np.random.Generator,
    activation: str = "silu",
    out_activation: str = "identity",
    dropout: tuple[float, ...] = (),
) -> MlpParams:
    """Glorot-normal weights, zero biases, for the layer widths in ``sizes``."""
    if activation not in _ACTIVATIONS or out_activation not in _ACTIVATIONS:
        raise ContractError(f"unknown activation: {activation!r}/{out_activation!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return MlpParams(weights, biases, activation, out_activation, tuple(dropout))


def mlp_forward(
    params: MlpParams,
    inputs: Tensor,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Apply the stack to (B, in_dim) rows. Deterministic given rng state."""
    x = Tensor._wrap(inputs)
    if x.data.ndim != 2:
        raise ShapeError(f"mlp_forward expects 2-D input, got shape {x.shape}")
    if x.shape[1] != params.in_dim:
        raise ShapeError(
            f"input width {x.shape[1]} does not match first layer width {params.in_dim}"
        )
    n_layers = len(params.weights)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        rate = params.dropout[l] if l < len(params.dropout) else 0.0
        if train_mode and rate > 0.0:
            if rng is None:
                raise ContractError("train-mode dropout requires an rng")
            mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
            x = x * Tensor(mask)
        x = x @ w + b
        act = params.activation if l < n_layers - 1 else params.out_activation
        x = _ACTIVATIONS[act](x)
    return x


def mlp_named(prefix: str, params: MlpParams) -> dict[str, Tensor]:
    """Flat name -> Tensor map for checkpointing and optimization."""
    named = {}
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        named[f"{prefix}.w{l}"] = w
        named[f"{prefix}.b{l}"] = b
    return named


# -- AdamW -----------------------------------------------------------------------


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam state, keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: OptimState,
    lr: float | None = None,
) -> None:
    """One AdamW update in place over ``params``.

    ``grads`` defaults to each tensor's accumulated ``.grad``; entries whose
    gradient is absent are skipped entirely (frozen parameters stay
    bit-identical). Non-finite gradients abort, naming the parameter.
    """
    rate = state.lr if lr is None else float(lr)
    if rate <= 0.0:
        raise ContractError(f"learning rate must be positive, got {rate}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, param in params.items():
        g = grads.get(name) if grads is not None else param.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != param.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param {param.data.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay > 0.0:
            param.data -= rate * state.weight_decay * param.data
        param.data -= rate * update


# -- checkpoint format ------------------------------------------------------------

_CHECKPOINT_MAGIC = b"CGCK"
_CHECKPOINT_VERSION = 1


def save_checkpoint(path, named: dict[str, Tensor]) -> None:
    """Write named parameters: magic, u32 version, u32 count, then sections
    of (u32 name length, UTF-8 name, u32 ndim, u32 dims..., float64 LE data).
    """
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(named)))
        for name in sorted(named):
            data = np.ascontiguousarray(named[name].data, dtype="<f8")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into name -> float64 array."""
    from .errors import DataFormatError

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        out[name] = arr.astype(np.float64)
    if offset != len(blob):
        raise DataFormatError(f"{path}: trailing bytes after last section")
    return out


def hash_parameters(named: dict[str, Tensor]) -> str:
    """SHA-256 over sorted (name, shape, raw float64 bytes); bit-sensitive."""
    h = hashlib.sha256()
    for name in sorted(named):
        data = np.ascontiguousarray(named[name].data, dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(data.shape).encode("ascii"))
        h.update(data.tobytes())
    return h.hexdigest()
