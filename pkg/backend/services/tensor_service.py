"""
Minimal dense-tensor engine with reverse-mode differentiation.

Values live in read-only numpy arrays. Every differentiable primitive
computes its forward result eagerly and, when a Tape is active and any input
requires a gradient, appends a node (kind, parents, saved intermediates) to
that tape. The vector-Jacobian rule for each kind is looked up in a registry
at backward time, so a rule can be swapped out by tests.

Usage
-----
    with Tape():
        loss = sum_all(mul(x, x))
    backward(loss)
    x.grad  # -> 2x

The active tape and the working precision are context variables: each thread
(or asyncio.to_thread worker) that opens its own Tape gets its own graph.
"""

import contextvars
import itertools
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from services.errors import ContractError, DimensionError, NumericDomainError, TapeError

logger = logging.getLogger(__name__)

_DTYPES: dict[int, type] = {32: np.float32, 64: np.float64}

_precision: contextvars.ContextVar[int] = contextvars.ContextVar("mma_precision", default=64)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("mma_tape", default=None)
_uids = itertools.count()

# kind -> rule(grad_out, node) -> one gradient (or None) per parent
_VJP: dict[str, Callable[[np.ndarray, "Node"], tuple]] = {}

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


# ── Precision ────────────────────────────────────────────────────────────────

def current_dtype():
    return _DTYPES[_precision.get()]


@contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the working precision (64-bit for oracle paths)."""
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    token = _precision.set(bits)
    try:
        yield
    finally:
        _precision.reset(token)


# ── Core types ───────────────────────────────────────────────────────────────

class Tensor:
    __slots__ = ("values", "requires_grad", "node", "grad", "uid")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=current_dtype())
        self._attach(arr, requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        obj = cls.__new__(cls)
        arr = np.asarray(arr)
        obj._attach(arr if arr.flags.c_contiguous else np.ascontiguousarray(arr), requires_grad)
        return obj

    def _attach(self, arr: np.ndarray, requires_grad: bool) -> None:
        if any(dim <= 0 for dim in arr.shape):
            raise DimensionError(f"tensor dims must be positive, got shape {arr.shape}")
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.grad: np.ndarray | None = None
        self.uid = next(_uids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass(eq=False)
class Node:
    index: int
    kind: str
    parents: tuple[Tensor, ...]
    output_uid: int
    saved: dict
    tape: "Tape"


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, kind: str, parents: tuple[Tensor, ...], output: Tensor, saved: dict) -> Node:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been differentiated")
        node = Node(len(self.nodes), kind, parents, output.uid, saved, self)
        self.nodes.append(node)
        return node

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False


@dataclass(eq=False)
class Parameter:
    name: str
    tensor: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


class ParameterStore:
    """Named parameters in deterministic registration order."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def register(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter '{name}' registered twice")
        tensor = Tensor(values, requires_grad=True)
        self._params[name] = Parameter(name, tensor)
        return tensor

    def replace(self, name: str, values: np.ndarray) -> None:
        param = self._params[name]
        if values.shape != param.shape:
            raise DimensionError(f"parameter '{name}': new shape {values.shape} vs {param.shape}")
        param.tensor = Tensor(values, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name].tensor
        except KeyError:
            raise ContractError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def scalar_count(self) -> int:
        return sum(p.tensor.values.size for p in self._params.values())

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.tensor.zero_grad()


# ── Graph plumbing ───────────────────────────────────────────────────────────

def defvjp(kind: str):
    def register(rule):
        _VJP[kind] = rule
        return rule
    return register


def _emit(kind: str, values: np.ndarray, parents: tuple[Tensor, ...], **saved) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor._wrap(values.astype(current_dtype(), copy=False), requires)
    tape = _active_tape.get()
    if requires and tape is not None:
        out.node = tape.record(kind, parents, out, saved)
    return out


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def backward(loss: Tensor) -> list[Tensor]:
    """
    Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf that
    requires a gradient. Returns those leaves in first-reached order.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise TapeError("loss has no tape node (computed outside a Tape or detached)")
    tape = loss.node.tape
    if tape.consumed:
        raise TapeError("tape already differentiated; reset it before calling backward again")
    tape.consumed = True

    pending: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=loss.values.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        grad_out = pending.pop(node.output_uid, None)
        if grad_out is None:
            continue
        parent_grads = _VJP[node.kind](grad_out, node)
        for parent, grad in zip(node.parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            if parent.node is None or parent.node.tape is not tape:
                parent.grad = grad.copy() if parent.grad is None else parent.grad + grad
                leaves.setdefault(parent.uid, parent)
            elif parent.uid in pending:
                pending[parent.uid] = pending[parent.uid] + grad
            else:
                pending[parent.uid] = grad
    return list(leaves.values())


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _swap_last(arr: np.ndarray) -> np.ndarray:
    return np.swapaxes(arr, -1, -2)


# ── Linear algebra ───────────────────────────────────────────────────────────

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(…×m×k) @ (…×k×n); leading dims must be identical (no broadcasting)."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", np.matmul(a.values, b.values), (a, b))


@defvjp("matmul")
def _matmul_vjp(g, node):
    a, b = node.parents
    return np.matmul(g, _swap_last(b.values)), np.matmul(_swap_last(a.values), g)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dims, got {a.shape}")
    return _emit("transpose", _swap_last(a.values), (a,))


@defvjp("transpose")
def _transpose_vjp(g, node):
    return (_swap_last(g),)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: axes {axes} invalid for shape {a.shape}")
    return _emit("permute", np.transpose(a.values, axes), (a,), axes=axes)


@defvjp("permute")
def _permute_vjp(g, node):
    return (np.transpose(g, np.argsort(node.saved["axes"])),)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.values.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit("reshape", a.values.reshape(shape), (a,))


@defvjp("reshape")
def _reshape_vjp(g, node):
    return (g.reshape(node.parents[0].shape),)


# ── Elementwise ──────────────────────────────────────────────────────────────

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _emit("add", a.values + b.values, (a, b))


@defvjp("add")
def _add_vjp(g, node):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _emit("sub", a.values - b.values, (a, b))


@defvjp("sub")
def _sub_vjp(g, node):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return _emit("mul", a.values * b.values, (a, b))


@defvjp("mul")
def _mul_vjp(g, node):
    a, b = node.parents
    return g * b.values, g * a.values


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("div", a, b)
    return _emit("div", a.values / b.values, (a, b))


@defvjp("div")
def _div_vjp(g, node):
    a, b = node.parents
    return g / b.values, -g * a.values / (b.values * b.values)


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", a.values * factor, (a,), factor=factor)


@defvjp("scale")
def _scale_vjp(g, node):
    return (g * node.saved["factor"],)


def abs_(a: Tensor) -> Tensor:
    return _emit("abs", np.abs(a.values), (a,))


@defvjp("abs")
def _abs_vjp(g, node):
    # sign(0) == 0: the subgradient at the kink is zero
    return (g * np.sign(node.parents[0].values),)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select from `a` where the constant boolean mask holds, else from `b`."""
    _require_same_shape("where", a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"where: mask {mask.shape} vs operands {a.shape}")
    return _emit("where", np.where(mask, a.values, b.values), (a, b), mask=mask)


@defvjp("where")
def _where_vjp(g, node):
    mask = node.saved["mask"]
    return np.where(mask, g, 0.0), np.where(mask, 0.0, g)


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, factor: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, abs, mean_lastaxis."""
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ContractError(f"elementwise '{kind}' needs two operands")
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    if kind == "scale":
        if factor is None:
            raise ContractError("elementwise 'scale' needs a factor")
        return scale(a, factor)
    if kind == "abs":
        return abs_(a)
    if kind == "mean_lastaxis":
        return mean_lastaxis(a)
    raise ContractError(f"unknown elementwise kind '{kind}'")


# ── Reductions and expansions ────────────────────────────────────────────────

def mean_lastaxis(a: Tensor) -> Tensor:
    return _emit("mean_lastaxis", a.values.mean(axis=-1), (a,))


@defvjp("mean_lastaxis")
def _mean_lastaxis_vjp(g, node):
    a = node.parents[0]
    n = a.shape[-1]
    return (np.broadcast_to(g[..., None] / n, a.shape).copy(),)


def sum_lastaxis(a: Tensor) -> Tensor:
    return _emit("sum_lastaxis", a.values.sum(axis=-1), (a,))


@defvjp("sum_lastaxis")
def _sum_lastaxis_vjp(g, node):
    return (np.broadcast_to(g[..., None], node.parents[0].shape).copy(),)


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum_all", np.asarray(a.values.sum()), (a,))


@defvjp("sum_all")
def _sum_all_vjp(g, node):
    return (np.full(node.parents[0].shape, g, dtype=node.parents[0].values.dtype),)


def expand_last(a: Tensor, n: int) -> Tensor:
    """Repeat along a new trailing axis of length n."""
    return _emit("expand_last", np.repeat(a.values[..., None], n, axis=-1), (a,))


@defvjp("expand_last")
def _expand_last_vjp(g, node):
    return (g.sum(axis=-1),)


def expand_leading(a: Tensor, lead: Sequence[int]) -> Tensor:
    """Tile `a` under new leading axes: shape `lead + a.shape`."""
    lead = tuple(lead)
    out = np.broadcast_to(a.values, lead + a.shape).copy()
    return _emit("expand_leading", out, (a,), n_lead=len(lead))


@defvjp("expand_leading")
def _expand_leading_vjp(g, node):
    return (g.sum(axis=tuple(range(node.saved["n_lead"]))),)


def l2norm_lastaxis(a: Tensor) -> Tensor:
    return _emit("l2norm_lastaxis", np.sqrt((a.values * a.values).sum(axis=-1)), (a,))


@defvjp("l2norm_lastaxis")
def _l2norm_vjp(g, node):
    x = node.parents[0].values
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    return (np.where(norm > 0, g[..., None] * x / safe, 0.0),)


# ── Structure ────────────────────────────────────────────────────────────────

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] != ref.shape[:ax] or t.shape[ax + 1:] != ref.shape[ax + 1:]:
            raise DimensionError(f"concat on axis {axis}: {ref.shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=ax)
    return _emit("concat", out, tuple(tensors), axis=ax, sizes=sizes)


@defvjp("concat")
def _concat_vjp(g, node):
    bounds = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=node.saved["axis"]))


def concat_channels(maps: Sequence[Tensor]) -> Tensor:
    """Concatenate (…×h×L×L) maps on the channel axis, in argument order."""
    if not maps:
        raise ContractError("concat_channels needs at least one map")
    ref = maps[0]
    for m in maps:
        if m.ndim < 3 or m.shape[-1] != m.shape[-2] or m.shape[-2:] != ref.shape[-2:]:
            raise DimensionError(f"concat_channels: map {m.shape} incompatible with {ref.shape}")
        if m.values.dtype != ref.values.dtype:
            raise DimensionError("concat_channels: maps differ in scalar precision")
    return concat(maps, axis=-3)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    return _emit("slice", a.values[tuple(index)], (a,), index=tuple(index))


@defvjp("slice")
def _slice_vjp(g, node):
    a = node.parents[0]
    out = np.zeros(a.shape, dtype=g.dtype)
    out[node.saved["index"]] = g
    return (out,)


# ── Neural-network primitives ────────────────────────────────────────────────

def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    if not np.all(np.isfinite(a.values)):
        raise NumericDomainError("softmax_rows received NaN or infinite input")
    probs = _softmax_values(a.values)
    return _emit("softmax_rows", probs, (a,), probs=probs)


@defvjp("softmax_rows")
def _softmax_vjp(g, node):
    probs = node.saved["probs"]
    return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)


def _softmax_values(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.values)):
        raise NumericDomainError("log_softmax_rows received NaN or infinite input")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return _emit("log_softmax_rows", out, (a,))


@defvjp("log_softmax_rows")
def _log_softmax_vjp(g, node):
    probs = _softmax_values(node.parents[0].values)
    return (g - probs * g.sum(axis=-1, keepdims=True),)


def channel_mix_1x1(d: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """
    1×1 convolution over (…×c_in×L×L): out[o,i,j] = b[o] + Σ_c W[o,c]·D[c,i,j].
    """
    if d.ndim < 3 or w.ndim != 2 or b.shape != (w.shape[0],) or d.shape[-3] != w.shape[1]:
        raise DimensionError(f"channel_mix_1x1: input {d.shape}, weight {w.shape}, bias {b.shape}")
    out = np.einsum("oc,...cij->...oij", w.values, d.values) + b.values[:, None, None]
    return _emit("channel_mix_1x1", out, (d, w, b))


@defvjp("channel_mix_1x1")
def _channel_mix_vjp(g, node):
    d, w, _ = node.parents
    lead = tuple(range(g.ndim - 3))
    grad_d = np.einsum("oc,...oij->...cij", w.values, g)
    grad_w = np.einsum("noij,ncij->oc", g.reshape((-1,) + g.shape[-3:]),
                       d.values.reshape((-1,) + d.shape[-3:]))
    grad_b = g.sum(axis=lead + (g.ndim - 2, g.ndim - 1))
    return grad_d, grad_w, grad_b


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or shift.shape != (n,):
        raise DimensionError(f"layer_norm: input {x.shape}, scale {gain.shape}, shift {shift.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    return _emit("layer_norm", xhat * gain.values + shift.values, (x, gain, shift), xhat=xhat, rstd=rstd)


@defvjp("layer_norm")
def _layer_norm_vjp(g, node):
    _, gain, _ = node.parents
    xhat, rstd = node.saved["xhat"], node.saved["rstd"]
    lead = tuple(range(g.ndim - 1))
    dxhat = g * gain.values
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    v = x.values
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    return _emit("gelu", 0.5 * v * (1.0 + t), (x,), t=t)


@defvjp("gelu")
def _gelu_vjp(g, node):
    v = node.parents[0].values
    t = node.saved["t"]
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
    return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)


def norm_and_activation(kind: str, x: Tensor, gain: Tensor | None = None,
                        shift: Tensor | None = None) -> Tensor:
    if kind == "layer_norm":
        n = x.shape[-1]
        gain = gain if gain is not None else constant(np.ones(n))
        shift = shift if shift is not None else constant(np.zeros(n))
        return layer_norm(x, gain, shift)
    if kind == "gelu":
        return gelu(x)
    raise ContractError(f"unknown norm/activation kind '{kind}'")


# ── Compositions ─────────────────────────────────────────────────────────────

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[…×n_in] @ weight[n_in×n_out] (+ bias[n_out])."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (math.prod(lead), x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, expand_leading(bias, (out.shape[0],)))
    return reshape(out, lead + (weight.shape[1],)) if x.ndim != 2 else out


def zeros_like(a: Tensor) -> Tensor:
    return constant(np.zeros(a.shape))


# ── Initialisers ─────────────────────────────────────────────────────────────

def truncated_normal(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02,
                     bound: float = 2.0) -> np.ndarray:
    """N(0, std²) with draws beyond `bound`·std resampled."""
    out = rng.normal(0.0, std, size=tuple(shape))
    outside = np.abs(out) > bound * std
    while outside.any():
        out[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(out) > bound * std
    return out
