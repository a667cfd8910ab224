"""Dense float tensors with define-by-run reverse-mode differentiation.

A :class:`ComputeGraph` is activated with ``with ComputeGraph() as graph:``; every
op executed inside the block whose inputs require gradients appends a
:class:`Node` to it. :func:`backward` then walks the nodes in reverse recording
order, which is a topological order by construction.

Design Decision DD-101: Tensors hold 64-bit floats so finite-difference checks
have headroom; checkpoints store 32-bit values.

Design Decision DD-102: Random streams come from numpy's PCG64 seeded through a
``SeedSequence`` whose spawn key is derived from component names, so each
parameter or sampler owns an independent, reproducible stream.
"""

from __future__ import annotations

import zlib
from collections.abc import Callable, Sequence
from contextvars import ContextVar, Token
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import structlog

from stuffnet.errors import GraphError, ShapeError

logger = None

MAX_RANK = 4

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_ACTIVE_GRAPH: ContextVar[ComputeGraph | None] = ContextVar("stuffnet_graph", default=None)
_DETERMINISTIC = True


def _get_logger() -> Any:
    """Get or create logger instance."""
    global logger
    if logger is None:
        logger = structlog.get_logger()
    return logger


def set_deterministic(flag: bool) -> None:
    """Set the global determinism flag (default on).

    When on, contractions run through ``np.einsum`` without path optimisation,
    which keeps reduction order fixed. When off, numpy may dispatch to BLAS.
    """
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


def is_deterministic() -> bool:
    return _DETERMINISTIC


def contract(subscripts: str, *operands: np.ndarray) -> np.ndarray:
    """``np.einsum`` honouring the determinism flag."""
    return np.einsum(subscripts, *operands, optimize=not _DETERMINISTIC)


@dataclass(eq=False)
class Tensor:
    """Dense row-major float64 array of rank 1-4 with an optional gradient.

    Scalars are stored with shape ``(1,)``.

    Example:
        >>> w = Tensor(np.ones((2, 3)), requires_grad=True, name="w")
        >>> w.shape
        (2, 3)
    """

    data: np.ndarray
    requires_grad: bool = False
    name: str | None = None
    grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= MAX_RANK:
            raise ShapeError(f"tensor rank must be 1-{MAX_RANK}, got {arr.ndim}")
        if arr.size == 0:
            raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
        self.data = arr
        if self.grad is not None and self.grad.shape != arr.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != data shape {arr.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


@dataclass
class Node:
    """One recorded operation."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class ComputeGraph:
    """Ordered record of the operations of one forward pass.

    Example:
        >>> w = Tensor(np.ones(3), requires_grad=True)
        >>> with ComputeGraph() as graph:
        ...     loss = sum_all(scale(w, 2.0))
        >>> backward(graph, loss, [w])["tensor_0"].tolist()
        [2.0, 2.0, 2.0]
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        self._tokens: list[Token[ComputeGraph | None]] = []

    def __enter__(self) -> ComputeGraph:
        self._tokens.append(_ACTIVE_GRAPH.set(self))
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE_GRAPH.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        """Drop all nodes so the graph can record a new pass."""
        self.nodes.clear()
        self.consumed = False

    def parameters(self) -> list[Tensor]:
        """Leaf tensors requiring gradients, in first-use order."""
        produced = {id(node.output) for node in self.nodes}
        seen: set[int] = set()
        leaves: list[Tensor] = []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    leaves.append(t)
        return leaves


def active_graph() -> ComputeGraph | None:
    return _ACTIVE_GRAPH.get()


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> Tensor:
    """Attach ``output`` to the active graph when any input requires gradients."""
    graph = _ACTIVE_GRAPH.get()
    if graph is None or not any(t.requires_grad for t in inputs):
        return output
    if graph.consumed:
        raise GraphError("cannot record into a consumed graph; call reset() first")
    output.requires_grad = True
    graph.nodes.append(Node(op=op, inputs=tuple(inputs), output=output, backward_fn=backward_fn))
    return output


def backward(
    graph: ComputeGraph,
    loss: Tensor,
    params: Sequence[Tensor] | None = None,
) -> dict[str, np.ndarray]:
    """Reverse-mode pass from a scalar ``loss``.

    Sets ``.grad`` on every parameter (zeros when the loss does not depend on
    it) and marks the graph consumed.

    Args:
        graph: Graph recorded during the forward pass
        loss: Single-element tensor
        params: Tensors to report; defaults to the graph's leaf tensors

    Returns:
        Gradient per parameter name (``tensor_<i>`` for unnamed tensors)

    Raises:
        GraphError: Non-scalar loss, or the graph was already consumed
    """
    if graph.consumed:
        raise GraphError("backward called twice on the same graph without reset()")
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, g in zip(node.inputs, node.backward_fn(upstream)):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + g if key in grads else g
    graph.consumed = True

    targets = list(params) if params is not None else graph.parameters()
    result: dict[str, np.ndarray] = {}
    for i, p in enumerate(targets):
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64)
        result[p.name or f"tensor_{i}"] = p.grad
    _get_logger().debug("backward_completed", nodes=len(graph.nodes), params=len(targets))
    return result


# -- elementary ops ---------------------------------------------------------


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return record("add", (a, b), Tensor(a.data + b.data), lambda g: (g, g))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return record("add_scalar", (a,), Tensor(a.data + c), lambda g: (g,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return record("sub", (a, b), Tensor(a.data - b.data), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return record("mul", (a, b), Tensor(a.data * b.data), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", (a,), Tensor(a.data * c), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record(
        "sum_all",
        (a,),
        Tensor(np.array([a.data.sum()])),
        lambda g: (np.full(shape, g.reshape(-1)[0]),),
    )


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return record(
        "reshape", (a,), Tensor(a.data.reshape(tuple(shape))), lambda g: (g.reshape(original),)
    )


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return record(
        "transpose",
        (a,),
        Tensor(np.ascontiguousarray(a.data.transpose(axes))),
        lambda g: (g.transpose(inverse),),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", (a,), Tensor(np.where(mask, a.data, 0.0)), lambda g: (g * mask,))


def stack_sum(terms: Sequence[Tensor]) -> Tensor:
    """Sum same-shaped tensors as one node."""
    if not terms:
        raise ShapeError("stack_sum needs at least one term")
    for t in terms[1:]:
        _check_same("stack_sum", terms[0], t)
    total = np.zeros_like(terms[0].data)
    for t in terms:
        total = total + t.data
    return record("stack_sum", tuple(terms), Tensor(total), lambda g: tuple(g for _ in terms))


# -- initialisation and randomness --------------------------------------------


def rng_for(seed: int, *components: str | int) -> np.random.Generator:
    """Independent random stream for ``(seed, *components)``.

    Example:
        >>> a = rng_for(0, "xavier", "conv1_1").random()
        >>> a == rng_for(0, "xavier", "conv1_1").random()
        True
    """
    spawn_key = tuple(zlib.crc32(str(c).encode("utf-8")) for c in components)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


def xavier_bound(fan_in: int, fan_out: int) -> float:
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(
    fan_in: int,
    fan_out: int,
    dims: Sequence[int],
    seed: int,
    *,
    stream: str = "xavier",
    name: str | None = None,
    requires_grad: bool = True,
) -> Tensor:
    """Xavier-uniform initialisation on ``[-a, a]``, ``a = sqrt(6 / (fan_in + fan_out))``.

    Args:
        fan_in: Inputs feeding each unit
        fan_out: Units fed by each input
        dims: Output shape
        seed: Master seed
        stream: Component name selecting an independent stream
        name: Tensor name
        requires_grad: Mark the result as a trainable parameter

    Raises:
        ValueError: ``fan_in`` or ``fan_out`` below 1
    """
    bound = xavier_bound(fan_in, fan_out)
    values = rng_for(seed, stream).uniform(-bound, bound, size=tuple(dims))
    return Tensor(values, requires_grad=requires_grad, name=name)


# -- gradient verification ------------------------------------------------------


def relative_error(analytic: np.ndarray | float, numeric: np.ndarray | float) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic and central-difference gradient.

    Args:
        f: Scalar function built from tensor ops
        x: Evaluation point (not modified)
        h: Step size

    Returns:
        ``max |ga - gn| / max(1e-8, |ga| + |gn|)`` over the elements of ``x``

    Raises:
        ValueError: ``h <= 0``
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")

    x_in = Tensor(x.data.copy(), requires_grad=True)
    with ComputeGraph() as graph:
        out = f(x_in)
    backward(graph, out, [x_in])
    assert x_in.grad is not None
    analytic = x_in.grad.reshape(-1)

    base = x.data.reshape(-1)
    numeric = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = f(Tensor(plus.reshape(x.shape))).item()
        f_minus = f(Tensor(minus.reshape(x.shape))).item()
        # Divide by the realised step, not 2h.
        numeric[i] = (f_plus - f_minus) / (plus[i] - minus[i])
    return float(relative_error(analytic, numeric).max())


@dataclass
class GradientSample:
    """One sampled parameter element."""

    param: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return float(relative_error(self.analytic, self.numeric))

    @property
    def abs_error(self) -> float:
        return abs(self.analytic - self.numeric)


@dataclass
class GradientCheckResult:
    samples: list[GradientSample]

    @property
    def max_rel_error(self) -> float:
        return max((s.rel_error for s in self.samples), default=0.0)

    def passed(self, rel_tol: float = 1e-3, abs_tol: float = 0.0) -> bool:
        """Every sample within ``rel_tol`` relative or ``abs_tol`` absolute error."""
        return all(s.rel_error < rel_tol or s.abs_error < abs_tol for s in self.samples)


def gradient_check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_samples: int = 50,
    h: float = 1e-5,
    seed: int = 0,
) -> GradientCheckResult:
    """Central-difference check on randomly sampled parameter elements.

    ``loss_fn`` must rebuild the loss from the current parameter values each
    call. Parameters are perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    params = list(params)
    with ComputeGraph() as graph:
        loss = loss_fn()
    backward(graph, loss, params)

    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = rng_for(seed, "gradcheck")
    picks = np.sort(rng.choice(total, size=min(n_samples, total), replace=False))

    samples: list[GradientSample] = []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k]
        j = int(flat - offsets[k])
        view = p.data.reshape(-1)
        original = view[j]
        view[j] = original + h
        upper = view[j]
        f_plus = loss_fn().item()
        view[j] = original - h
        lower = view[j]
        f_minus = loss_fn().item()
        view[j] = original
        assert p.grad is not None
        samples.append(
            GradientSample(
                param=p.name or f"tensor_{k}",
                index=j,
                analytic=float(p.grad.reshape(-1)[j]),
                numeric=(f_plus - f_minus) / (upper - lower),
            )
        )
    return GradientCheckResult(samples=samples)
