"""
Dense 64-bit tensor arithmetic with reverse-mode automatic differentiation.

Values are plain ``numpy`` float64 arrays (the ``Tensor`` alias) and are never
mutated once an operation has produced them. Every operation returns a
:class:`Node` that records its parents together with the vector-Jacobian
closure mapping the output gradient to that parent's gradient. ``backward``
walks the graph once in reverse topological order.

Broadcasting is limited to what the denoisers need: shapes are aligned on the
right and a missing leading axis or a singleton axis may expand.
"""

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.special import expit
from scipy.special import softmax as _softmax

from normdiff.errors import ContractError, DimensionError, NumericalError

Tensor = npt.NDArray[np.float64]
ArrayLike = Union["Node", Tensor, float, int, Sequence[float]]
VJP = Callable[[Tensor], Tensor]


def tensor(values: Union[Tensor, float, Sequence[float]], shape: Optional[Sequence[int]] = None) -> Tensor:
    """Build a finite float64 tensor, optionally reshaped row-major to ``shape``."""
    out = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != out.size:
            raise DimensionError(f"Cannot view {out.size} values as shape {shape}")
        out = out.reshape(shape)
    if not np.all(np.isfinite(out)):
        raise NumericalError("Tensor contains non-finite values")
    return out


class Node:
    """
    A value in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters: ``backward``
    accumulates into their ``grad`` across calls until :func:`zero_grad`.
    Intermediate nodes have their ``grad`` reset at the start of each pass.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(
        self,
        value: Union[Tensor, float, Sequence[float]],
        parents: Sequence[Tuple["Node", VJP]] = (),
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"Non-finite value produced{f' in {name}' if name else ''}")
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Node":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Node":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Node":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Node":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Node":
        return mul(other, self)

    def __neg__(self) -> "Node":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Node":
        return matmul(self, other)


def parameter(value: Union[Tensor, float, Sequence[float]], name: Optional[str] = None) -> Node:
    """Create a trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_node(x: ArrayLike) -> Node:
    """Wrap constants as non-trainable leaves; pass nodes through."""
    return x if isinstance(x, Node) else Node(x)


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise DimensionError(f"Incompatible shapes {a} and {b}")


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum a gradient back down to the shape of the operand that was expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)
    return Node(
        a.value + b.value,
        parents=[
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ],
    )


def sub(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)
    return Node(
        a.value - b.value,
        parents=[
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ],
    )


def mul(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.shape, b.shape)
    return Node(
        a.value * b.value,
        parents=[
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
    )


def matmul(a: ArrayLike, b: ArrayLike) -> Node:
    """
    Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either a plain matrix shared
    across the batch (weights) or carries exactly the same leading axes.
    """
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"Inner dimensions differ: {a.shape} @ {b.shape}")

    if b.ndim == 2:
        k, n = b.shape
        lead = a.shape[:-1]
        a2 = a.value.reshape(-1, k)
        value = (a2 @ b.value).reshape(lead + (n,))

        def grad_a(g: Tensor) -> Tensor:
            return (g.reshape(-1, n) @ b.value.T).reshape(a.shape)

        def grad_b(g: Tensor) -> Tensor:
            return a2.T @ g.reshape(-1, n)

        return Node(value, parents=[(a, grad_a), (b, grad_b)])

    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"Batch axes differ: {a.shape} @ {b.shape}")
    return Node(
        np.matmul(a.value, b.value),
        parents=[
            (a, lambda g: np.matmul(g, np.swapaxes(b.value, -1, -2))),
            (b, lambda g: np.matmul(np.swapaxes(a.value, -1, -2), g)),
        ],
    )


def sum(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Node:  # noqa: A001
    x = as_node(x)
    value = np.sum(x.value, axis=axis, keepdims=keepdims)

    def grad(g: Tensor) -> Tensor:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape).copy()

    return Node(value, parents=[(x, grad)])


def mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    x = as_node(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Node:
    x = as_node(x)
    try:
        value = x.value.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"Cannot reshape {x.shape} to {tuple(shape)}")
    return Node(value, parents=[(x, lambda g: g.reshape(x.shape))])


def transpose(x: ArrayLike, axes: Sequence[int]) -> Node:
    x = as_node(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Node(np.transpose(x.value, axes), parents=[(x, lambda g: np.transpose(g, inverse))])


def concat(nodes: Sequence[ArrayLike], axis: int = -1) -> Node:
    parts = [as_node(n) for n in nodes]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(f"Cannot concatenate shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_for(index: int) -> VJP:
        return lambda g: np.split(g, bounds, axis=axis)[index]

    return Node(value, parents=[(p, grad_for(i)) for i, p in enumerate(parts)])


def power(x: ArrayLike, exponent: float) -> Node:
    x = as_node(x)
    return Node(
        np.power(x.value, exponent),
        parents=[(x, lambda g: g * exponent * np.power(x.value, exponent - 1.0))],
    )


def sigmoid(x: ArrayLike) -> Node:
    x = as_node(x)
    s = expit(x.value)
    return Node(s, parents=[(x, lambda g: g * s * (1.0 - s))])


def prelu(x: ArrayLike, alpha: ArrayLike) -> Node:
    """Parametric ReLU; ``alpha`` is a scalar or a per-channel vector on the last axis."""
    x, alpha = as_node(x), as_node(alpha)
    _broadcast_shape(x.shape, alpha.shape)
    positive = x.value > 0
    return Node(
        np.where(positive, x.value, alpha.value * x.value),
        parents=[
            (x, lambda g: g * np.where(positive, 1.0, alpha.value)),
            (alpha, lambda g: _unbroadcast(g * np.where(positive, 0.0, x.value), alpha.shape)),
        ],
    )


def softmax(x: ArrayLike) -> Node:
    """Softmax over the last axis."""
    x = as_node(x)
    s = _softmax(x.value, axis=-1)

    def grad(g: Tensor) -> Tensor:
        return s * (g - np.sum(g * s, axis=-1, keepdims=True))

    return Node(s, parents=[(x, grad)])


def layernorm(x: ArrayLike, eps: float = 1e-5) -> Node:
    """Normalise the last axis to zero mean and unit (population) variance."""
    x = as_node(x)
    mu = x.value.mean(axis=-1, keepdims=True)
    centred = x.value - mu
    inv_std = 1.0 / np.sqrt(np.mean(centred * centred, axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std

    def grad(g: Tensor) -> Tensor:
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = np.mean(g * xhat, axis=-1, keepdims=True)
        return inv_std * (g - g_mean - xhat * gx_mean)

    return Node(xhat, parents=[(x, grad)])


def dropout(x: ArrayLike, mask: Optional[Tensor], rate: float) -> Node:
    """
    Inverted dropout with a caller-supplied keep mask.

    A ``None`` mask (evaluation) or ``rate == 0`` returns ``x`` unchanged.
    """
    x = as_node(x)
    if mask is None or rate == 0.0:
        return x
    if mask.shape != x.shape:
        raise DimensionError(f"Dropout mask {mask.shape} does not match {x.shape}")
    return mul(x, mask / (1.0 - rate))


def elementwise(op: str, *args: ArrayLike) -> Node:
    """Dispatch one of the named elementwise operations."""
    table: Dict[str, Callable[..., Node]] = {
        "add": add,
        "mul": mul,
        "prelu": prelu,
        "sigmoid": sigmoid,
        "softmax_lastdim": softmax,
        "layernorm_lastdim": layernorm,
    }
    if op not in table:
        raise ContractError(f"Unknown elementwise op '{op}'")
    return table[op](*args)


def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> Dict[str, Tensor]:
    """
    Populate gradients of a scalar loss with respect to every trainable leaf.

    Returns:
        Mapping from leaf name (``param<i>`` when unnamed) to its accumulated gradient.

    Raises:
        ContractError: If ``loss`` is not a scalar.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = _topological_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.value)
    loss.grad = loss.grad + np.ones_like(loss.value)

    for node in reversed(order):
        if not node.requires_grad or node.is_leaf:
            continue
        for parent, vjp in node.parents:
            if parent.requires_grad:
                parent.grad = parent.grad + vjp(node.grad)

    leaves = [n for n in order if n.is_leaf and n.requires_grad]
    return {(leaf.name or f"param{i}"): leaf.grad for i, leaf in enumerate(leaves)}


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def numerical_gradient(loss_fn: Callable[[], Node], param: Node, step: float = 1e-5) -> Tensor:
    """Central finite differences of ``loss_fn()`` with respect to ``param``."""
    grad = np.zeros_like(param.value)
    original = param.value
    flat = original.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += step
        param.value = plus.reshape(original.shape)
        f_plus = float(loss_fn().value)
        minus = flat.copy()
        minus[i] -= step
        param.value = minus.reshape(original.shape)
        f_minus = float(loss_fn().value)
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * step)
    param.value = original
    return grad


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-10) -> float:
    """Norm-wise relative error; zero when both gradients vanish below ``floor``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    loss_fn: Callable[[], Node], params: Sequence[Node], step: float = 1e-5
) -> Dict[str, float]:
    """
    Compare analytic gradients of ``loss_fn`` against central differences.

    Returns:
        Relative error per parameter name.
    """
    zero_grad(params)
    backward(loss_fn())
    errors: Dict[str, float] = {}
    for i, p in enumerate(params):
        analytic = p.grad.copy()
        numeric = numerical_gradient(loss_fn, p, step=step)
        errors[p.name or f"param{i}"] = relative_error(analytic, numeric)
    zero_grad(params)
    return errors
