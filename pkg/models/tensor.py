"""
Tensor Core

Dense n-dimensional arrays with reverse-mode differentiation, sized for the
feature extraction, proposal and classification networks. Every public
operation records its inputs and a vector-Jacobian closure; ``backward`` builds
a ``ComputationTape`` (topological order over the recorded graph) and walks it
once in reverse.

Precision is chosen per tensor (``dtype``); tests run at float64 and training
may use float32.

Example:
    >>> x = Tensor([3.0], requires_grad=True)
    >>> loss = (x * x).sum()
    >>> backward(loss)
    >>> x.grad
    array([6.])
"""

from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from models.errors import ContractError, DimensionError, NumericalError, ParameterError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """N-dimensional array participating in reverse-mode differentiation.

    Attributes:
        values: Underlying numpy array (treated as immutable outside updates)
        requires_grad: Whether gradients flow into this tensor
        grad: Gradient of the last ``backward`` call, same shape as ``values``
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    # numpy defers mixed ndarray/Tensor arithmetic to the Tensor operators
    __array_ufunc__ = None

    def __init__(
        self,
        values: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = np.float64,
        name: Optional[str] = None,
    ):
        self.values = np.array(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as non-differentiable tensors matching ``like``'s dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float64
    return Tensor(value, dtype=dtype)


def apply_op(
    op: str,
    values: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
) -> Tensor:
    """Record an operation's output on the graph.

    Args:
        op: Operation name, used in diagnostics
        values: Forward result
        parents: Input tensors, in the order ``backward_fn`` returns gradients
        backward_fn: Maps the output gradient to one gradient per parent

    Raises:
        NumericalError: If the forward result contains NaN or Inf
    """
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"Non-finite values produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from e


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast("add", a.values, b.values)
    sa, sb = a.shape, b.shape
    return apply_op(
        "add",
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", -a.values, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast("mul", a.values, b.values)
    av, bv = a.values, b.values
    return apply_op(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast("div", a.values, b.values)
    av, bv = a.values, b.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return apply_op(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        ),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    return apply_op("scale", a.values * factor, (a,), lambda g: (g * factor,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant real exponent.

    At a = 0 the derivative is taken as its limit from the right: 0 for
    exponents above 1, 1 for exponent 1, and 0 for exponent 0.
    """
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(av, exponent)

    def backward(g):
        if exponent == 0:
            return (np.zeros_like(av),)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = exponent * np.power(av, exponent - 1)
        at_zero = 1.0 if exponent == 1 else 0.0
        local = np.where(av == 0, at_zero, local)
        return (g * local,)

    return apply_op("power", out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return apply_op("log", out, (a,), lambda g: (g / av,))


def relu(a: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0."""
    av = a.values
    return apply_op("relu", np.maximum(av, 0), (a,), lambda g: (g * (av > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.values)
    return apply_op("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); clamped entries pass no gradient."""
    av = a.values
    return apply_op("clamp_min", np.maximum(av, floor), (a,), lambda g: (g * (av > floor),))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber) penalty of ``a``."""
    av = a.values
    mag = np.abs(av)
    quad = mag < beta
    out = np.where(quad, 0.5 * av * av / beta, mag - 0.5 * beta)
    return apply_op(
        "smooth_l1", out, (a,), lambda g: (g * np.where(quad, av / beta, np.sign(av)),)
    )


# -- reductions and shape ---------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", np.sum(a.values, axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {original} as {shape}") from e
    return apply_op("reshape", out, (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return apply_op(
        "transpose", np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),)
    )


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return apply_op("getitem", np.array(a.values[index]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis."""
    if not tensors:
        raise DimensionError("concat: no tensors given")
    arrays = [t.values for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as e:
        shapes = [arr.shape for arr in arrays]
        raise DimensionError(f"concat: shapes {shapes} do not conform on axis {axis}") from e
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
    return apply_op(
        "concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack: no tensors given")
    try:
        out = np.stack([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"stack: shapes {[t.shape for t in tensors]} differ") from e
    return apply_op(
        "stack",
        out,
        tuple(tensors),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands (numpy semantics)."""
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise DimensionError(f"matmul: only 1-D/2-D operands supported, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise DimensionError(f"matmul: inner extents differ in {av.shape} @ {bv.shape}")

    def backward(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return apply_op("matmul", av @ bv, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return apply_op(
        "softmax",
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return apply_op(
        "log_softmax",
        out,
        (a,),
        lambda g: (g - probs * g.sum(axis=axis, keepdims=True),),
    )


# -- convolution ------------------------------------------------------------


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of a [C_in, H, W] map with [C_out, C_in, k, k] kernels.

    Zero padding. Output extent is floor((H + 2*padding - k) / stride) + 1 per
    spatial axis. The result is pre-activation; apply ``relu`` separately.

    Raises:
        DimensionError: If channel counts differ or the kernel exceeds the padded input
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: expected [C,H,W] input and 4-D kernels, got {x.shape}, {kernels.shape}")
    c_in, height, width = x.shape
    c_out, k_in, k, k2 = kernels.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d: kernels expect {k_in} input channels, input has {c_in}")
    if k != k2:
        raise DimensionError("conv2d: only square kernels are supported")
    if k > height + 2 * padding or k > width + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k} exceeds padded input {height}x{width} (padding {padding})")
    if stride < 1 or padding < 0:
        raise ParameterError("conv2d: stride must be positive and padding non-negative")

    xv = x.values
    padded = np.pad(xv, ((0, 0), (padding, padding), (padding, padding))) if padding else xv
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1], windows.shape[2]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, c_in * k * k)
    weight = kernels.values.reshape(c_out, c_in * k * k)
    out = cols @ weight.T
    if bias is not None:
        out = out + bias.values
    out = np.ascontiguousarray(out.T.reshape(c_out, out_h, out_w))

    def backward(g):
        g2d = g.reshape(c_out, out_h * out_w)
        grad_kernels = (g2d @ cols).reshape(kernels.shape)
        dcols = (g2d.T @ weight).reshape(out_h, out_w, c_in, k, k)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[
                    :,
                    i: i + stride * (out_h - 1) + 1: stride,
                    j: j + stride * (out_w - 1) + 1: stride,
                ] += dcols[:, :, :, i, j].transpose(2, 0, 1)
        if padding:
            grad_padded = grad_padded[:, padding: padding + height, padding: padding + width]
        grads = [grad_padded, grad_kernels]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return apply_op("conv2d", out, parents, backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of a [C, H, W] map."""
    c, h, w = x.shape
    out = x.values.repeat(factor, axis=1).repeat(factor, axis=2)
    return apply_op(
        "upsample_nearest",
        out,
        (x,),
        lambda g: (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),),
    )


# -- differentiation --------------------------------------------------------


class ComputationTape:
    """Ordered record of the operations that produced a scalar.

    ``nodes`` is a topological order: every node appears after all of its
    inputs. ``backward`` visits each node exactly once, in reverse.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._topological_order(root)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self):
        for node in self.nodes:
            node.grad = None
        root = self.root
        root.grad = np.ones_like(root.values)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, grad in zip(node._parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=parent.dtype)
                parent.grad = grad if parent.grad is None else parent.grad + grad


def backward(loss: Tensor) -> ComputationTape:
    """Assign d(loss)/d(tensor) to ``grad`` of every tensor that requires it.

    Gradients are reset before accumulation, so repeated calls on the same
    graph give identical results.

    Raises:
        ContractError: If ``loss`` is not a scalar
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = ComputationTape(loss)
    tape.backward()
    return tape


def _check_eps(eps: float):
    if not 0 < eps <= 1e-2:
        raise ParameterError(f"Finite-difference step must lie in (0, 1e-2], got {eps}")


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check(f: Callable[[Tensor], Tensor], point: ArrayLike, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` with central differences.

    Args:
        f: Maps a tensor to a scalar tensor
        point: Evaluation point (evaluated at float64)
        eps: Finite-difference step in (0, 1e-2]

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |numeric|)
    """
    _check_eps(eps)
    base = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    backward(f(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        f_plus = f(Tensor(plus.reshape(base.shape))).item()
        f_minus = f(Tensor(minus.reshape(base.shape))).item()
        numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * eps)
    return _relative_error(analytic, numeric)


def grad_check_parameters(
    loss_fn: Callable[[], Tensor],
    parameters: Iterable[Tensor],
    eps: float = 1e-5,
    max_coordinates: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Central-difference check of ``loss_fn`` against several leaf tensors.

    Each parameter is perturbed in place and restored. For large tensors
    ``max_coordinates`` limits the check to a seeded random subset.
    """
    _check_eps(eps)
    parameters = list(parameters)
    backward(loss_fn())
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.values) for p in parameters
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for param, grad in zip(parameters, analytic):
        flat = param.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coordinates is not None and flat.size > max_coordinates:
            coords = rng.choice(flat.size, size=max_coordinates, replace=False)
        numeric = np.zeros(len(coords))
        for j, i in enumerate(coords):
            original = flat[i]
            flat[i] = original + eps
            f_plus = loss_fn().item()
            flat[i] = original - eps
            f_minus = loss_fn().item()
            flat[i] = original
            numeric[j] = (f_plus - f_minus) / (2 * eps)
        worst = max(worst, _relative_error(grad.reshape(-1)[coords], numeric))
    return worst
