"""
Tensor Core Module
Dense numpy-backed tensors with reverse-mode automatic differentiation.

Operations executed inside a ``with ComputationTape():`` block are recorded on a
networkx DiGraph (tensor nodes, input -> output edges). ``backward()`` replays
the recorded operations in reverse topological order. Outside a tape nothing is
recorded, so inference is a pure function of its inputs.
"""

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from errors import ContractError, DomainError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
LOG_CLAMP = 1e-12

Scalar = Union[int, float]

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """
    Immutable dense array with an optional gradient buffer.

    The data buffer is a read-only, contiguous, row-major numpy array. Only
    ``assign`` (used by optimizers and checkpoint loading) replaces it.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if array.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = _freeze(np.array(array, dtype=dtype, copy=True))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = _freeze(np.require(array, requirements="C"))
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def assign(self, values) -> None:
        """Replace the data buffer in place (training and checkpoint loading only)"""
        values = np.asarray(values)
        if values.shape != self.shape:
            raise ShapeError(f"cannot assign shape {values.shape} to tensor of shape {self.shape}")
        self.data = _freeze(np.array(values, dtype=self.dtype, copy=True))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return arith(self, other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return arith(self, other, "sub")

    def __rsub__(self, other):
        return arith(scale(self, -1.0), other, "add")

    def __mul__(self, other):
        return arith(self, other, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Function:
    """
    Base class for differentiable operations.

    ``forward`` receives numpy arrays and returns the output array; ``backward``
    receives d(loss)/d(output) and returns one gradient (or None) per input.
    """

    name = "op"

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls()
        dtype = inputs[0].dtype
        out_data = np.asarray(fn.forward(*(t.data for t in inputs), **kwargs), dtype=dtype)
        tape = _ACTIVE_TAPE.get()
        track = tape is not None and any(t.requires_grad for t in inputs)
        out = Tensor._wrap(out_data, requires_grad=track)
        if track:
            tape.record(fn, inputs, out)
        return out


@dataclass
class TapeEntry:
    """One recorded operation: input node ids -> output node id, with its backward rule"""
    index: int
    op: Function
    inputs: Tuple[int, ...]
    output: int


class ComputationTape:
    """
    Ordered record of differentiable operations.

    Use as a context manager; the tape is active only for the current thread /
    context. Entries are appended in execution order, which is a topological
    order of the recorded graph.
    """

    def __init__(self):
        self.graph = nx.DiGraph()
        self.entries: List[TapeEntry] = []
        self._node_of: Dict[int, int] = {}
        self._tensors: Dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "ComputationTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def node(self, tensor: Tensor) -> int:
        key = id(tensor)
        if key not in self._node_of:
            node_id = len(self._tensors)
            self._node_of[key] = node_id
            self._tensors[node_id] = tensor
            self.graph.add_node(node_id, entry=None)
        return self._node_of[key]

    def has(self, tensor: Tensor) -> bool:
        return id(tensor) in self._node_of and self._tensors[self._node_of[id(tensor)]] is tensor

    def tensor(self, node_id: int) -> Tensor:
        return self._tensors[node_id]

    def record(self, op: Function, inputs: Sequence[Tensor], output: Tensor) -> None:
        input_ids = tuple(self.node(t) for t in inputs)
        output_id = self.node(output)
        entry = TapeEntry(len(self.entries), op, input_ids, output_id)
        self.entries.append(entry)
        self.graph.nodes[output_id]["entry"] = entry
        for input_id in input_ids:
            self.graph.add_edge(input_id, output_id)

    def is_topologically_ordered(self) -> bool:
        return nx.is_directed_acyclic_graph(self.graph) and all(
            node < entry.output for entry in self.entries for node in entry.inputs
        )

    def first_non_finite(self) -> Optional[str]:
        """Name of the first recorded op whose output holds NaN/Inf, or None"""
        for entry in self.entries:
            if not self._tensors[entry.output].is_finite():
                return f"{entry.op.name}#{entry.index}"
        return None

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        return backward(loss, self)


def active_tape() -> Optional[ComputationTape]:
    """The tape recording in the current context, if any"""
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, tape: ComputationTape) -> Dict[Tensor, np.ndarray]:
    """
    Populate ``grad`` of every requires_grad leaf recorded on ``tape``.

    Gradients accumulate over fan-out and onto existing grad buffers. Leaves the
    loss does not depend on receive zero gradients.

    Returns:
        Mapping from leaf tensor to its gradient buffer
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not tape.has(loss):
        raise ContractError("loss is not reachable from this tape")

    root = tape.node(loss)
    reachable = nx.ancestors(tape.graph, root) | {root}
    order = list(nx.topological_sort(tape.graph.subgraph(reachable)))

    grads: Dict[int, np.ndarray] = {root: np.ones_like(loss.data)}
    for node_id in reversed(order):
        entry = tape.graph.nodes[node_id]["entry"]
        if entry is None or node_id not in grads:
            continue
        input_grads = entry.op.backward(grads[node_id])
        for input_id, grad in zip(entry.inputs, input_grads):
            if grad is None or not tape.tensor(input_id).requires_grad:
                continue
            grads[input_id] = grads[input_id] + grad if input_id in grads else grad

    leaves: Dict[Tensor, np.ndarray] = {}
    for node_id, tensor in tape._tensors.items():
        if not tensor.requires_grad or tape.graph.nodes[node_id]["entry"] is not None:
            continue
        grad = grads.get(node_id)
        grad = np.zeros_like(tensor.data) if grad is None else np.array(grad, dtype=tensor.dtype)
        if grad.shape != tensor.shape:
            raise ContractError(f"gradient shape {grad.shape} does not match tensor shape {tensor.shape}")
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        leaves[tensor] = tensor.grad
    return leaves


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

class Conv2d(Function):
    name = "conv2d"

    def forward(self, x, w, b, stride=1, padding=0):
        self.squeeze = x.ndim == 3
        if self.squeeze:
            x = x[None]
        n, _, h, wd = x.shape
        out_c, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        out = np.zeros((n, out_c, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
        out += b.reshape(1, out_c, 1, 1)
        self.saved = (xp, w, stride, padding, (h, wd), (ho, wo))
        return out[0] if self.squeeze else out

    def backward(self, grad):
        xp, w, stride, padding, (h, wd), (ho, wo) = self.saved
        if self.squeeze:
            grad = grad[None]
        kh, kw = w.shape[2:]
        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * (ho - 1) + 1, stride)
                cols = slice(j, j + stride * (wo - 1) + 1, stride)
                patch = xp[:, :, rows, cols]
                dw[:, :, i, j] = np.tensordot(grad, patch, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, rows, cols] += np.tensordot(grad, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + wd]
        db = grad.sum(axis=(0, 2, 3))
        return (dx[0] if self.squeeze else dx), dw, db


def conv2d(input: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    Direct 2-D cross-correlation over (C,H,W) or (N,C,H,W) input.

    Output size per axis is floor((H + 2*padding - kH) / stride) + 1.
    """
    if input.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W)/(N,C,H,W) input and 4-D kernel, got {input.shape}, {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    channels, height, width = input.shape[-3:]
    out_c, in_c, kh, kw = kernel.shape
    if in_c != channels:
        raise ShapeError(f"kernel expects {in_c} input channels, input has {channels}")
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {height}x{width} (padding {padding})")
    if bias is None:
        bias = Tensor(np.zeros(out_c), dtype=kernel.dtype)
    if bias.shape != (out_c,):
        raise ShapeError(f"bias must have shape ({out_c},), got {bias.shape}")
    return Conv2d.apply(input, kernel, bias, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# Pointwise functions
# ---------------------------------------------------------------------------

POINTWISE_FUNCTIONS = ("leaky_relu", "sigmoid", "exp", "log", "square")


class Pointwise(Function):

    def forward(self, x, fn="sigmoid", slope=0.2):
        self.fn = fn
        self.name = fn
        if fn == "leaky_relu":
            self.saved = (x > 0, slope)
            return np.where(x > 0, x, x * slope)
        if fn == "sigmoid":
            e = np.exp(-np.abs(x))
            out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            self.saved = out
            return out
        if fn == "exp":
            out = np.exp(x)
            self.saved = out
            return out
        if fn == "log":
            self.saved = x
            return np.log(x)
        if fn == "square":
            self.saved = x
            return x * x
        raise ContractError(f"unknown pointwise function '{fn}'")

    def backward(self, grad):
        if self.fn == "leaky_relu":
            mask, slope = self.saved
            return (np.where(mask, grad, grad * slope),)
        if self.fn == "sigmoid":
            out = self.saved
            return (grad * out * (1.0 - out),)
        if self.fn == "exp":
            return (grad * self.saved,)
        if self.fn == "log":
            return (grad / self.saved,)
        return (grad * 2.0 * self.saved,)


def pointwise(input: Tensor, fn: str, slope: float = 0.2) -> Tensor:
    """Elementwise leaky_relu(slope) / sigmoid / exp / log / square"""
    if fn not in POINTWISE_FUNCTIONS:
        raise ContractError(f"unknown pointwise function '{fn}', expected one of {POINTWISE_FUNCTIONS}")
    if fn == "log":
        bad = np.argwhere(input.data <= 0)
        if bad.size:
            index = tuple(int(i) for i in bad[0])
            raise DomainError("log of non-positive value", index=index)
    return Pointwise.apply(input, fn=fn, slope=slope)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return pointwise(x, "leaky_relu", slope)


def sigmoid(x: Tensor) -> Tensor:
    return pointwise(x, "sigmoid")


def exp(x: Tensor) -> Tensor:
    return pointwise(x, "exp")


def log(x: Tensor) -> Tensor:
    return pointwise(x, "log")


def square(x: Tensor) -> Tensor:
    return pointwise(x, "square")


class Clamp(Function):
    name = "clamp"

    def forward(self, x, low=None, high=None):
        mask = np.ones(x.shape, dtype=bool)
        if low is not None:
            mask &= x >= low
        if high is not None:
            mask &= x <= high
        self.mask = mask
        return np.clip(x, low, high)

    def backward(self, grad):
        return (np.where(self.mask, grad, 0.0),)


def clamp(x: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    """Hard clamp; the gradient is zero wherever the input lies outside [low, high]"""
    return Clamp.apply(x, low=low, high=high)


def safe_log(x: Tensor) -> Tensor:
    """log clamped from below at LOG_CLAMP; for loss code paths only"""
    return log(clamp(x, LOG_CLAMP, None))


class SmoothL1(Function):
    name = "smooth_l1"

    def forward(self, x, beta=1.0):
        self.saved = (x, beta)
        ax = np.abs(x)
        return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)

    def backward(self, grad):
        x, beta = self.saved
        return (grad * np.where(np.abs(x) < beta, x / beta, np.sign(x)),)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    return SmoothL1.apply(x, beta=beta)


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

ARITH_OPS = ("add", "sub", "mul", "scale")


class Add(Function):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return grad * b, grad * a


class AddScalar(Function):
    name = "add_scalar"

    def forward(self, a, value=0.0):
        return a + value

    def backward(self, grad):
        return (grad,)


class Scale(Function):
    name = "scale"

    def forward(self, a, factor=1.0):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


def arith(a: Tensor, b: Union[Tensor, Scalar], op: str) -> Tensor:
    """Elementwise add/sub/mul of equal-shape tensors, or against a scalar; scale needs a scalar"""
    if op not in ARITH_OPS:
        raise ContractError(f"unknown arithmetic op '{op}', expected one of {ARITH_OPS}")
    if not isinstance(b, Tensor):
        value = float(b)
        if op == "add":
            return AddScalar.apply(a, value=value)
        if op == "sub":
            return AddScalar.apply(a, value=-value)
        return Scale.apply(a, factor=value)
    if op == "scale":
        raise ContractError("scale needs a scalar factor")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return {"add": Add, "sub": Sub, "mul": Mul}[op].apply(a, b)


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return arith(a, b, "add")


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return arith(a, b, "sub")


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return arith(a, b, "mul")


def scale(a: Tensor, factor: Scalar) -> Tensor:
    return arith(a, factor, "scale")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

REDUCE_OPS = ("sum", "mean", "l1norm")


class Reduce(Function):

    def forward(self, x, op="sum"):
        self.op = op
        self.name = op
        self.saved = x
        if op == "sum":
            return np.asarray(x.sum())
        if op == "mean":
            return np.asarray(x.mean())
        return np.asarray(np.abs(x).sum())

    def backward(self, grad):
        x = self.saved
        if self.op == "sum":
            return (np.full(x.shape, grad, dtype=x.dtype),)
        if self.op == "mean":
            return (np.full(x.shape, grad / x.size, dtype=x.dtype),)
        return (np.sign(x) * grad,)


def reduce(input: Tensor, op: str) -> Tensor:
    """Reduce to a scalar tensor: sum, mean, or l1norm (sum of absolute values)"""
    if op not in REDUCE_OPS:
        raise ContractError(f"unknown reduction '{op}', expected one of {REDUCE_OPS}")
    if input.size == 0:
        raise DomainError(f"{op} of an empty tensor")
    return Reduce.apply(input, op=op)


def sum_all(x: Tensor) -> Tensor:
    return reduce(x, "sum")


def mean(x: Tensor) -> Tensor:
    return reduce(x, "mean")


def l1norm(x: Tensor) -> Tensor:
    return reduce(x, "l1norm")


class GlobalMeanPool(Function):
    name = "global_mean_pool"

    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.shape
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.shape).copy(),)


def global_mean_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean"""
    if x.ndim != 4:
        raise ShapeError(f"global_mean_pool expects (N,C,H,W), got {x.shape}")
    return GlobalMeanPool.apply(x)


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------

class PixelShuffle(Function):
    name = "pixel_shuffle"

    def forward(self, x, r=2):
        self.squeeze = x.ndim == 3
        if self.squeeze:
            x = x[None]
        self.r = r
        out = _shuffle(x, r)
        return out[0] if self.squeeze else out

    def backward(self, grad):
        if self.squeeze:
            grad = grad[None]
        out = _unshuffle(grad, self.r)
        return (out[0] if self.squeeze else out,)


class PixelUnshuffle(Function):
    name = "pixel_unshuffle"

    def forward(self, x, r=2):
        self.squeeze = x.ndim == 3
        if self.squeeze:
            x = x[None]
        self.r = r
        out = _unshuffle(x, r)
        return out[0] if self.squeeze else out

    def backward(self, grad):
        if self.squeeze:
            grad = grad[None]
        out = _shuffle(grad, self.r)
        return (out[0] if self.squeeze else out,)


def _shuffle(x: np.ndarray, r: int) -> np.ndarray:
    # out[n, c, h*r + i, w*r + j] = in[n, c*r*r + i*r + j, h, w]
    n, c, h, w = x.shape
    c_out = c // (r * r)
    return x.reshape(n, c_out, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c_out, h * r, w * r)


def _unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle(input: Tensor, r: int) -> Tensor:
    """Sub-pixel rearrangement (r*r*C, H, W) -> (C, r*H, r*W); batch axis optional"""
    if input.ndim not in (3, 4) or r < 1:
        raise ShapeError(f"pixel_shuffle expects rank 3/4 input and r >= 1, got {input.shape}, r={r}")
    if input.shape[-3] % (r * r):
        raise ShapeError(f"channel count {input.shape[-3]} not divisible by r^2 = {r * r}")
    return PixelShuffle.apply(input, r=r)


def pixel_unshuffle(input: Tensor, r: int) -> Tensor:
    """Inverse of pixel_shuffle"""
    if input.ndim not in (3, 4) or r < 1:
        raise ShapeError(f"pixel_unshuffle expects rank 3/4 input and r >= 1, got {input.shape}, r={r}")
    if input.shape[-1] % r or input.shape[-2] % r:
        raise ShapeError(f"spatial size {input.shape[-2:]} not divisible by r = {r}")
    return PixelUnshuffle.apply(input, r=r)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of no tensors")
    if len(tensors) == 1:
        return tensors[0]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    return Concat.apply(*tensors, axis=axis)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=()):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        np.empty(x.shape, dtype=np.bool_).reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return Reshape.apply(x, shape=shape)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=()):
        self.axes = axes
        return x.transpose(axes)

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    return Transpose.apply(x, axes=axes)


class Gather(Function):
    name = "gather"

    def forward(self, x, indices=None):
        self.shape = x.shape
        self.indices = indices
        return x[indices]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.indices, grad)
        return (out,)


def gather(x: Tensor, indices) -> Tensor:
    """Select entries along axis 0 (duplicates allowed; gradients accumulate)"""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise ShapeError(f"gather index out of range for axis of size {x.shape[0]}")
    return Gather.apply(x, indices=indices)


# ---------------------------------------------------------------------------
# Dense layers and classification
# ---------------------------------------------------------------------------

class Linear(Function):
    name = "linear"

    def forward(self, x, w, b):
        self.saved = (x, w)
        return x @ w.T + b

    def backward(self, grad):
        x, w = self.saved
        return grad @ w, grad.T @ x, grad.sum(axis=0)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """(N, in) x (out, in)^T + bias -> (N, out)"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    return Linear.apply(x, weight, bias)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.saved = out
        return out

    def backward(self, grad):
        probs = np.exp(self.saved)
        return (grad - probs * grad.sum(axis=1, keepdims=True),)


class Softmax(Function):
    name = "softmax"

    def forward(self, x):
        shifted = np.exp(x - x.max(axis=1, keepdims=True))
        out = shifted / shifted.sum(axis=1, keepdims=True)
        self.saved = out
        return out

    def backward(self, grad):
        s = self.saved
        return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over (N, K)"""
    if x.ndim != 2:
        raise ShapeError(f"log_softmax expects (N, K), got {x.shape}")
    return LogSoftmax.apply(x)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over (N, K)"""
    if x.ndim != 2:
        raise ShapeError(f"softmax expects (N, K), got {x.shape}")
    return Softmax.apply(x)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale_


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4) -> float:
    """
    Compare analytic gradients of scalar ``fn(*inputs)`` against central differences.

    Args:
        fn: Function of the input tensors returning a scalar tensor
        inputs: Tensors with requires_grad=True (float64 recommended)
        h: Finite-difference step

    Returns:
        Worst relative error (L2 norm based) across inputs
    """
    for tensor in inputs:
        tensor.zero_grad()
    with ComputationTape() as tape:
        out = fn(*inputs)
    backward(out, tape)

    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad.copy()
        base = tensor.data.copy()
        numeric = np.zeros_like(base)
        for index in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[index] = base[index] + h
            tensor.assign(shifted)
            plus = fn(*inputs).item()
            shifted[index] = base[index] - h
            tensor.assign(shifted)
            minus = fn(*inputs).item()
            numeric[index] = (plus - minus) / (2.0 * h)
        tensor.assign(base)
        worst = max(worst, relative_error(analytic, numeric))
    logger.debug("gradcheck worst relative error %.3e", worst)
    return worst
