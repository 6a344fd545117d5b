"""
Autodiff Core

Dense tensors with a reverse-mode gradient tape. Every operation computes its
forward value with numpy and, when a tape is active and an input requires a
gradient, records a closure that maps the output gradient to input gradients.

Usage:
    with Tape() as tape:
        loss = mse(fully_connected(x, w, b), target)
        grads = tape.backward(loss)

Two precisions are available: "test" (float64, NaN/Inf rejected at tensor
creation) for oracle and gradient checks, and "fast" (float32) for training.
"""

import contextlib
import contextvars
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import LabelError, NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

_DTYPES = {"test": np.float64, "fast": np.float32}
_PRECISION = contextvars.ContextVar("autodiff_precision", default="test")
_ACTIVE_TAPE = contextvars.ContextVar("autodiff_active_tape", default=None)


# =============================================================================
# PRECISION
# =============================================================================

def set_precision(mode: str) -> contextvars.Token:
    """Select "test" (float64) or "fast" (float32) for new tensors"""
    if mode not in _DTYPES:
        raise ValueError(f"Precision must be one of {tuple(_DTYPES)}, got {mode!r}")
    return _PRECISION.set(mode)


def get_precision() -> str:
    return _PRECISION.get()


def get_dtype():
    return _DTYPES[_PRECISION.get()]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch precision"""
    token = set_precision(mode)
    try:
        yield
    finally:
        _PRECISION.reset(token)


# =============================================================================
# TENSOR AND TAPE
# =============================================================================

class Tensor:
    """
    Dense n-dimensional array with an optional gradient

    Attributes:
        data: numpy array (row-major) in the current precision
        requires_grad: Whether gradients flow to this tensor
        grad: Gradient from the last backward pass (leaves only)
        name: Optional parameter name
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=get_dtype())
        _check_finite(array)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=get_dtype())
        _check_finite(array)
        tensor.data = array
        tensor.requires_grad = False
        tensor.grad = None
        tensor.name = None
        tensor._tape = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> "GradientMap":
        """Backward pass on the tape that recorded this tensor"""
        if self._tape is None:
            raise TapeError("Tensor was not recorded on a tape")
        return self._tape.backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.data.dtype}>"


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Leaf tensor that receives gradients"""
    return Tensor(data, requires_grad=True, name=name)


def _check_finite(array: np.ndarray) -> None:
    if _PRECISION.get() == "test" and not np.all(np.isfinite(array)):
        raise NonFiniteError("Tensor contains NaN or Inf")


@dataclass
class _Record:
    out: Tensor
    inputs: Tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradientMap(dict):
    """Gradients keyed by leaf tensor"""

    def by_name(self) -> Dict[str, np.ndarray]:
        return {tensor.name: grad for tensor, grad in self.items() if tensor.name}


class Tape:
    """
    Records operations in execution order for one forward/backward pass

    A tape is single-use: backward() may be called once; a second call
    without a new forward pass raises TapeError.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.parameters: Dict[int, Tensor] = {}
        self._produced: set = set()
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward_fn) -> None:
        if self._consumed:
            raise TapeError("Tape already consumed by backward(); start a new tape")
        self.records.append(_Record(out, inputs, backward_fn))
        self._produced.add(id(out))
        for tensor in inputs:
            if tensor.requires_grad and id(tensor) not in self._produced:
                self.parameters[id(tensor)] = tensor

    def backward(self, loss: Tensor) -> GradientMap:
        """
        Propagate gradients from a scalar loss

        Args:
            loss: Single-element tensor recorded on this tape

        Returns:
            GradientMap from every reachable leaf to its gradient

        Raises:
            TapeError: Second call, or loss not recorded on this tape
            ShapeError: Loss is not a single element
        """
        if self._consumed:
            raise TapeError("backward() already called on this tape; re-run the forward pass")
        if loss.size != 1:
            raise ShapeError(f"Loss must have a single element, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("Loss was not recorded on this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for record in reversed(self.records):
            grad_out = grads.pop(id(record.out), None)
            if grad_out is None:
                continue
            for tensor, grad_in in zip(record.inputs, record.backward_fn(grad_out)):
                if grad_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grad_in if key not in grads else grads[key] + grad_in
        self._consumed = True

        result = GradientMap()
        for key, tensor in self.parameters.items():
            if key in grads:
                tensor.grad = grads[key]
                result[tensor] = grads[key]
        return result


def backward(loss: Tensor) -> GradientMap:
    """Run the backward pass for a loss on the tape that recorded it"""
    return loss.backward()


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording"""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _output(array: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(array)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(out, inputs, backward_fn)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# =============================================================================
# ELEMENTWISE AND STRUCTURAL OPERATIONS
# =============================================================================

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "add")
    return _output(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "subtract")
    return _output(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(x: Tensor, factor: float) -> Tensor:
    return _output(x.data * factor, (x,), lambda g: (g * factor,))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """
    Multiply elementwise; b may be (N, C) against a (N, C, H, W) (channel broadcast)
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _output(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if a.ndim == 4 and b.ndim == 2 and a.shape[:2] == b.shape:
        weights = b.data[:, :, None, None]

        def backward_fn(g):
            return g * weights, (g * a.data).sum(axis=(2, 3))

        return _output(a.data * weights, (a, b), backward_fn)
    raise ShapeError(f"elementwise_mul: cannot broadcast {b.shape} onto {a.shape}")


channel_mul = elementwise_mul


def sum_all(x: Tensor) -> Tensor:
    return _output(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, g, dtype=x.data.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _output(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _output(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _output(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(item, (slice, int, type(Ellipsis))) for item in items)


def getitem(x: Tensor, index) -> Tensor:
    """Index or slice a tensor; gradients scatter back to the selected entries"""
    basic = _is_basic_index(index)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _output(x.data[index], (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    split_points = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, split_points, axis=axis))

    return _output(data, tensors, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _output(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(values: np.ndarray) -> np.ndarray:
    out = np.empty_like(values)
    positive = values >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-values[positive]))
    exp_neg = np.exp(values[~positive])
    out[~positive] = exp_neg / (1.0 + exp_neg)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _output(s, (x,), lambda g: (g * s * (1.0 - s),))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of (N, C, H, W) by an integer factor"""
    if x.ndim != 4 or factor < 1:
        raise ShapeError(f"upsample_nearest expects (N, C, H, W) and factor >= 1, got {x.shape}, {factor}")
    n, c, h, w = x.shape
    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _output(data, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


# =============================================================================
# LAYERS
# =============================================================================

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    y = x W^T + b

    Args:
        x: (N, in)
        weight: (out, in)
        bias: (out,)
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: incompatible shapes x={x.shape} W={weight.shape} b={bias.shape}")

    def backward_fn(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _output(x.data @ weight.data.T + bias.data, (x, weight, bias), backward_fn)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2D cross-correlation

    Args:
        x: (N, C, H, W)
        weight: (O, C, kh, kw)
        bias: (O,)
        stride: Positive step
        padding: Zero padding on every side

    Returns:
        (N, O, floor((H + 2p - kh) / s) + 1, floor((W + 2p - kw) / s) + 1)
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: incompatible shapes x={x.shape} W={weight.shape} b={bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
    flat_weight = weight.data.reshape(o, -1)
    out = (cols @ flat_weight.T).reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def backward_fn(g):
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, o)
        grad_weight = (g_rows.T @ cols).reshape(weight.shape)
        grad_bias = g.sum(axis=(0, 2, 3))
        grad_cols = (g_rows @ flat_weight).reshape(n, out_h, out_w, c, kh, kw)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w] if padding else grad_padded
        return grad_x, grad_weight, grad_bias

    return _output(np.ascontiguousarray(out), (x, weight, bias), backward_fn)


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """
    Max pooling over (N, C, H, W); ties route the gradient to the first
    maximum in row-major window order
    """
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"max_pool2d: kernel {kernel} larger than input {h}x{w}")
    windows = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, out_h, out_w, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        ni, ci, hi, wi = np.indices(arg.shape)
        rows = hi * stride + arg // kernel
        cols = wi * stride + arg % kernel
        np.add.at(grad, (ni, ci, rows, cols), g)
        return (grad,)

    return _output(out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) mean over spatial positions"""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    count = h * w

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / count, x.shape).copy(),)

    return _output(x.data.mean(axis=(2, 3)), (x,), backward_fn)


def global_max_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) max over spatial positions (first maximum wins ties)"""
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        grad = np.zeros((n, c, h * w), dtype=x.data.dtype)
        np.put_along_axis(grad, arg[..., None], g[..., None], axis=-1)
        return (grad.reshape(x.shape),)

    return _output(out, (x,), backward_fn)


# =============================================================================
# LOSSES
# =============================================================================

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a numpy array (no gradient)"""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """
    Batch-mean cross-entropy between softmax(logits) and target distributions

    Args:
        logits: (N, K)
        targets: (N, K) rows that are probability distributions

    Raises:
        LabelError: Targets are not distributions
    """
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if logits.ndim != 2 or targets.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if np.any(targets < 0) or not np.allclose(targets.sum(axis=1), 1.0, atol=1e-6):
        raise LabelError("softmax_cross_entropy: targets must be non-negative rows summing to 1")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -(targets * log_probs).sum() / n

    def backward_fn(g):
        return (g * (np.exp(log_probs) - targets) / n,)

    return _output(np.array(loss), (logits,), backward_fn)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over all elements"""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _output(np.array((diff ** 2).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                                     normalizer: Optional[float] = None) -> Tensor:
    """
    Masked binary cross-entropy on logits, summed and divided by the mask count

    Args:
        logits: Any shape
        targets: 0/1 array of the same shape
        mask: 0/1 array of the same shape (0 = ignored)
        normalizer: Divisor (defaults to max(1, mask.sum()))
    """
    targets = np.asarray(targets, dtype=logits.data.dtype)
    mask = np.asarray(mask, dtype=logits.data.dtype)
    if targets.shape != logits.shape or mask.shape != logits.shape:
        raise ShapeError(f"binary_cross_entropy: shapes {logits.shape}, {targets.shape}, {mask.shape}")
    norm = float(normalizer) if normalizer is not None else max(1.0, float(mask.sum()))
    z = logits.data
    per_element = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    loss = (mask * per_element).sum() / norm
    probabilities = _sigmoid(z)

    def backward_fn(g):
        return (g * (probabilities - targets) * mask / norm,)

    return _output(np.array(loss), (logits,), backward_fn)


def smooth_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray, normalizer: float,
              beta: float = 1.0) -> Tensor:
    """Masked smooth-L1 (Huber with transition beta), summed and divided by normalizer"""
    target = np.asarray(target, dtype=pred.data.dtype)
    mask = np.asarray(mask, dtype=pred.data.dtype)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise ShapeError(f"smooth_l1: shapes {pred.shape}, {target.shape}, {mask.shape}")
    norm = max(float(normalizer), 1.0)
    diff = pred.data - target
    abs_diff = np.abs(diff)
    quadratic = abs_diff < beta
    per_element = np.where(quadratic, 0.5 * diff ** 2 / beta, abs_diff - 0.5 * beta)
    loss = (mask * per_element).sum() / norm

    def backward_fn(g):
        slope = np.where(quadratic, diff / beta, np.sign(diff))
        return (g * slope * mask / norm,)

    return _output(np.array(loss), (pred,), backward_fn)


# =============================================================================
# GRADIENT CHECKING
# =============================================================================

@dataclass
class GradcheckResult:
    """Outcome of a finite-difference comparison"""
    max_rel_error: float
    checked: int
    skipped: int
    per_param: Dict[str, float] = field(default_factory=dict)

    def __float__(self):
        return self.max_rel_error


def relative_error(g_ad: float, g_fd: float) -> float:
    return abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)


def gradient_check(
    scalar_fn: Callable[[], Tensor],
    params: Union[Sequence[Tensor], Dict[str, Tensor]],
    eps: float = 1e-5,
    n_coords: int = 100,
    seed: int = 0,
) -> GradcheckResult:
    """
    Compare tape gradients with central finite differences

    Coordinates are drawn in random order per parameter until n_coords are
    checked (or the parameter is exhausted). A coordinate whose central
    difference at eps disagrees with the one at eps / 10 sits on a kink
    (relu, max) and is replaced by the next coordinate; so is a coordinate whose
    gradient lies below the roundoff floor of the finite difference.

    Args:
        scalar_fn: Builds the scalar loss from the current parameter values
        params: Tensors to check (in place perturbation)
        eps: Finite-difference step
        n_coords: Coordinates per parameter
        seed: Coordinate sampling seed

    Returns:
        GradcheckResult; float(result) is the max relative error
    """
    named = params.items() if isinstance(params, dict) else [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    named = list(named)
    for _, tensor in named:
        tensor.requires_grad = True
        if not tensor.data.flags.c_contiguous:
            tensor.data = np.ascontiguousarray(tensor.data)

    with Tape() as tape:
        loss = scalar_fn()
        grads = tape.backward(loss)
    loss_scale = max(1.0, abs(loss.item()))
    # below this, central differences are dominated by roundoff of the loss
    noise_floor = 1e-11 * loss_scale / eps

    def evaluate() -> float:
        with no_tape():
            return scalar_fn().item()

    def central(flat: np.ndarray, index: int, step: float) -> float:
        original = flat[index]
        flat[index] = original + step
        upper = evaluate()
        flat[index] = original - step
        lower = evaluate()
        flat[index] = original
        return (upper - lower) / (2.0 * step)

    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    per_param: Dict[str, float] = {}
    for name, tensor in named:
        analytic = grads.get(tensor)
        analytic = np.zeros_like(tensor.data) if analytic is None else analytic
        analytic_flat = analytic.reshape(-1)
        flat = tensor.data.reshape(-1)
        param_worst, param_checked = 0.0, 0
        for index in rng.permutation(flat.size):
            if param_checked >= n_coords:
                break
            coarse = central(flat, int(index), eps)
            fine = central(flat, int(index), eps / 10.0)
            if abs(coarse - fine) > 1e-5 * max(abs(coarse), abs(fine)) + 1e-9 * loss_scale:
                skipped += 1
                continue
            g_ad = float(analytic_flat[index])
            if max(abs(g_ad), abs(coarse)) < noise_floor:
                skipped += 1
                continue
            error = relative_error(g_ad, coarse)
            param_worst = max(param_worst, error)
            param_checked += 1
        per_param[name] = param_worst
        worst = max(worst, param_worst)
        checked += param_checked
        logger.debug("gradcheck %s: %d coords, max rel error %.3e", name, param_checked, param_worst)
    return GradcheckResult(max_rel_error=worst, checked=checked, skipped=skipped, per_param=per_param)


# =============================================================================
# OPTIMIZER
# =============================================================================

@dataclass(frozen=True)
class SgdConfig:
    """
    SGD with momentum and step decay

    A learning rate of 0 is accepted (frozen run); negative values are not.
    """
    learning_rate: float = 0.002
    momentum: float = 0.9
    decay_epochs: Tuple[int, ...] = (10, 12)
    decay_factor: float = 0.1

    def __post_init__(self):
        if not (self.learning_rate >= 0):
            raise ValueError(f"Learning rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.momentum < 1):
            raise ValueError(f"Momentum must be in [0, 1), got {self.momentum}")
        if not (self.decay_factor > 0):
            raise ValueError(f"Decay factor must be positive, got {self.decay_factor}")
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))


def learning_rate_at(config: SgdConfig, epoch: int) -> float:
    """base * factor ** (number of decay epochs <= epoch)"""
    decays = sum(1 for e in config.decay_epochs if epoch >= e)
    return config.learning_rate * config.decay_factor ** decays


def sgd_step(params: Iterable[Tensor], grads: Dict[Tensor, np.ndarray], config: SgdConfig,
             epoch: int, velocities: Dict[Tensor, np.ndarray]) -> None:
    """
    One momentum update in place: v <- m v + g; p <- p - lr(epoch) v

    Parameters without a gradient are left untouched.
    """
    lr = learning_rate_at(config, epoch)
    for tensor in params:
        grad = grads.get(tensor)
        if grad is None:
            continue
        velocity = velocities.get(tensor)
        velocity = grad.copy() if velocity is None else config.momentum * velocity + grad
        velocities[tensor] = velocity
        tensor.data -= (lr * velocity).astype(tensor.data.dtype)


class SgdOptimizer:
    """Holds velocities for a fixed parameter list"""

    def __init__(self, params: Sequence[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.velocities: Dict[Tensor, np.ndarray] = {}

    def step(self, grads: Dict[Tensor, np.ndarray], epoch: int) -> None:
        sgd_step(self.params, grads, self.config, epoch, self.velocities)


def create_optimizer(params: Sequence[Tensor], config: Optional[SgdConfig] = None) -> SgdOptimizer:
    """Factory function for an SgdOptimizer"""
    return SgdOptimizer(params, config or SgdConfig())
