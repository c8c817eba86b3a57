"""@ingroup pyeegmae
@file
A minimal dense tensor with reverse-mode gradients, backed by numpy.

Every operation that involves a tensor requiring gradients records its parents and a reverse rule on the result.
backward() sorts the recorded graph into a GradTape and replays it in reverse; the tape is consumed by the replay.
"""
import contextlib
import logging
import math
import threading
from enum import Enum

import numpy as np
from scipy.stats import truncnorm

from .entity import ContractError, PyEegMaeError

log = logging.getLogger(__name__)

_GELU_SCALE = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

class Precision(Enum):
    """Models the two supported scalar precisions.
    """
    F32 = 'f32'
    F64 = 'f64'

    @property
    def dtype(self):
        """@returns The numpy dtype for the precision.
        """
        return np.float32 if self is Precision.F32 else np.float64

class DimensionError(PyEegMaeError):
    """Raised if tensor shapes are incompatible with an operation.
    """
    pass

class TapeConsumed(ContractError):
    """Raised if backward() is called a second time on a graph that has already been replayed.
    """
    pass

_state = threading.local()

def grad_enabled():
    """Returns whether operations currently record the graph.

    @returns A boolean.
    """
    return getattr(_state, 'enabled', True)

@contextlib.contextmanager
def no_grad():
    """A context in which no graph is recorded; used for evaluation passes and finite differences.
    """
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous

def seeded_generator(seed, *keys):
    """Builds a Philox (64-bit counter-based) generator for a seed and an optional sub-stream key.

    @param seed An unsigned integer.
    @param keys Unsigned integers selecting an independent sub-stream.
    @returns A numpy.random.Generator.
    """
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))

def truncated_normal(rng, shape, std=0.02, dtype=np.float32):
    """Draws from a normal distribution truncated at two standard deviations.

    @param rng A numpy.random.Generator.
    @param shape The output shape.
    @param std The standard deviation before truncation.
    @param dtype The output dtype.
    @returns A numpy array.
    """
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(shape)

def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad

class Tensor(object):
    """A dense row-major tensor that optionally participates in gradient computation.

    Tensors are treated as immutable once constructed; operations always return new tensors.
    """
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        """@param data An array-like of real values.
        @param requires_grad Whether gradients should be accumulated into this (leaf) tensor.
        @param dtype Optionally, the numpy dtype; integer input defaults to float64.
        @param name Optionally, a name used in diagnostics.
        @throws DimensionError if any dimension is not strictly positive.
        """
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        if any(size <= 0 for size in array.shape):
            raise DimensionError('tensor dimensions must be positive, got {}'.format(array.shape))
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        """@returns Whether the tensor was created directly rather than by an operation.
        """
        return self._backward is None and not self._consumed

    def numpy(self):
        """@returns The underlying numpy array (not a copy).
        """
        return self.data

    def item(self):
        """@returns The single value of a one-element tensor as a float.
        """
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        """@returns A new leaf tensor sharing data but outside any graph.
        """
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return 'Tensor(shape={}, dtype={}{})'.format(self.shape, self.dtype,
                                                     ', requires_grad=True' if self.requires_grad else '')

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return expand(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log_(self)

    def tanh(self):
        return tanh(self)

def parameter(data, name=None):
    """Creates a leaf tensor that requires gradients.

    @returns A Tensor.
    """
    return Tensor(data, requires_grad=True, name=name)

def as_tensor(value, like=None):
    """Wraps a constant as a tensor, matching the dtype of @p like for plain numbers and arrays.

    @returns A Tensor (the argument itself if it already is one).
    """
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))

def _record(data, parents, backward, op):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out

def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b

def add(a, b):
    a, b = _pair(a, b)
    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)
    return _record(a.data + b.data, (a, b), backward, 'add')

def sub(a, b):
    a, b = _pair(a, b)
    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)
    return _record(a.data - b.data, (a, b), backward, 'sub')

def mul(a, b):
    a, b = _pair(a, b)
    def backward(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)
    return _record(a.data * b.data, (a, b), backward, 'mul')

def div(a, b):
    a, b = _pair(a, b)
    def backward(grad):
        return (_unbroadcast(grad / b.data, a.shape),
                _unbroadcast(-grad * a.data / (b.data * b.data), b.shape))
    return _record(a.data / b.data, (a, b), backward, 'div')

def neg(a):
    return _record(-a.data, (a,), lambda grad: (-grad,), 'neg')

def power(a, exponent):
    """Raises @p a to a constant power.
    """
    exponent = float(exponent)
    def backward(grad):
        return (grad * exponent * a.data ** (exponent - 1.0),)
    return _record(a.data ** exponent, (a,), backward, 'pow')

def exp(a):
    out = np.exp(a.data)
    return _record(out, (a,), lambda grad: (grad * out,), 'exp')

def log_(a):
    return _record(np.log(a.data), (a,), lambda grad: (grad / a.data,), 'log')

def sqrt(a):
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda grad: (grad * 0.5 / out,), 'sqrt')

def tanh(a):
    out = np.tanh(a.data)
    return _record(out, (a,), lambda grad: (grad * (1.0 - out * out),), 'tanh')

def gelu(a):
    """GELU activation, tanh approximation.
    """
    x = a.data
    inner = np.tanh(_GELU_SCALE * (x + _GELU_CUBIC * x ** 3))
    out = 0.5 * x * (1.0 + inner)
    def backward(grad):
        slope = 0.5 * (1.0 + inner) + 0.5 * x * (1.0 - inner * inner) * _GELU_SCALE * (1.0 + 3.0 * _GELU_CUBIC * x * x)
        return (grad * slope,)
    return _record(out.astype(x.dtype, copy=False), (a,), backward, 'gelu')

def matmul(a, b):
    """Batched matrix product of [..., m, k] and [..., k, n] with broadcast batch dimensions.

    @throws DimensionError naming both shapes if the inner dimensions differ or the batch dimensions do not broadcast.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError('cannot multiply shapes {} and {}'.format(a.shape, b.shape))
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError('batch dimensions of {} and {} do not broadcast'.format(a.shape, b.shape))
    def backward(grad):
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)
    return _record(np.matmul(a.data, b.data), (a, b), backward, 'matmul')

def linear(x, weight, bias=None):
    """Applies y = x Wᵀ + b over the last axis of @p x, with W stored as [out, in].

    Leading axes are folded into one before the product so the reverse rule never materializes per-row weight grads.
    """
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError('cannot apply weight {} to input {}'.format(weight.shape, x.shape))
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    if x.ndim != 2:
        out = reshape(out, lead + (weight.shape[0],))
    return out

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))

def reduce_sum(a, axis=None, keepdims=False):
    axes = _normalize_axis(axis, a.ndim)
    def backward(grad):
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, a.shape).copy(),)
    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, 'sum')

def reduce_mean(a, axis=None, keepdims=False):
    axes = _normalize_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return div(reduce_sum(a, axis=axes, keepdims=keepdims), float(count))

def reshape(a, shape):
    original = a.shape
    return _record(a.data.reshape(shape), (a,), lambda grad: (grad.reshape(original),), 'reshape')

def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda grad: (np.transpose(grad, inverse),), 'transpose')

def expand(a, shape):
    """Broadcasts @p a to @p shape; the reverse rule sums over the broadcast axes.
    """
    original = a.shape
    return _record(np.broadcast_to(a.data, shape), (a,), lambda grad: (_unbroadcast(grad, original),), 'expand')

def take(a, index):
    """Basic or advanced indexing; the reverse rule scatters with np.add.at.
    """
    def backward(grad):
        full = np.zeros(a.shape, dtype=grad.dtype)
        np.add.at(full, index, grad)
        return (full,)
    return _record(np.array(a.data[index]), (a,), backward, 'take')

def where(condition, a, b):
    """Selects from @p a where @p condition holds and from @p b elsewhere.

    @param condition A boolean numpy array broadcastable to the operands.
    """
    a, b = _pair(a, b)
    condition = np.asarray(condition, dtype=bool)
    def backward(grad):
        return (_unbroadcast(np.where(condition, grad, 0), a.shape),
                _unbroadcast(np.where(condition, 0, grad), b.shape))
    out = np.where(condition, a.data, b.data)
    return _record(out, (a, b), backward, 'where')

def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    def backward(grad):
        return tuple(np.split(grad, bounds, axis=axis))
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, 'concatenate')

def softmax(x, axis=-1):
    """Numerically stable softmax; rows whose entries are all -inf produce all-zero weights.
    """
    peak = np.max(x.data, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    weights = np.exp(x.data - peak)
    total = weights.sum(axis=axis, keepdims=True)
    out = weights / np.where(total == 0.0, 1.0, total)
    def backward(grad):
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)
    return _record(out.astype(x.dtype, copy=False), (x,), backward, 'softmax')

def log_softmax(x, axis=-1):
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    def backward(grad):
        return (grad - np.exp(out) * grad.sum(axis=axis, keepdims=True),)
    return _record(out, (x,), backward, 'log_softmax')

def layer_norm(x, gain, bias, eps=1e-5):
    """Normalizes the last axis of @p x to zero mean and unit variance, then applies gain and bias.
    """
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError('layer norm of {} with gain {} and bias {}'.format(x.shape, gain.shape, bias.shape))
    width = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std
    def backward(grad):
        grad_norm = grad * gain.data
        grad_x = inv_std / width * (width * grad_norm - grad_norm.sum(axis=-1, keepdims=True)
                                    - normalized * (grad_norm * normalized).sum(axis=-1, keepdims=True))
        lead = tuple(range(grad.ndim - 1))
        return grad_x, (grad * normalized).sum(axis=lead), grad.sum(axis=lead)
    out = normalized * gain.data + bias.data
    return _record(out.astype(x.dtype, copy=False), (x, gain, bias), backward, 'layer_norm')

class GradTape(object):
    """The topologically ordered record of the operations that produced a loss.

    Every operation appears after all of its inputs. Replaying in reverse delivers each leaf's gradient once.
    """
    def __init__(self, loss):
        """@param loss A scalar Tensor produced with gradient recording enabled.
        """
        self.loss = loss
        self.nodes = self._order(loss)

    @staticmethod
    def _order(root):
        order, visited = [], set()
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
            for parent in node._parents: #pylint: disable=protected-access
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def replay(self):
        """Propagates gradients from the loss to every leaf that requires them, then consumes the tape.

        @returns The list of leaves that received a gradient.
        """
        pending = {id(self.loss): np.ones(self.loss.shape, dtype=self.loss.dtype)}
        leaves = []
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None: #pylint: disable=protected-access
                node.grad = grad if node.grad is None else node.grad + grad
                leaves.append(node)
                continue
            parent_grads = node._backward(grad) #pylint: disable=protected-access
            for parent, parent_grad in zip(node._parents, parent_grads): #pylint: disable=protected-access
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        for node in self.nodes:
            if node._backward is not None: #pylint: disable=protected-access
                node._backward = None #pylint: disable=protected-access
                node._parents = () #pylint: disable=protected-access
                node._consumed = True #pylint: disable=protected-access
        return leaves

def backward(loss):
    """Computes gradients of a scalar loss for every leaf tensor that requires them.

    Gradients are accumulated into each leaf's `grad` attribute.

    @param loss A scalar Tensor.
    @returns The list of leaves that received a gradient.
    @throws ContractError if @p loss is not a scalar or does not depend on any parameter.
    @throws TapeConsumed if the graph behind @p loss was already replayed.
    """
    if loss.shape != ():
        raise ContractError('backward needs a scalar loss, got shape {}'.format(loss.shape))
    if loss._consumed: #pylint: disable=protected-access
        raise TapeConsumed('the graph behind this loss was already replayed; run the forward pass again')
    if not loss.requires_grad:
        raise ContractError('loss does not depend on any tensor that requires gradients')
    tape = GradTape(loss)
    log.debug('Replaying tape of %d nodes', len(tape.nodes))
    return tape.replay()

def gradient_check(loss_fn, tensors, h=1e-5):
    """Compares reverse-mode gradients against central finite differences.

    @param loss_fn A callable returning a scalar Tensor computed from @p tensors.
    @param tensors A list of (name, Tensor) leaves; should be 64-bit.
    @param h The finite difference step.
    @returns A list of (name, relative error) pairs, the error being |analytic - numeric| / max(|analytic|, |numeric|)
    in the Euclidean norm over each tensor.
    """
    for _, tensor in tensors:
        tensor.zero_grad()
    backward(loss_fn())
    results = []
    with no_grad():
        for name, tensor in tensors:
            analytic = np.zeros(tensor.shape) if tensor.grad is None else np.array(tensor.grad, dtype=np.float64)
            numeric = np.zeros(tensor.shape)
            flat = tensor.data.reshape(-1)
            for position in range(flat.size):
                original = flat[position]
                flat[position] = original + h
                upper = loss_fn().item()
                flat[position] = original - h
                lower = loss_fn().item()
                flat[position] = original
                numeric.reshape(-1)[position] = (upper - lower) / (2.0 * h)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
            error = 0.0 if scale == 0.0 else float(np.linalg.norm(analytic - numeric) / scale)
            results.append((name, error))
    return results
