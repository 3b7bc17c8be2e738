# Copyright (c) 2018 David Preece, All rights reserved.
#
# Permission to use, copy, modify, and/or distribute this software for any
# purpose with or without fee is hereby granted.
#
# THE SOFTWARE IS PROVIDED "AS IS" AND THE AUTHOR DISCLAIMS ALL WARRANTIES
# WITH REGARD TO THIS SOFTWARE INCLUDING ALL IMPLIED WARRANTIES OF
# MERCHANTABILITY AND FITNESS. IN NO EVENT SHALL THE AUTHOR BE LIABLE FOR
# ANY SPECIAL, DIRECT, INDIRECT, OR CONSEQUENTIAL DAMAGES OR ANY DAMAGES
# WHATSOEVER RESULTING FROM LOSS OF USE, DATA OR PROFITS, WHETHER IN AN
# ACTION OF CONTRACT, NEGLIGENCE OR OTHER TORTIOUS ACTION, ARISING OUT OF
# OR IN CONNECTION WITH THE USE OR PERFORMANCE OF THIS SOFTWARE.

import numpy as np
from enum import Enum
from typing import Optional, List, Dict, Tuple, Union, NamedTuple
from numpy.lib.stride_tricks import sliding_window_view
from . import ShapeError

LOG_FLOOR = 1e-300
MAX_RANK = 4


class OpKind(Enum):
    CONV2D = 'conv2d'
    MAXPOOL = 'maxpool'
    RELU = 'relu'
    DENSE = 'dense'
    SOFTMAX = 'softmax'
    LOG = 'log'
    ADD = 'add'
    SUB = 'sub'
    MUL = 'elementwise_mul'
    SCALAR_MUL = 'scalar_mul'
    TANH = 'tanh'
    CLIP = 'clip'
    SUM = 'sum'
    MEAN = 'mean'
    CROSS_ENTROPY = 'cross_entropy_with_logits'
    NEGATE = 'negate'
    DROPOUT = 'dropout'
    RESHAPE = 'reshape'

    def __str__(self):
        return self.value


class Tensor:
    """A dense float64 array, optionally recorded on a Tape.

    :param values: Anything numpy can turn into an array of rank 0-4.
    :param requires_grad: Whether backward should report a gradient for this tensor.
    :param node_id: The handle on the tape, set when the tape records the tensor."""
    __slots__ = ('values', 'requires_grad', 'node_id')

    def __init__(self, values, *, requires_grad: bool=False, node_id: Optional[int]=None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim > MAX_RANK:
            raise ShapeError('tensor', (values.shape,), "rank above %d" % MAX_RANK)
        self.values = values
        self.requires_grad = requires_grad
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return "<Tensor shape=%s node=%s%s>" % (self.shape, self.node_id, ' grad' if self.requires_grad else '')


class TapeNode(NamedTuple):
    op: OpKind
    inputs: Tuple[int, ...]
    output: int
    saved: dict
    params: dict


class Gradients(dict):
    """node_id -> gradient array, with a lookup by tensor."""
    def wrt(self, tensor: Tensor) -> np.ndarray:
        try:
            return self[tensor.node_id]
        except KeyError:
            raise KeyError("No gradient was recorded for: " + repr(tensor))


class Tape:
    """Records ops as they are run so they can be differentiated in reverse.

    :param training: Enables dropout.
    :param rng: A numpy Generator, only needed when dropout is active.

    A tape has a single writer. Build one per thread."""

    def __init__(self, *, training: bool=False, rng: Optional[np.random.Generator]=None):
        self.training = training
        self.rng = rng
        self.tensors = []
        self.nodes = []

    def leaf(self, values, *, requires_grad: bool=False) -> Tensor:
        """Record a tensor that is not the output of an op.

        :param values: The array.
        :param requires_grad: True for inputs we want gradients for.
        :return: The recorded Tensor."""
        if isinstance(values, Tensor):
            # an unrecorded tensor is adopted, a recorded one is copied by value
            t = values if values.node_id is None else Tensor(values.values)
        else:
            t = Tensor(values)
        t.requires_grad = requires_grad
        t.node_id = len(self.tensors)
        self.tensors.append(t)
        return t

    def constant(self, values) -> Tensor:
        return self.leaf(values, requires_grad=False)

    def variable(self, values) -> Tensor:
        return self.leaf(values, requires_grad=True)

    def forward(self, op: OpKind, *inputs: Union[Tensor, np.ndarray, float], **params) -> Tensor:
        """Run an op and record it.

        :param op: The OpKind.
        :param inputs: Tensors on this tape; raw arrays or numbers are recorded as constants.
        :param params: Op hyperparameters (clip lo/hi, reduction axis, dropout rate...).
        :return: The output Tensor."""
        try:
            forward_rule, _, arity = _RULES[op]
        except KeyError:
            raise ValueError("Unsupported op kind: " + str(op))
        if len(inputs) != arity:
            raise ShapeError(op, tuple(np.shape(i.values if isinstance(i, Tensor) else i) for i in inputs),
                             "expected %d inputs" % arity)
        tensors = [self._on_tape(i) for i in inputs]
        values = [t.values for t in tensors]
        out_values, saved = forward_rule(op, values, params, self)
        out_values = np.asarray(out_values, dtype=np.float64)
        if not np.all(np.isfinite(out_values)):
            raise RuntimeError("Non-finite output from %s with input shapes %s" %
                               (op, ', '.join(str(v.shape) for v in values)))
        out = Tensor(out_values, requires_grad=any(t.requires_grad for t in tensors), node_id=len(self.tensors))
        self.tensors.append(out)
        self.nodes.append(TapeNode(op, tuple(t.node_id for t in tensors), out.node_id, saved, params))
        return out

    def backward(self, output: Tensor) -> Gradients:
        """Reverse-mode pass from a scalar.

        :param output: A rank-0 tensor recorded on this tape.
        :return: A Gradients map holding an array for every requires_grad tensor (zeros where unused)."""
        if output.values.ndim != 0:
            raise ValueError("backward needs a rank-0 output, not shape %s" % (output.shape,))
        self._ensure_recorded(output)
        grads = {output.node_id: np.ones(())}
        for node in reversed(self.nodes):
            if node.output > output.node_id:
                continue
            upstream = grads.get(node.output)
            if upstream is None:
                continue
            ins = [self.tensors[i] for i in node.inputs]
            needs = tuple(t.requires_grad for t in ins)
            if not any(needs):
                continue
            backward_rule = _RULES[node.op][1]
            parts = backward_rule(node.op, upstream, [t.values for t in ins], self.tensors[node.output].values,
                                  node.saved, node.params, needs)
            for idx, part, need in zip(node.inputs, parts, needs):
                if not need or part is None:
                    continue
                grads[idx] = grads[idx] + part if idx in grads else part
        result = Gradients()
        for t in self.tensors:
            if t.requires_grad:
                found = grads.get(t.node_id)
                result[t.node_id] = np.zeros_like(t.values) if found is None else np.asarray(found)
        return result

    def kink_signature(self) -> List[np.ndarray]:
        """The discrete decisions taken by relu, maxpool and clip ops during this tape's forward pass."""
        return [node.saved['decision'] for node in self.nodes if 'decision' in node.saved]

    def _on_tape(self, value) -> Tensor:
        if isinstance(value, Tensor):
            if value.node_id is None:
                return self.leaf(value, requires_grad=value.requires_grad)
            self._ensure_recorded(value)
            return value
        return self.constant(value)

    def _ensure_recorded(self, tensor: Tensor):
        if tensor.node_id is None or tensor.node_id >= len(self.tensors) or self.tensors[tensor.node_id] is not tensor:
            raise ValueError("Tensor is not recorded on this tape: " + repr(tensor))

    def __repr__(self):
        return "<Tape nodes=%d tensors=%d%s>" % (len(self.nodes), len(self.tensors),
                                                  ' training' if self.training else '')


def forward(tape: Tape, op: OpKind, *inputs, **params) -> Tensor:
    return tape.forward(op, *inputs, **params)


def backward(tape: Tape, scalar_output: Tensor) -> Gradients:
    return tape.backward(scalar_output)


def same_kinks(first: List[np.ndarray], second: List[np.ndarray]) -> bool:
    """True if two kink signatures took every discrete decision the same way."""
    if len(first) != len(second):
        return False
    return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(first, second))


# the rules
# forward: (op, values, params, tape) -> (output, saved)
# backward: (op, upstream, values, output, saved, params, needs) -> one gradient (or None) per input

def _broadcast_shape(op, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, (a.shape, b.shape), "not broadcastable")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _same_padding(kernel: Tuple[int, int]) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    kh, kw = kernel
    return ((kh - 1) // 2, kh - 1 - (kh - 1) // 2), ((kw - 1) // 2, kw - 1 - (kw - 1) // 2)


def _conv2d_forward(op, values, params, tape):
    x, w, b = values
    padding = params.get('padding', 'valid')
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1 or x.shape[3] != w.shape[2] or w.shape[3] != b.shape[0]:
        raise ShapeError(op, (x.shape, w.shape, b.shape), "want (n,h,w,c) (kh,kw,c,f) (f,)")
    if padding not in ('valid', 'same'):
        raise ValueError("conv2d padding is either 'valid' or 'same', not: " + str(padding))
    pad = None
    if padding == 'same':
        pad = _same_padding(w.shape[:2])
        x = np.pad(x, ((0, 0), pad[0], pad[1], (0, 0)))
    if x.shape[1] < w.shape[0] or x.shape[2] < w.shape[1]:
        raise ShapeError(op, (x.shape, w.shape), "kernel larger than image")
    cols = sliding_window_view(x, w.shape[:2], axis=(1, 2))
    out = np.tensordot(cols, w.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2])) + b
    return out, {'padded': x if pad is not None else None, 'pad': pad}


def _conv2d_backward(op, upstream, values, output, saved, params, needs):
    x, w, b = values
    kh, kw = w.shape[:2]
    dx = dw = db = None
    if needs[1]:
        xp = saved['padded'] if saved['padded'] is not None else x
        cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        dw = np.tensordot(cols, upstream, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    if needs[2]:
        db = upstream.sum(axis=(0, 1, 2))
    if needs[0]:
        gp = np.pad(upstream, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        windows = sliding_window_view(gp, (kh, kw), axis=(1, 2))
        dx = np.tensordot(windows, w[::-1, ::-1].transpose(3, 0, 1, 2), axes=([3, 4, 5], [0, 1, 2]))
        pad = saved['pad']
        if pad is not None:
            dx = dx[:, pad[0][0]:pad[0][0] + x.shape[1], pad[1][0]:pad[1][0] + x.shape[2], :]
    return dx, dw, db


def _pool_blocks(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    return blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)


def _maxpool_forward(op, values, params, tape):
    x, = values
    if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(op, (x.shape,), "want (n,h,w,c) with h,w >= 2")
    blocks = _pool_blocks(x)
    winners = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0]
    return out, {'decision': winners}


def _maxpool_backward(op, upstream, values, output, saved, params, needs):
    x, = values
    n, ho, wo, c = upstream.shape
    routed = (np.arange(4) == saved['decision'][..., None]) * upstream[..., None]
    routed = routed.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    dx = np.zeros_like(x)
    dx[:, :2 * ho, :2 * wo, :] = routed
    return dx,


def _relu_forward(op, values, params, tape):
    x, = values
    active = x > 0
    return np.where(active, x, 0.0), {'decision': active}


def _relu_backward(op, upstream, values, output, saved, params, needs):
    return upstream * saved['decision'],


def _dense_forward(op, values, params, tape):
    x, w, b = values
    if x.ndim not in (1, 2) or w.ndim != 2 or b.ndim != 1 or x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(op, (x.shape, w.shape, b.shape), "want (n,d) or (d,), (d,m), (m,)")
    return x @ w + b, {}


def _dense_backward(op, upstream, values, output, saved, params, needs):
    x, w, b = values
    dx = upstream @ w.T if needs[0] else None
    dw = db = None
    if needs[1]:
        dw = np.outer(x, upstream) if x.ndim == 1 else x.T @ upstream
    if needs[2]:
        db = upstream if upstream.ndim == 1 else upstream.sum(axis=0)
    return dx, dw, db


def _softmax_forward(op, values, params, tape):
    x, = values
    if x.ndim == 0:
        raise ShapeError(op, (x.shape,), "softmax needs at least one axis")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), {}


def _softmax_backward(op, upstream, values, output, saved, params, needs):
    return output * (upstream - (upstream * output).sum(axis=-1, keepdims=True)),


def _log_forward(op, values, params, tape):
    x, = values
    return np.log(np.maximum(x, LOG_FLOOR)), {}


def _log_backward(op, upstream, values, output, saved, params, needs):
    x, = values
    above = x > LOG_FLOOR
    return np.where(above, upstream / np.where(above, x, 1.0), 0.0),


def _binary_forward(op, values, params, tape):
    a, b = values
    _broadcast_shape(op, a, b)
    if op is OpKind.ADD:
        return a + b, {}
    if op is OpKind.SUB:
        return a - b, {}
    return a * b, {}


def _binary_backward(op, upstream, values, output, saved, params, needs):
    a, b = values
    if op is OpKind.ADD:
        da, db = upstream, upstream
    elif op is OpKind.SUB:
        da, db = upstream, -upstream
    else:
        da, db = upstream * b, upstream * a
    return (_unbroadcast(da, a.shape) if needs[0] else None,
            _unbroadcast(db, b.shape) if needs[1] else None)


def _scalar_mul_forward(op, values, params, tape):
    return float(params['scalar']) * values[0], {}


def _scalar_mul_backward(op, upstream, values, output, saved, params, needs):
    return float(params['scalar']) * upstream,


def _tanh_forward(op, values, params, tape):
    return np.tanh(values[0]), {}


def _tanh_backward(op, upstream, values, output, saved, params, needs):
    return upstream * (1.0 - output * output),


def _clip_forward(op, values, params, tape):
    x, = values
    lo, hi = float(params.get('lo', -np.inf)), float(params.get('hi', np.inf))
    if lo > hi:
        raise ValueError("clip needs lo <= hi, got %r > %r" % (lo, hi))
    # boundary counts as inside
    inside = (x >= lo) & (x <= hi)
    return np.clip(x, lo, hi), {'decision': inside}


def _clip_backward(op, upstream, values, output, saved, params, needs):
    return upstream * saved['decision'],


def _reduce_forward(op, values, params, tape):
    x, = values
    axis = params.get('axis')
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(op, (x.shape,), "no axis %d" % axis)
    if op is OpKind.SUM:
        return x.sum(axis=axis), {}
    if x.size == 0:
        raise ShapeError(op, (x.shape,), "mean of an empty tensor")
    return x.mean(axis=axis), {}


def _reduce_backward(op, upstream, values, output, saved, params, needs):
    x, = values
    axis = params.get('axis')
    grad = upstream if axis is None else np.expand_dims(upstream, axis)
    grad = np.broadcast_to(grad, x.shape)
    if op is OpKind.MEAN:
        grad = grad / (x.size if axis is None else x.shape[axis])
    return np.array(grad),


def _cross_entropy_forward(op, values, params, tape):
    z, t = values
    if z.shape != t.shape or z.ndim not in (1, 2):
        raise ShapeError(op, (z.shape, t.shape), "logits and targets need the same (k,) or (n,k) shape")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return -(t * log_probs).sum(axis=-1), {'log_probs': log_probs}


def _cross_entropy_backward(op, upstream, values, output, saved, params, needs):
    z, t = values
    log_probs = saved['log_probs']
    up = np.expand_dims(upstream, -1)
    dz = (np.exp(log_probs) * t.sum(axis=-1, keepdims=True) - t) * up if needs[0] else None
    dt = -log_probs * up if needs[1] else None
    return dz, dt


def _negate_forward(op, values, params, tape):
    return -values[0], {}


def _negate_backward(op, upstream, values, output, saved, params, needs):
    return -upstream,


def _dropout_forward(op, values, params, tape):
    x, = values
    rate = float(params.get('rate', 0.0))
    if not 0.0 <= rate < 1.0:
        raise ValueError("Dropout rate needs to be in [0, 1), not: %r" % rate)
    if rate == 0.0 or (params.get('train_only', True) and not tape.training):
        return x.copy(), {'mask': None}
    if tape.rng is None:
        raise ValueError("An active dropout needs a tape with a seeded generator")
    mask = (tape.rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, {'mask': mask}


def _dropout_backward(op, upstream, values, output, saved, params, needs):
    mask = saved['mask']
    return upstream if mask is None else upstream * mask,


def _reshape_forward(op, values, params, tape):
    x, = values
    try:
        return x.reshape(params['shape']), {}
    except ValueError:
        raise ShapeError(op, (x.shape, tuple(params['shape'])), "element counts differ")


def _reshape_backward(op, upstream, values, output, saved, params, needs):
    return upstream.reshape(values[0].shape),


_RULES = {
    OpKind.CONV2D: (_conv2d_forward, _conv2d_backward, 3),
    OpKind.MAXPOOL: (_maxpool_forward, _maxpool_backward, 1),
    OpKind.RELU: (_relu_forward, _relu_backward, 1),
    OpKind.DENSE: (_dense_forward, _dense_backward, 3),
    OpKind.SOFTMAX: (_softmax_forward, _softmax_backward, 1),
    OpKind.LOG: (_log_forward, _log_backward, 1),
    OpKind.ADD: (_binary_forward, _binary_backward, 2),
    OpKind.SUB: (_binary_forward, _binary_backward, 2),
    OpKind.MUL: (_binary_forward, _binary_backward, 2),
    OpKind.SCALAR_MUL: (_scalar_mul_forward, _scalar_mul_backward, 1),
    OpKind.TANH: (_tanh_forward, _tanh_backward, 1),
    OpKind.CLIP: (_clip_forward, _clip_backward, 1),
    OpKind.SUM: (_reduce_forward, _reduce_backward, 1),
    OpKind.MEAN: (_reduce_forward, _reduce_backward, 1),
    OpKind.CROSS_ENTROPY: (_cross_entropy_forward, _cross_entropy_backward, 2),
    OpKind.NEGATE: (_negate_forward, _negate_backward, 1),
    OpKind.DROPOUT: (_dropout_forward, _dropout_backward, 1),
    OpKind.RESHAPE: (_reshape_forward, _reshape_backward, 1),
}
