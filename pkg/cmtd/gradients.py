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

import logging
import numpy as np
from typing import Optional, List, Tuple, NamedTuple, Callable, Union
from .tensor import Tape, Tensor, OpKind, same_kinks
from .model import Model, MAIN

RELATIVE_ERROR_FLOOR = 1e-7
KINK_MARGIN = 1e-4


class LossTerm(NamedTuple):
    head: str
    kind: str  # 'cross_entropy' or 'logit_dot'
    target: np.ndarray
    weight: float


class LossSpec:
    """A weighted sum of per-head loss terms, built onto a tape.

    cross_entropy terms take integer labels (one, or one per example) and are averaged over the batch.
    logit_dot terms take coefficients shaped like the head's logits (or (k,), broadcast over the batch) and are summed."""

    def __init__(self, *terms: LossTerm):
        if len(terms) == 0:
            raise ValueError("A LossSpec needs at least one term")
        for term in terms:
            if term.kind not in ('cross_entropy', 'logit_dot'):
                raise ValueError("Unknown loss term kind: " + term.kind)
        self.terms = terms

    @staticmethod
    def cross_entropy(labels, *, head: str=MAIN, weight: float=1.0) -> 'LossSpec':
        return LossSpec(LossTerm(head, 'cross_entropy', np.asarray(labels, dtype=np.int64), float(weight)))

    @staticmethod
    def logit_dot(coefficients, *, head: str=MAIN, weight: float=1.0) -> 'LossSpec':
        return LossSpec(LossTerm(head, 'logit_dot', np.asarray(coefficients, dtype=np.float64), float(weight)))

    def __add__(self, other: 'LossSpec') -> 'LossSpec':
        return LossSpec(*(self.terms + other.terms))

    def scaled(self, factor: float) -> 'LossSpec':
        return LossSpec(*(t._replace(weight=t.weight * factor) for t in self.terms))

    def heads(self) -> List[str]:
        return [t.head for t in self.terms]

    def build(self, tape: Tape, model: Model, logits: dict) -> Tensor:
        """The scalar loss from logits that heads_on_tape returned."""
        total = None
        for term in self.terms:
            z = logits[model.resolve_head(term.head)]
            if term.kind == 'cross_entropy':
                onehot = _onehot(term.target, z.shape, model.class_count)
                value = tape.forward(OpKind.MEAN, tape.forward(OpKind.CROSS_ENTROPY, z, onehot))
            else:
                value = tape.forward(OpKind.SUM, tape.forward(OpKind.MUL, z, term.target))
            if term.weight != 1.0:
                value = tape.forward(OpKind.SCALAR_MUL, value, scalar=term.weight)
            total = value if total is None else tape.forward(OpKind.ADD, total, value)
        return total

    def __repr__(self):
        return "<LossSpec %s>" % ' + '.join('%g*%s(%s)' % (t.weight, t.kind, t.head) for t in self.terms)


def value_and_grad(model: Model, x: np.ndarray, loss_spec: LossSpec, *,
                   lock_override=None) -> Tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the input.

    :param model: Only read from.
    :param x: One example or a batch.
    :param loss_spec: What to differentiate.
    :param lock_override: Passed through to Model.heads_on_tape.
    :return: (loss, gradient shaped like x)"""
    tape = Tape()
    xt = tape.variable(x)
    loss = _build(tape, model, xt, loss_spec, lock_override)
    return loss.item(), tape.backward(loss).wrt(xt)


def grad_wrt_input(model: Model, x: Union[np.ndarray, Tensor], loss_spec: LossSpec, *,
                   lock_override=None) -> Tensor:
    values = x.values if isinstance(x, Tensor) else x
    return Tensor(value_and_grad(model, values, loss_spec, lock_override=lock_override)[1])


def loss_and_kinks(model: Model, x: np.ndarray, loss_spec: LossSpec, *,
                   lock_override=None) -> Tuple[float, List[np.ndarray]]:
    """The loss plus the discrete decisions the forward pass took."""
    tape = Tape()
    loss = _build(tape, model, tape.constant(x), loss_spec, lock_override)
    return loss.item(), tape.kink_signature()


class CoordinateCheck(NamedTuple):
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    relative_error: float


class GradCheckReport(NamedTuple):
    checked: List[CoordinateCheck]
    excluded: List[Tuple[int, ...]]
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def __repr__(self):
        return "<GradCheckReport %s checked=%d excluded=%d max_error=%.3g>" % \
               ('passed' if self.passed else 'FAILED', len(self.checked), len(self.excluded), self.max_relative_error)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), RELATIVE_ERROR_FLOOR)


def check_gradient(function: Callable[[np.ndarray], Tuple[float, List[np.ndarray]]], point: np.ndarray,
                   analytic: np.ndarray, *, step: float=1e-5, tolerance: float=1e-4, samples: int=32,
                   seed: int=0, kink_margin: float=KINK_MARGIN) -> GradCheckReport:
    """Compare an analytic gradient with central differences on a random sample of coordinates.

    :param function: point -> (value, kink signature). A coordinate is excluded when the signature differs
     between point -/+ kink_margin along it.
    :param point: Where to check.
    :param analytic: The gradient to check, shaped like point.
    :param step: Central difference step.
    :param tolerance: Pass threshold for the largest relative error.
    :param samples: How many coordinates (all of them if there are fewer).
    :param seed: Picks the coordinates.
    :return: A GradCheckReport."""
    if step <= 0:
        raise ValueError("Finite difference step needs to be positive, not: %r" % step)
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ValueError("Analytic gradient shape %s does not match the point %s" % (analytic.shape, point.shape))
    rng = np.random.default_rng(seed)
    coords = np.sort(rng.choice(point.size, size=min(samples, point.size), replace=False))

    def nudged(flat_index: int, delta: float) -> np.ndarray:
        moved = point.copy()
        moved.flat[flat_index] += delta
        return moved

    checked, excluded = [], []
    for flat_index in coords:
        index = tuple(int(i) for i in np.unravel_index(flat_index, point.shape))
        if not same_kinks(function(nudged(flat_index, -kink_margin))[1], function(nudged(flat_index, kink_margin))[1]):
            excluded.append(index)
            continue
        numeric = (function(nudged(flat_index, step))[0] - function(nudged(flat_index, -step))[0]) / (2.0 * step)
        a = float(analytic.flat[flat_index])
        checked.append(CoordinateCheck(index, a, numeric, relative_error(a, numeric)))
    worst = max((c.relative_error for c in checked), default=0.0)
    report = GradCheckReport(checked, excluded, worst, tolerance)
    logging.debug("Gradient check: " + repr(report))
    return report


def finite_difference_check(model: Model, x: np.ndarray, loss_spec: LossSpec, step: float=1e-5,
                            tolerance: float=1e-4, *, samples: int=32, seed: int=0,
                            lock_override=None) -> GradCheckReport:
    """check_gradient on the input gradient of a model loss."""
    if step <= 0:
        raise ValueError("Finite difference step needs to be positive, not: %r" % step)
    x = np.asarray(x, dtype=np.float64)
    _, analytic = value_and_grad(model, x, loss_spec, lock_override=lock_override)
    return check_gradient(lambda p: loss_and_kinks(model, p, loss_spec, lock_override=lock_override),
                          x, analytic, step=step, tolerance=tolerance, samples=samples, seed=seed)


def _build(tape: Tape, model: Model, xt: Tensor, loss_spec: LossSpec, lock_override) -> Tensor:
    logits = model.heads_on_tape(tape, xt, want=set(loss_spec.heads()), lock_override=lock_override)
    return loss_spec.build(tape, model, logits)


def _onehot(labels: np.ndarray, shape: Tuple[int, ...], class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError("Labels need to be in [0, %d)" % class_count)
    onehot = np.zeros(shape)
    if len(shape) == 1:
        if labels.size != 1:
            raise ValueError("One example needs one label, not %d" % labels.size)
        onehot[int(labels.reshape(()))] = 1.0
    else:
        labels = np.broadcast_to(labels.reshape(-1), (shape[0],))
        onehot[np.arange(shape[0]), labels] = 1.0
    return onehot
