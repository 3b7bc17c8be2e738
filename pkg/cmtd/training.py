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
from typing import Optional, Dict, Tuple, NamedTuple, Callable
from . import DivergenceError
from .tensor import Tape, Tensor, OpKind
from .model import Model
from .rng import derive_seed


class OptimizerConfig(NamedTuple):
    learning_rate: float = 1e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def validate(self) -> 'OptimizerConfig':
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("Optimizer needs a positive learning rate and a batch size of at least 1: " + str(self))
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.epsilon <= 0:
            raise ValueError("Optimizer moment settings out of range: " + str(self))
        return self


class EpochMetrics(NamedTuple):
    mean_loss: float
    accuracy: float
    batches: int
    examples: int


class Adam:
    """Adaptive moment estimation over named arrays.

    :param config: An OptimizerConfig - only the moment and learning rate settings are used here."""

    def __init__(self, config: OptimizerConfig=OptimizerConfig()):
        self.config = config.validate()
        self.m = {}
        self.v = {}
        self.t = {}

    def update(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One step for one array.

        :return: The new value (the passed array is not changed)."""
        c = self.config
        t = self.t.get(name, 0) + 1
        m = c.beta1 * self.m.get(name, 0.0) + (1.0 - c.beta1) * grad
        v = c.beta2 * self.v.get(name, 0.0) + (1.0 - c.beta2) * grad * grad
        self.t[name], self.m[name], self.v[name] = t, m, v
        m_hat = m / (1.0 - c.beta1 ** t)
        v_hat = v / (1.0 - c.beta2 ** t)
        return value - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.epsilon)

    def step(self, model: Model, grads: Dict[str, np.ndarray]):
        """Update a model's trainable parameters. Gradients for the lock unit are ignored."""
        model.ensure_mutable()
        frozen = set(model.frozen_names)
        for name, grad in grads.items():
            if name in frozen:
                continue
            model.update_parameter(name, self.update(name, model.parameters[name], grad))

    def __repr__(self):
        return "<Adam lr=%g steps=%d>" % (self.config.learning_rate, max(self.t.values(), default=0))


# (tape, model, bound parameters, x batch, labels) -> (scalar loss, main logits, named loss terms)
LossBuilder = Callable[[Tape, Model, Dict[str, Tensor], Tensor, np.ndarray], Tuple[Tensor, Tensor, Dict[str, float]]]


def cross_entropy_builder(tape: Tape, model: Model, params: Dict[str, Tensor], x: Tensor,
                          labels: np.ndarray) -> Tuple[Tensor, Tensor, Dict[str, float]]:
    """Plain training - mean cross entropy on the main head."""
    z = model.heads_on_tape(tape, x, params, want=['main'])[model.main_head]
    onehot = np.eye(model.class_count)[labels]
    loss = tape.forward(OpKind.MEAN, tape.forward(OpKind.CROSS_ENTROPY, z, onehot))
    return loss, z, {'cross_entropy': loss.item()}


def train_epoch(model: Model, dataset, loss_builder: LossBuilder=cross_entropy_builder,
                optimizer: Optional[Adam]=None, seed: int=0) -> EpochMetrics:
    """One pass over a shuffled dataset.

    :param model: Trained in place - must not be frozen.
    :param dataset: A cmtd.data.Dataset.
    :param loss_builder: Builds the batch loss on the tape.
    :param optimizer: An Adam (carrying its moments between epochs), defaults to a fresh one.
    :param seed: Shuffles and seeds dropout.
    :return: EpochMetrics - the mean loss over the epoch and the accuracy after it."""
    model.ensure_mutable()
    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset")
    optimizer = Adam() if optimizer is None else optimizer
    batch_size = optimizer.config.batch_size
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    total_loss = 0.0
    batches = 0
    for batch_index, start in enumerate(range(0, len(dataset), batch_size)):
        idx = order[start:start + batch_size]
        tape = Tape(training=True, rng=rng)
        params = model.bind(tape, trainable=True)
        terms = {}
        try:
            loss, _, terms = loss_builder(tape, model, params, tape.constant(dataset.images[idx]),
                                          dataset.labels[idx])
        except RuntimeError as e:
            raise DivergenceError(batch_index, dict(terms, error=str(e))) from e
        if not np.isfinite(loss.item()):
            raise DivergenceError(batch_index, terms)
        grads = tape.backward(loss)
        optimizer.step(model, {name: grads.wrt(params[name]) for name in model.trainable_names})
        total_loss += loss.item() * len(idx)
        batches += 1
        logging.debug("Batch %d: loss=%.5f %s" % (batch_index, loss.item(), repr(optimizer)))
    accuracy = float(np.mean(model.predict(dataset.images) == dataset.labels))
    metrics = EpochMetrics(total_loss / len(dataset), accuracy, batches, len(dataset))
    logging.info("Trained epoch: loss=%.4f accuracy=%.4f (%d examples)" % (metrics.mean_loss, accuracy, len(dataset)))
    return metrics


def train(model: Model, dataset, epochs: int, *, loss_builder: LossBuilder=cross_entropy_builder,
          config: OptimizerConfig=OptimizerConfig(), seed: int=0):
    """Several epochs with one optimizer. Returns the list of EpochMetrics."""
    optimizer = Adam(config)
    history = []
    for epoch in range(epochs):
        history.append(train_epoch(model, dataset, loss_builder, optimizer, derive_seed(seed, epoch)))
    model.metadata.setdefault('epochs', 0)
    model.metadata['epochs'] += epochs
    model.metadata['train_seed'] = seed
    return history
