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

import json
import logging
import numpy as np
from typing import Optional, List, Dict, NamedTuple
from .tensor import Tape, Tensor, OpKind
from .model import Model, MAIN, HEAD_AUX
from .gradients import LossSpec, value_and_grad
from .training import OptimizerConfig, train
from .data import Dataset
from .attacks import AttackConfig, batch_attack
from .store import atomic_write

NEGATIVE_CE_CLAMP = 10.0


class VulnerabilityMatrix(NamedTuple):
    """Row i is the mean softmax output over adversarial examples that started as class i."""
    matrix: np.ndarray
    counts: List[int]

    @property
    def class_count(self) -> int:
        return self.matrix.shape[0]

    def validate(self) -> 'VulnerabilityMatrix':
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("A vulnerability matrix is square, not %s" % (self.matrix.shape,))
        if np.any(self.matrix < 0) or not np.allclose(self.matrix.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("Vulnerability matrix rows need to be probability vectors")
        return self


def estimate_vulnerability(model: Model, perturbed: np.ndarray, labels: np.ndarray, *,
                           head: str=MAIN) -> VulnerabilityMatrix:
    """Average the softmax outputs of adversarial examples per original class.

    :param model: Only read from.
    :param perturbed: (n, ...) adversarial examples.
    :param labels: The class each one started as.
    :param head: Whose softmax to average.
    :return: A VulnerabilityMatrix. Every class needs at least one example."""
    labels = np.asarray(labels, dtype=np.int64)
    probabilities = model.probabilities(perturbed, head) if len(labels) else np.zeros((0, model.class_count))
    rows, counts = [], []
    for cls in range(model.class_count):
        members = labels == cls
        if not np.any(members):
            raise ValueError("No adversarial examples originate from class %d" % cls)
        rows.append(probabilities[members].mean(axis=0))
        counts.append(int(members.sum()))
    return VulnerabilityMatrix(np.array(rows), counts)


class Classmap:
    """The robust label paired with each true label, plus where it came from.

    :param pairs: label -> robust label for every class.
    :param source_attack: Name of the attack that produced the vulnerability estimate.
    :param epsilon: That attack's budget.
    :param model_hash: Architecture hash of the model it was estimated on.
    :param examples_per_class: The N_i behind each row."""

    def __init__(self, pairs: Dict[int, int], *, source_attack: str='fgsm', epsilon: float=0.1,
                 model_hash: str='', examples_per_class: Optional[List[int]]=None):
        self.pairs = {int(k): int(v) for k, v in pairs.items()}
        self.source_attack = source_attack
        self.epsilon = float(epsilon)
        self.model_hash = model_hash
        self.examples_per_class = [] if examples_per_class is None else [int(n) for n in examples_per_class]
        self.validate()

    @property
    def class_count(self) -> int:
        return len(self.pairs)

    def validate(self) -> 'Classmap':
        if sorted(self.pairs) != list(range(len(self.pairs))):
            raise ValueError("A Classmap needs one pair for each of classes 0..n-1, got: " + str(sorted(self.pairs)))
        for label, robust in self.pairs.items():
            if robust == label or not 0 <= robust < len(self.pairs):
                raise ValueError("Class %d cannot be paired with %d" % (label, robust))
        return self

    def robust(self, label: int) -> int:
        try:
            return self.pairs[int(label)]
        except KeyError:
            raise ValueError("No robust label for class %d" % label)

    def robust_labels(self, labels: np.ndarray) -> np.ndarray:
        return np.array([self.robust(label) for label in np.asarray(labels).reshape(-1)], dtype=np.int64)

    def is_pair(self, label: int, auxiliary: int) -> bool:
        return self.pairs.get(int(label)) == int(auxiliary)

    def to_dict(self) -> dict:
        return {'classes': self.class_count,
                'pairs': [[label, self.pairs[label]] for label in sorted(self.pairs)],
                'source_attack': self.source_attack,
                'epsilon': self.epsilon,
                'model_hash': self.model_hash,
                'examples_per_class': self.examples_per_class}

    @staticmethod
    def from_dict(d: dict) -> 'Classmap':
        try:
            pairs = {int(label): int(robust) for label, robust in d['pairs']}
        except (KeyError, TypeError, ValueError):
            raise ValueError("A Classmap document needs 'pairs' as [[label, robust], ...]")
        if 'classes' in d and int(d['classes']) != len(pairs):
            raise ValueError("Classmap says %s classes but has %d pairs" % (d['classes'], len(pairs)))
        return Classmap(pairs, source_attack=d.get('source_attack', ''), epsilon=d.get('epsilon', 0.0),
                        model_hash=d.get('model_hash', ''), examples_per_class=d.get('examples_per_class'))

    def save(self, path: str):
        atomic_write(path, json.dumps(self.to_dict(), indent=2, sort_keys=True).encode())
        logging.info("Saved Classmap: " + path)

    @staticmethod
    def load(path: str) -> 'Classmap':
        with open(path) as f:
            try:
                d = json.load(f)
            except ValueError as e:
                raise ValueError("Classmap file is not json: %s (%s)" % (path, str(e)))
        return Classmap.from_dict(d)

    def __eq__(self, other):
        return isinstance(other, Classmap) and self.pairs == other.pairs

    def __repr__(self):
        return "<Classmap %s>" % ' '.join('%d>%d' % (k, v) for k, v in sorted(self.pairs.items()))


def encode_classmap(vulnerability: VulnerabilityMatrix, **provenance) -> Classmap:
    """Pair each class with the class its adversarial examples are least drawn to (never itself, lowest index
    on ties)."""
    masked = np.array(vulnerability.matrix, dtype=np.float64)
    np.fill_diagonal(masked, np.inf)
    pairs = {cls: int(np.argmin(row)) for cls, row in enumerate(masked)}
    return Classmap(pairs, examples_per_class=vulnerability.counts, **provenance)


def build_classmap(model: Model, dataset: Dataset, *, epsilon: float=0.1, seed: int=0,
                   workers: Optional[int]=None, head: str=MAIN) -> Classmap:
    """Nontargeted FGSM over a dataset (successful or not), vulnerability estimated then encoded."""
    config = AttackConfig.preset('fgsm', epsilon=epsilon, head=head)
    batch = batch_attack(model, dataset, config, seed, workers=workers)
    vulnerability = estimate_vulnerability(model, batch.perturbed, batch.labels, head=head)
    classmap = encode_classmap(vulnerability, source_attack='fgsm', epsilon=epsilon,
                               model_hash=model.architecture_hash())
    logging.info("Built Classmap from %d examples: %s" % (len(batch), repr(classmap)))
    return classmap


class LossWeights(NamedTuple):
    alpha: float = 0.4
    beta: float = 0.4
    gamma: float = 0.2

    def validate(self) -> 'LossWeights':
        if min(self) < 0 or abs(sum(self) - 1.0) > 1e-9:
            raise ValueError("Loss weights need to be non-negative and sum to 1: " + str(tuple(self)))
        return self


class Objective(NamedTuple):
    loss: Tensor
    main_logits: Tensor
    terms: Dict[str, float]
    adversarial: Tensor


def build_objective(tape: Tape, model: Model, params: Dict[str, Tensor], x: Tensor, labels: np.ndarray,
                    classmap: Classmap, weights: LossWeights=LossWeights(), epsilon_reg: float=0.1) -> Objective:
    """The multi-task loss for one batch.

    alpha * J(x, y) + beta * J(x_adv, y) on the main head, plus gamma * (J'(x, r) + Jbar(x_adv, r)) / 2 on Z',
    where r are the robust labels, x_adv is an FGSM step on the current weights and Jbar = -min(J, 10).

    :param tape: The training tape.
    :param params: From model.bind.
    :param x: A batch of benign inputs on the tape.
    :param labels: Their true labels.
    :return: An Objective - the scalar loss, main head logits on x, the terms' values and x_adv."""
    if not model.spec.defended:
        raise ValueError("The multi-task objective needs a defended model, not a %s one" % model.variant)
    weights.validate()
    labels = np.asarray(labels, dtype=np.int64)
    robust = classmap.robust_labels(labels)
    k = model.class_count
    true_onehot, robust_onehot = np.eye(k)[labels], np.eye(k)[robust]

    # fgsm on the current weights, the step is a constant but x_adv still follows x
    _, grad = value_and_grad(model, x.values, LossSpec.cross_entropy(labels))
    step = epsilon_reg * np.sign(grad)
    adversarial = tape.forward(OpKind.CLIP, tape.forward(OpKind.ADD, x, step), lo=0.0, hi=1.0)

    benign_heads = model.heads_on_tape(tape, x, params, want=[MAIN, HEAD_AUX])
    main = benign_heads[model.main_head]
    terms = {}
    parts = []

    def mean_ce(z: Tensor, onehot: np.ndarray) -> Tensor:
        return tape.forward(OpKind.MEAN, tape.forward(OpKind.CROSS_ENTROPY, z, onehot))

    if weights.alpha > 0:
        j_benign = mean_ce(main, true_onehot)
        terms['benign'] = j_benign.item()
        parts.append((weights.alpha, j_benign))
    if weights.beta > 0 or weights.gamma > 0:
        adversarial_heads = model.heads_on_tape(tape, adversarial, params, want=[MAIN, HEAD_AUX])
        if weights.beta > 0:
            j_adversarial = mean_ce(adversarial_heads[model.main_head], true_onehot)
            terms['adversarial'] = j_adversarial.item()
            parts.append((weights.beta, j_adversarial))
        if weights.gamma > 0:
            j_robust = mean_ce(benign_heads[HEAD_AUX], robust_onehot)
            clamped = tape.forward(OpKind.CLIP, tape.forward(OpKind.CROSS_ENTROPY, adversarial_heads[HEAD_AUX],
                                                             robust_onehot), hi=NEGATIVE_CE_CLAMP)
            j_negative = tape.forward(OpKind.NEGATE, tape.forward(OpKind.MEAN, clamped))
            terms['robust_benign'] = j_robust.item()
            terms['robust_adversarial'] = j_negative.item()
            j_pair = tape.forward(OpKind.SCALAR_MUL, tape.forward(OpKind.ADD, j_robust, j_negative), scalar=0.5)
            parts.append((weights.gamma, j_pair))

    loss = None
    for weight, part in parts:
        scaled = part if weight == 1.0 else tape.forward(OpKind.SCALAR_MUL, part, scalar=weight)
        loss = scaled if loss is None else tape.forward(OpKind.ADD, loss, scaled)
    terms['total'] = loss.item()
    return Objective(loss, main, terms, adversarial)


def objective_builder(classmap: Classmap, weights: LossWeights=LossWeights(), epsilon_reg: float=0.1):
    """build_objective in the shape train_epoch wants."""
    def builder(tape: Tape, model: Model, params: Dict[str, Tensor], x: Tensor, labels: np.ndarray):
        objective = build_objective(tape, model, params, x, labels, classmap, weights, epsilon_reg)
        return objective.loss, objective.main_logits, objective.terms
    return builder


def multitask_train(model: Model, dataset: Dataset, classmap: Classmap, weights: LossWeights=LossWeights(),
                    epsilon_reg: float=0.1, epochs: int=1, seed: int=0, *,
                    config: OptimizerConfig=OptimizerConfig()) -> Model:
    """Train a defended model on the multi-task objective. The lock unit never changes.

    :return: The same model, trained in place."""
    if not model.spec.defended:
        raise ValueError("Multi-task training needs a defended model, not a %s one" % model.variant)
    if classmap.class_count != model.class_count:
        raise ValueError("Classmap has %d classes, the model %d" % (classmap.class_count, model.class_count))
    weights.validate()
    if epochs == 0:
        return model
    train(model, dataset, epochs, loss_builder=objective_builder(classmap, weights, epsilon_reg),
          config=config, seed=seed)
    model.metadata['defence'] = {'weights': list(weights), 'epsilon_reg': epsilon_reg,
                                 'classmap': classmap.to_dict()}
    return model


class DetectionVerdict(NamedTuple):
    accepted: bool
    predicted: int
    auxiliary: int
    matched_pair: bool


def verdict_from_labels(classmap: Classmap, predicted: int, auxiliary: int) -> DetectionVerdict:
    matched = classmap.is_pair(predicted, auxiliary)
    return DetectionVerdict(matched, int(predicted), int(auxiliary), matched)


def detect(model: Model, classmap: Classmap, x: np.ndarray) -> DetectionVerdict:
    """Accept one input when (main head label, Z' label) is a Classmap pair."""
    heads = model.forward_heads(x, [MAIN, HEAD_AUX])
    return verdict_from_labels(classmap, int(np.argmax(heads[MAIN])), int(np.argmax(heads[HEAD_AUX])))


class Classification(NamedTuple):
    verdicts: List[DetectionVerdict]
    labels: np.ndarray  # -1 where rejected

    @property
    def rejected(self) -> int:
        return sum(1 for v in self.verdicts if not v.accepted)

    @property
    def accepted(self) -> int:
        return len(self.verdicts) - self.rejected

    @property
    def rejection_rate(self) -> float:
        return self.rejected / len(self.verdicts) if self.verdicts else 0.0


def classify_or_reject(model: Model, classmap: Classmap, x: np.ndarray) -> Classification:
    """detect over a batch. Rejected examples get the label -1."""
    if len(x) == 0:
        return Classification([], np.zeros(0, dtype=np.int64))
    heads = model.forward_heads(x, [MAIN, HEAD_AUX])
    verdicts = [verdict_from_labels(classmap, p, a)
                for p, a in zip(np.argmax(heads[MAIN], axis=-1), np.argmax(heads[HEAD_AUX], axis=-1))]
    labels = np.array([v.predicted if v.accepted else -1 for v in verdicts], dtype=np.int64)
    result = Classification(verdicts, labels)
    logging.info("Classified %d examples: %d rejected" % (len(verdicts), result.rejected))
    return result
