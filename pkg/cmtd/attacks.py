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
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, List, Dict, Tuple, NamedTuple, Mapping
from . import worker_count
from .tensor import Tape, OpKind
from .model import Model, MAIN, HEAD_AUX
from .gradients import LossSpec, value_and_grad
from .training import Adam, OptimizerConfig
from .data import Dataset, AdversarialBatch
from .rng import derive_seed

KINDS = ('fgsm', 'igs', 'jsma', 'deepfool_linf', 'cw_l2', 'cw_l2_combined')
TANH_SHRINK = 0.999999
DEEPFOOL_NUDGE = 1e-4


class AttackConfig:
    """Everything an attack needs besides the model and the input. Mirrors the JSON attack config.

    :param kind: One of fgsm, igs, jsma, deepfool_linf, cw_l2, cw_l2_combined.
    :param target: None for nontargeted, a class id, or 'random' for a per-example random target."""

    FIELDS = {'kind': None, 'epsilon': 0.1, 'igs_step_size': 0.01, 'igs_ascent': False, 'max_iterations': None,
              'kappa': 0.0, 'jsma_theta': 1.0 / 255, 'jsma_max_distortion': 0.145, 'jsma_mode': 'increase',
              'target': None, 'eta1': 0.5, 'eta2': 0.5, 'learning_rate': 0.01, 'search_steps': 5,
              'c_range': (1e-3, 1e6), 'abort_early': True, 'overshoot': 0.02, 'head': MAIN}
    DEFAULT_ITERATIONS = {'fgsm': 1, 'igs': 20, 'jsma': 1000, 'deepfool_linf': 50, 'cw_l2': 1000,
                          'cw_l2_combined': 1000}

    def __init__(self, kind: str, **kwargs):
        unknown = set(kwargs) - set(AttackConfig.FIELDS)
        if unknown:
            raise ValueError("Unknown attack config fields: " + ', '.join(sorted(unknown)))
        for name, default in AttackConfig.FIELDS.items():
            setattr(self, name, kwargs.get(name, default))
        self.kind = kind
        self.c_range = tuple(float(c) for c in self.c_range)
        if self.max_iterations is None:
            self.max_iterations = AttackConfig.DEFAULT_ITERATIONS.get(kind, 1)

    def validate(self) -> 'AttackConfig':
        if self.kind not in KINDS:
            raise ValueError("Attack kind needs to be one of %s, not: %s" % (', '.join(KINDS), self.kind))
        if self.epsilon < 0 or self.kappa < 0:
            raise ValueError("Epsilon and kappa cannot be negative")
        if self.eta1 < 0 or self.eta2 < 0 or self.eta1 + self.eta2 <= 0:
            raise ValueError("The combined loss weights need eta1, eta2 >= 0 and eta1 + eta2 > 0")
        if not 0.0 < self.jsma_max_distortion <= 1.0:
            raise ValueError("jsma_max_distortion needs to be in (0, 1], not: %r" % self.jsma_max_distortion)
        if self.jsma_theta <= 0 or self.jsma_mode not in ('increase', 'decrease'):
            raise ValueError("JSMA needs a positive theta and a mode of 'increase' or 'decrease'")
        if self.igs_step_size <= 0 or self.learning_rate <= 0 or self.overshoot < 0:
            raise ValueError("Step sizes need to be positive and the overshoot non-negative")
        if int(self.max_iterations) < 1 or int(self.search_steps) < 1:
            raise ValueError("An attack needs at least one iteration and one search step")
        if not 0 < self.c_range[0] <= self.c_range[1]:
            raise ValueError("The C&W constant range needs 0 < low <= high: " + str(self.c_range))
        if self.target is not None and self.target != 'random' and \
                (isinstance(self.target, bool) or not isinstance(self.target, int) or self.target < 0):
            raise ValueError("Attack target is None, a class id or 'random', not: %r" % (self.target,))
        return self

    @property
    def targeted(self) -> bool:
        return self.target is not None

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in AttackConfig.FIELDS}
        d['c_range'] = list(self.c_range)
        return d

    @staticmethod
    def from_dict(d: dict) -> 'AttackConfig':
        d = dict(d)
        try:
            kind = d.pop('kind')
        except KeyError:
            raise ValueError("Attack config needs a 'kind'")
        return AttackConfig(kind, **d).validate()

    @staticmethod
    def preset(name: str, **overrides) -> 'AttackConfig':
        """The evaluation settings - FGSM and IGS at 0.1, JSMA at 14.5%, DeepFool with 2% overshoot, C&W."""
        presets = {'fgsm': {'epsilon': 0.1},
                   'igs': {'epsilon': 0.1, 'igs_step_size': 0.01, 'igs_ascent': True},
                   'jsma': {'jsma_max_distortion': 0.145},
                   'deepfool_linf': {'overshoot': 0.02},
                   'cw_l2': {'kappa': 0.0},
                   'cw_l2_combined': {'kappa': 0.0}}
        if name not in presets:
            raise ValueError("No attack preset called: " + name)
        return AttackConfig(name, **dict(presets[name], **overrides)).validate()

    def replace(self, **changes) -> 'AttackConfig':
        return AttackConfig.from_dict(dict(self.to_dict(), **changes))

    def __repr__(self):
        return "<AttackConfig %s eps=%g kappa=%g target=%s>" % (self.kind, self.epsilon, self.kappa, self.target)


class AttackResult(NamedTuple):
    perturbed: np.ndarray
    success: bool
    iterations: int
    loss: float
    margin: float
    l2: float
    linf: float
    target: int = -1
    detail: Optional[dict] = None


def fgsm(model: Model, x: np.ndarray, y_true: int, epsilon: float, *, target: Optional[int]=None,
         head: str=MAIN) -> AttackResult:
    """One signed gradient step - up the true label's loss, or down the target's.

    :param model: Should be frozen.
    :param x: One example in [0, 1].
    :param y_true: The true label.
    :param epsilon: L-infinity budget.
    :param target: Optional target class.
    :param head: The head whose cross entropy is followed.
    :return: An AttackResult."""
    _check_example(model, x)
    label = y_true if target is None else target
    loss, grad = value_and_grad(model, x, LossSpec.cross_entropy(label, head=head))
    direction = np.sign(grad) if target is None else -np.sign(grad)
    if not np.any(direction):
        logging.warning("FGSM found a zero gradient, returning the input unchanged")
        return _result(model, x, x, False, 0, loss, y_true, target, head)
    perturbed = np.clip(x + epsilon * direction, 0.0, 1.0)
    return _result(model, x, perturbed, None, 1, loss, y_true, target, head)


def igs(model: Model, x: np.ndarray, y_true: int, epsilon: float, igs_step_size: float, max_iterations: int, *,
        ascent: bool=False, target: Optional[int]=None, head: str=MAIN) -> AttackResult:
    """Iterated signed gradient steps, each clipped to epsilon, the total projected back into the epsilon ball
    and the box. Stops as soon as the example is adversarial.

    The literal update subtracts the step from the true label's loss - pass ascent=True to climb it instead.
    A targeted attack always descends the target's loss."""
    _check_example(model, x)
    label = y_true if target is None else target
    sign = 1.0 if (ascent and target is None) else -1.0
    current = x.copy()
    loss = 0.0
    for iteration in range(1, max_iterations + 1):
        loss, grad = value_and_grad(model, current, LossSpec.cross_entropy(label, head=head))
        if iteration == 1 and not np.any(grad):
            logging.warning("IGS found a zero gradient, returning the input unchanged")
            return _result(model, x, x, False, 0, loss, y_true, target, head)
        step = np.clip(sign * igs_step_size * np.sign(grad), -epsilon, epsilon)
        current = np.clip(x + np.clip(current + step - x, -epsilon, epsilon), 0.0, 1.0)
        if _is_adversarial(model.logits(current, head), y_true, target):
            return _result(model, x, current, None, iteration, loss, y_true, target, head)
        logging.debug("IGS iteration %d: loss=%.5f" % (iteration, loss))
    return _result(model, x, current, None, max_iterations, loss, y_true, target, head)


def jsma(model: Model, x: np.ndarray, target_class: Optional[int], jsma_theta: float, jsma_max_distortion: float,
         *, y_true: Optional[int]=None, mode: str='increase', max_iterations: int=1000,
         head: str=MAIN) -> AttackResult:
    """Saliency-guided single pixel changes, by jsma_theta each iteration.

    Increase mode picks the pixel maximising a * |b| over pixels with a > 0 and b < 0, where a is the gradient of
    the target logit and b the gradient of the other logits' sum. Decrease mode uses |a| * b with a < 0 and b > 0.
    Once the distinct pixel budget is spent only pixels already changed stay eligible.

    :param target_class: The target, or None to target the runner-up class (needs y_true).
    :param y_true: The true label, if known.
    :return: An AttackResult, detail holds the modified pixel count."""
    _check_example(model, x)
    if mode not in ('increase', 'decrease'):
        raise ValueError("JSMA mode is 'increase' or 'decrease', not: " + mode)
    z = model.logits(x, head)
    if target_class is None:
        if y_true is None:
            raise ValueError("A nontargeted JSMA needs the true label")
        target_class = _runner_up(z, y_true)
    if y_true is not None and target_class == y_true:
        raise ValueError("A JSMA target needs to differ from the true class (%d)" % y_true)
    budget = int(np.ceil(jsma_max_distortion * x.size))
    coefficients = {'target': np.eye(model.class_count)[target_class], 'all': np.ones(model.class_count)}
    current = x.copy()
    modified = set()
    iterations = 0
    while iterations < max_iterations:
        z, grads = _logit_gradients(model, current, head, coefficients)
        if int(np.argmax(z)) == target_class:
            break
        alpha = grads['target'].reshape(-1)
        beta = grads['all'].reshape(-1) - alpha
        flat = current.reshape(-1)
        if mode == 'increase':
            eligible = flat < 1.0
            saliency = np.where((alpha > 0) & (beta < 0), alpha * np.abs(beta), 0.0)
        else:
            eligible = flat > 0.0
            saliency = np.where((alpha < 0) & (beta > 0), np.abs(alpha) * beta, 0.0)
        if len(modified) >= budget:
            chosen = np.zeros_like(eligible)
            chosen[list(modified)] = True
            eligible &= chosen
        saliency = np.where(eligible, saliency, 0.0)
        if not np.any(saliency > 0):
            break
        pixel = int(np.argmax(saliency))
        flat = flat.copy()
        flat[pixel] = np.clip(flat[pixel] + (jsma_theta if mode == 'increase' else -jsma_theta), 0.0, 1.0)
        current = flat.reshape(x.shape)
        modified.add(pixel)
        iterations += 1
    result = _result(model, x, current, None, iterations, 0.0, y_true, target_class, head,
                     pixels_modified=len(modified), budget=budget)
    logging.debug("JSMA: %d iterations, %d pixels, success=%s" % (iterations, len(modified), result.success))
    return result


def deepfool_linf(model: Model, x: np.ndarray, y_true: Optional[int]=None, max_iterations: int=50,
                  overshoot: float=0.02, *, head: str=MAIN) -> AttackResult:
    """The multi-class L-infinity DeepFool: step toward the class k minimising |f_k| / ||grad f_k||_1.

    :param y_true: If the model already gets this wrong the input comes back unchanged, flagged degenerate.
    :return: An AttackResult, detail holds the per-iteration bound on the L-infinity distortion."""
    _check_example(model, x)
    coefficients = {k: row for k, row in enumerate(np.eye(model.class_count))}
    z = model.logits(x, head)
    original = int(np.argmax(z))
    if y_true is not None and original != y_true:
        return AttackResult(x.copy(), True, 0, 0.0, _margin(z, y_true, False), 0.0, 0.0, -1, {'degenerate': True})
    total = np.zeros_like(x)
    current = x.copy()
    bound = 0.0
    for iteration in range(1, max_iterations + 1):
        z, grads = _logit_gradients(model, current, head, coefficients)
        if int(np.argmax(z)) != original:
            return _result(model, x, current, None, iteration - 1, 0.0, original, None, head, bound=bound)
        best = None
        for k in range(model.class_count):
            if k == original:
                continue
            w = grads[k] - grads[original]
            norm = np.abs(w).sum()
            if norm == 0.0:
                continue
            distance = abs(z[k] - z[original]) / norm
            if best is None or distance < best[0]:
                best = (distance, w, norm, abs(z[k] - z[original]))
        if best is None:
            logging.warning("DeepFool found no usable gradient")
            break
        _, w, norm, gap = best
        step = (gap + DEEPFOOL_NUDGE) / norm * np.sign(w)
        total += step
        bound += (1.0 + overshoot) * np.abs(step).max()
        current = np.clip(x + (1.0 + overshoot) * total, 0.0, 1.0)
    return _result(model, x, current, None, max_iterations, 0.0, original, None, head, bound=bound)


class _CWTerm(NamedTuple):
    weight: float
    head: str
    label: int
    targeted: bool


def cw_l2(model: Model, x: np.ndarray, y_true: int, kappa: float, config: 'AttackConfig', *,
          target: Optional[int]=None, head: str=MAIN) -> AttackResult:
    """Minimise ||delta||^2 + c * f over the tanh variable, searching c over config.c_range.

    f is max(max_{j != t} Z_j - Z_t, -kappa) when targeted, max(Z_y - max_{j != y} Z_j, -kappa) when not.
    Success needs the kappa margin.

    :param config: Supplies learning rate, iterations, search steps, c range and early abort.
    :return: The lowest distortion success, or the best margin found with success=False."""
    _check_example(model, x)
    term = _CWTerm(1.0, head, y_true if target is None else target, target is not None)
    return _cw_search(model, x, [term], [term], kappa, config, y_true, target)


def cw_l2_combined(model: Model, x: np.ndarray, y_true: int, kappa: float, eta1: float, eta2: float,
                   config: 'AttackConfig', *, target: Optional[int]=None, target_aux: Optional[int]=None,
                   pairs: Optional[Mapping[int, int]]=None) -> AttackResult:
    """C&W on eta1 * f(main head, t) + eta2 * f(Z', t') - the attacker aims for a Classmap pair.

    :param model: A defended model, either variant.
    :param target: t, or None to use the main head's runner-up at the start.
    :param target_aux: t', or None to look it up in pairs.
    :param pairs: A label -> robust label mapping, e.g. Classmap.pairs or infer_classmap_by_query's output.
    :return: Success needs the kappa margin on the main head and (when eta2 > 0) Z' landing on t'."""
    _check_example(model, x)
    if not model.spec.defended:
        raise ValueError("The combined attack needs a defended model, not a %s one" % model.variant)
    if target is None:
        target = _runner_up(model.logits(x, MAIN), y_true)
    if target_aux is None:
        if pairs is None or target not in pairs:
            raise ValueError("No paired label for class %d - supply target_aux or a pairing" % target)
        target_aux = int(pairs[target])
    main = _CWTerm(eta1, MAIN, target, True)
    aux = _CWTerm(eta2, HEAD_AUX, target_aux, True)
    objective = [t for t in (main, aux) if t.weight > 0]
    checked = [main, aux] if eta2 > 0 else [main]
    result = _cw_search(model, x, objective, checked, kappa, config, y_true, target)
    detail = dict(result.detail or {}, target_aux=target_aux)
    return result._replace(detail=detail)


def infer_classmap_by_query(model: Model, x: np.ndarray) -> Dict[int, int]:
    """Recover label pairs by querying a defended model: for each main head label, the most frequent Z' label
    other than itself.

    Classes the main head never predicts (or only ever pairs with themselves) take the most frequent Z' label
    overall that is not themselves, so every class comes back paired and never with itself.

    :param x: A batch of inputs.
    :return: main label -> auxiliary label for every class (ties go to the lower label)."""
    if not model.spec.defended:
        raise ValueError("Only a defended model has label pairs to recover")
    heads = model.forward_heads(x, [MAIN, HEAD_AUX])
    main_labels, aux_labels = np.argmax(heads[MAIN], axis=-1), np.argmax(heads[HEAD_AUX], axis=-1)
    overall = Counter(int(aux) for aux in aux_labels)
    tallies = {}
    for main, aux in zip(main_labels, aux_labels):
        if main != aux:
            tallies.setdefault(int(main), Counter())[int(aux)] += 1
    pairs = {}
    for label in range(model.class_count):
        counts = tallies.get(label) or Counter({aux: n for aux, n in overall.items() if aux != label}) or \
            Counter({other: 0 for other in range(model.class_count) if other != label})
        pairs[label] = min(counts, key=lambda aux: (-counts[aux], aux))
    filled = model.class_count - len(tallies)
    if filled:
        logging.info("Recovered %d label pairs by query, filled %d from the overall Z' labels" %
                     (len(tallies), filled))
    return pairs


def run_attack(model: Model, x: np.ndarray, y_true: int, config: AttackConfig, *, seed: int=0,
               pairs: Optional[Mapping[int, int]]=None) -> AttackResult:
    """Dispatch one example to the attack config.kind names. A 'random' target is drawn from the seed."""
    target = _resolve_target(config.target, y_true, model.class_count, seed)
    if config.kind == 'fgsm':
        return fgsm(model, x, y_true, config.epsilon, target=target, head=config.head)
    if config.kind == 'igs':
        return igs(model, x, y_true, config.epsilon, config.igs_step_size, config.max_iterations,
                   ascent=config.igs_ascent, target=target, head=config.head)
    if config.kind == 'jsma':
        return jsma(model, x, target, config.jsma_theta, config.jsma_max_distortion, y_true=y_true,
                    mode=config.jsma_mode, max_iterations=config.max_iterations, head=config.head)
    if config.kind == 'deepfool_linf':
        return deepfool_linf(model, x, y_true, config.max_iterations, config.overshoot, head=config.head)
    if config.kind == 'cw_l2':
        return cw_l2(model, x, y_true, config.kappa, config, target=target, head=config.head)
    if config.kind == 'cw_l2_combined':
        return cw_l2_combined(model, x, y_true, config.kappa, config.eta1, config.eta2, config, target=target,
                              pairs=pairs)
    raise ValueError("Unknown attack kind: " + str(config.kind))


def batch_attack(model: Model, dataset: Dataset, config: AttackConfig, seed: int=0, *,
                 pairs: Optional[Mapping[int, int]]=None, workers: Optional[int]=None) -> AdversarialBatch:
    """Attack every example, fanned out over a thread pool with results kept in input order.

    A failing example is logged and recorded as unsuccessful, the rest of the batch carries on.

    :param model: Frozen for the duration (a frozen copy is used if it is not frozen already).
    :param dataset: What to attack.
    :param config: A valid AttackConfig.
    :param seed: Each example gets derive_seed(seed, index).
    :param pairs: Label pairs for cw_l2_combined.
    :param workers: Thread count, defaults to cmtd.worker_count().
    :return: The AdversarialBatch."""
    config.validate()
    shared = model if model.frozen else model.copy().mark_as_frozen()

    def one(index: int) -> AttackResult:
        x, y = dataset.images[index], int(dataset.labels[index])
        try:
            return run_attack(shared, x, y, config, seed=derive_seed(seed, index), pairs=pairs)
        except Exception as e:
            logging.warning("Attack %s failed on example %d: %s" % (config.kind, index, str(e)))
            return AttackResult(x.copy(), False, 0, float('nan'), float('nan'), 0.0, 0.0, -1, {'error': str(e)})

    if len(dataset) == 0:
        results = []
    else:
        with ThreadPoolExecutor(max_workers=worker_count(workers)) as executor:
            results = list(executor.map(one, range(len(dataset))))
    shape = (len(dataset),) + tuple(dataset.input_shape)
    batch = AdversarialBatch(dataset.images.copy().reshape(shape),
                             np.array([r.perturbed for r in results]).reshape(shape),
                             dataset.labels.copy(), attack=config.kind, config=config.to_dict(),
                             success=[r.success for r in results], targets=[r.target for r in results],
                             iterations=[r.iterations for r in results])
    logging.info("Attacked %d examples with %s: success rate %.3f" % (len(batch), config.kind, batch.success_rate))
    return batch


def _cw_search(model: Model, x: np.ndarray, objective: List[_CWTerm], checked: List[_CWTerm], kappa: float,
               config: AttackConfig, y_true: int, target: Optional[int]) -> AttackResult:
    omega_start = np.arctanh((2.0 * x - 1.0) * TANH_SHRINK)
    want = sorted({model.resolve_head(t.head) for t in objective + checked})
    low, high = config.c_range
    c = np.sqrt(low * high)
    best = None  # (l2 squared, perturbed, margin)
    best_failure = (-np.inf, x.copy(), 0.0)
    total_iterations = 0
    check_every = max(1, config.max_iterations // 10)

    for search_step in range(config.search_steps):
        omega = omega_start.copy()
        adam = Adam(OptimizerConfig(learning_rate=config.learning_rate))
        previous = np.inf
        succeeded = False
        for iteration in range(config.max_iterations):
            tape = Tape()
            w = tape.variable(omega)
            perturbed = tape.forward(OpKind.SCALAR_MUL, tape.forward(OpKind.ADD, tape.forward(OpKind.TANH, w), 1.0),
                                     scalar=0.5)
            delta = tape.forward(OpKind.SUB, perturbed, x)
            distance = tape.forward(OpKind.SUM, tape.forward(OpKind.MUL, delta, delta))
            heads = model.heads_on_tape(tape, perturbed, want=want)
            loss = distance
            for term in objective:
                z = heads[model.resolve_head(term.head)]
                f = tape.forward(OpKind.CLIP, tape.forward(OpKind.SUM, tape.forward(
                    OpKind.MUL, z, _cw_coefficients(z.values, term))), lo=-kappa)
                loss = tape.forward(OpKind.ADD, loss, tape.forward(OpKind.SCALAR_MUL, f, scalar=c * term.weight))

            ok, margin = _cw_check(model, {h: t.values for h, t in heads.items()}, checked, kappa)
            if ok:
                succeeded = True
                if best is None or distance.item() < best[0]:
                    best = (distance.item(), perturbed.values.copy(), margin)
            elif margin > best_failure[0]:
                best_failure = (margin, perturbed.values.copy(), loss.item())
            if config.abort_early and iteration % check_every == 0:
                if _stalled(loss.item(), previous):
                    break
                previous = loss.item()
            omega = adam.update('omega', omega, tape.backward(loss).wrt(w))
            total_iterations += 1

        logging.debug("C&W search step %d: c=%.4g success=%s" % (search_step, c, succeeded))
        if succeeded:
            high = c
        else:
            low = c
        c = np.sqrt(low * high)

    if best is not None:
        found = model.forward_heads(best[1], want)
        ok, margin = _cw_check(model, found, checked, kappa)
        if ok:
            return _measured(x, best[1], True, total_iterations, best[0], margin,
                             -1 if target is None else target, {'c_final': float(c)})
        logging.warning("C&W success did not survive a fresh forward pass")
    margin, perturbed, loss = best_failure
    return _measured(x, perturbed, False, total_iterations, float(loss), float(margin),
                     -1 if target is None else target, {'c_final': float(c)})


def _cw_coefficients(z: np.ndarray, term: _CWTerm) -> np.ndarray:
    # f = (z . coefficients), the max over the other classes frozen at its current argmax
    other = _runner_up(z, term.label)
    coefficients = np.zeros_like(z)
    if term.targeted:
        coefficients[other], coefficients[term.label] = 1.0, -1.0
    else:
        coefficients[term.label], coefficients[other] = 1.0, -1.0
    return coefficients


def _cw_check(model: Model, values: Dict[str, np.ndarray], checked: List[_CWTerm], kappa: float):
    main = checked[0]
    margin = _margin(values[model.resolve_head(main.head)], main.label, main.targeted)
    ok = margin >= kappa
    for term in checked[1:]:
        ok = ok and int(np.argmax(values[model.resolve_head(term.head)])) == term.label
    return ok, margin


def _logit_gradients(model: Model, x: np.ndarray, head: str, coefficients: Dict) -> Tuple[np.ndarray, Dict]:
    # one forward pass, one backward per coefficient vector
    tape = Tape()
    xt = tape.variable(x)
    z = model.heads_on_tape(tape, xt, want=[head])[model.resolve_head(head)]
    grads = {}
    for key, row in coefficients.items():
        grads[key] = tape.backward(tape.forward(OpKind.SUM, tape.forward(OpKind.MUL, z, row))).wrt(xt)
    return z.values, grads


def _resolve_target(target, y_true: int, class_count: int, seed: int) -> Optional[int]:
    if target is None:
        return None
    if target == 'random':
        choices = [c for c in range(class_count) if c != y_true]
        return int(np.random.default_rng(seed).choice(choices))
    if target >= class_count:
        raise ValueError("Target class %d does not exist (%d classes)" % (target, class_count))
    return int(target)


def _check_example(model: Model, x: np.ndarray):
    if np.shape(x) != model.spec.input_shape:
        raise ValueError("Attacks take one example shaped %s, not %s" % (model.spec.input_shape, np.shape(x)))


def _runner_up(z: np.ndarray, label: int) -> int:
    masked = np.array(z, dtype=np.float64)
    masked[label] = -np.inf
    return int(np.argmax(masked))


def _stalled(loss: float, previous: float) -> bool:
    # less than a 0.01% improvement on |previous|, whichever side of zero the objective is on
    return bool(np.isfinite(previous)) and loss > previous - 1e-4 * abs(previous)


def _margin(z: np.ndarray, label: int, targeted: bool) -> float:
    """How far the label leads (targeted) or trails (untargeted) the strongest other class."""
    others = float(np.delete(z, label).max())
    return float(z[label]) - others if targeted else others - float(z[label])


def _is_adversarial(z: np.ndarray, y_true: Optional[int], target: Optional[int]) -> bool:
    predicted = int(np.argmax(z))
    return predicted == target if target is not None else predicted != y_true


def _result(model: Model, x: np.ndarray, perturbed: np.ndarray, success: Optional[bool], iterations: int,
            loss: float, y_true: Optional[int], target: Optional[int], head: str, **detail) -> AttackResult:
    # success is confirmed on a fresh forward pass unless forced
    z = model.logits(perturbed, head)
    if target is not None:
        margin = _margin(z, target, True)
    elif y_true is not None:
        margin = _margin(z, y_true, False)
    else:
        margin = 0.0
    if success is None:
        success = _is_adversarial(z, y_true, target)
    return _measured(x, perturbed, bool(success), iterations, loss, margin, -1 if target is None else target,
                     detail or None)


def _measured(x, perturbed, success, iterations, loss, margin, target, detail) -> AttackResult:
    delta = perturbed - x
    return AttackResult(perturbed, success, int(iterations), float(loss), float(margin),
                        float(np.sqrt((delta * delta).sum())), float(np.abs(delta).max(initial=0.0)),
                        int(target), detail)
