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
import os
import numpy as np
from typing import Optional, List, Dict, NamedTuple, Mapping
from .model import Model, MAIN, load_weights, clone_as_substitute
from .data import Dataset, AdversarialBatch, load_directory, make_desk_subset
from .attacks import AttackConfig, batch_attack, infer_classmap_by_query
from .defence import Classmap, classify_or_reject, estimate_vulnerability, encode_classmap
from .report import EvalReport

SCENARIOS = ('blackbox_accuracy', 'transfer_sweep', 'detection_pr', 'worst_case_blackbox', 'greybox_generation',
             'benign_tradeoff', 'classmap_similarity')
REQUIRED_MODELS = {'blackbox_accuracy': ('oracle', 'defended', 'substitute'),
                   'transfer_sweep': ('substitute', 'defended'),
                   'detection_pr': ('substitute', 'defended'),
                   'worst_case_blackbox': ('defended',),
                   'greybox_generation': ('defended',),
                   'benign_tradeoff': ('oracle', 'defended'),
                   'classmap_similarity': ('oracle',)}
NEEDS_CLASSMAP = ('detection_pr', 'worst_case_blackbox', 'benign_tradeoff')
BLACKBOX_ATTACKS = ('fgsm', 'igs', 'deepfool_linf', 'jsma')
SIMILARITY_ATTACKS = ('fgsm', 'igs', 'deepfool_linf', 'cw_l2', 'jsma')


class ExperimentConfig:
    """What to run, on what, and where to put the report.

    :param scenario: One of SCENARIOS.
    :param data: A directory holding MNIST IDX or CIFAR-10 binary files.
    :param models: role -> weight file, roles being oracle, defended, substitute and defended_nolock.
    :param classmap: A Classmap JSON file.
    :param attacks: Attack config dicts - default to the scenario's usual set.
    :param cw: Overrides applied to every C&W attack the scenario builds (iterations, search steps...).
    :param kappas: The confidence sweep.
    :param n: How many examples to attack.
    :param generation_n: How many inputs the grey-box generation sweep attacks.
    :param n_per_class: If set, first take a class balanced desk subset of this size per class.
    :param against_benign: Also score adversarial accuracy against the model's own benign predictions."""

    FIELDS = {'scenario': None, 'data': None, 'split': 'test', 'n': 1000, 'n_per_class': None, 'subset_seed': 0,
              'models': {}, 'classmap': None, 'attacks': None, 'cw': {}, 'kappas': [0, 10, 20, 30, 40],
              'generation_n': 100, 'seed': 0, 'out': None, 'workers': None, 'against_benign': True}

    def __init__(self, **kwargs):
        unknown = set(kwargs) - set(ExperimentConfig.FIELDS)
        if unknown:
            raise ValueError("Unknown experiment config fields: " + ', '.join(sorted(unknown)))
        for name, default in ExperimentConfig.FIELDS.items():
            value = kwargs.get(name, default)
            setattr(self, name, dict(value) if isinstance(value, dict) else value)

    def validate(self, *, check_files: bool=True) -> 'ExperimentConfig':
        """Everything a scenario needs, checked before any compute."""
        if self.scenario not in SCENARIOS:
            raise ValueError("Scenario needs to be one of %s, not: %s" % (', '.join(SCENARIOS), self.scenario))
        if self.data is None:
            raise ValueError("Experiment config needs a 'data' directory")
        if int(self.n) < 0 or any(k < 0 for k in self.kappas):
            raise ValueError("Example counts and kappas cannot be negative")
        missing = [role for role in REQUIRED_MODELS[self.scenario] if role not in self.models]
        if missing:
            raise ValueError("Scenario %s needs model paths for: %s" % (self.scenario, ', '.join(missing)))
        if self.scenario in NEEDS_CLASSMAP and self.classmap is None:
            raise ValueError("Scenario %s needs a classmap" % self.scenario)
        for attack in self.attack_configs():
            attack.validate()
        AttackConfig('cw_l2', **self.cw).validate()
        if check_files:
            for path in list(self.models.values()) + ([self.classmap] if self.classmap else []) + [self.data]:
                if not os.path.exists(path):
                    raise FileNotFoundError("No such file or directory: " + path)
        return self

    def attack_configs(self) -> List[AttackConfig]:
        if self.attacks is not None:
            return [AttackConfig.from_dict(a) for a in self.attacks]
        names = SIMILARITY_ATTACKS if self.scenario == 'classmap_similarity' else BLACKBOX_ATTACKS
        return [AttackConfig.preset(name, **(self.cw if name.startswith('cw') else {})) for name in names]

    def cw_config(self, kappa: float, **changes) -> AttackConfig:
        return AttackConfig('cw_l2', **dict(self.cw, kappa=float(kappa), **changes)).validate()

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in ExperimentConfig.FIELDS}

    @staticmethod
    def from_dict(d: dict) -> 'ExperimentConfig':
        return ExperimentConfig(**d)

    @staticmethod
    def load(path: str, **overrides) -> 'ExperimentConfig':
        with open(path) as f:
            try:
                d = json.load(f)
            except ValueError as e:
                raise ValueError("Experiment config is not json: %s (%s)" % (path, str(e)))
        d.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.from_dict(d)

    def __repr__(self):
        return "<ExperimentConfig %s n=%d seed=%d>" % (self.scenario, self.n, self.seed)


class DetectionScores(NamedTuple):
    true_positives: int
    false_positives: int
    false_negatives: int
    true_negatives: int

    @property
    def precision(self) -> Optional[float]:
        flagged = self.true_positives + self.false_positives
        return None if flagged == 0 else self.true_positives / flagged

    @property
    def recall(self) -> float:
        adversarial = self.true_positives + self.false_negatives
        return 0.0 if adversarial == 0 else self.true_positives / adversarial


def scores_from_flags(adversarial_flagged: List[bool], benign_flagged: List[bool]) -> DetectionScores:
    """Confusion counts where 'flagged' means rejected as adversarial."""
    tp = sum(1 for f in adversarial_flagged if f)
    fp = sum(1 for f in benign_flagged if f)
    return DetectionScores(tp, fp, len(adversarial_flagged) - tp, len(benign_flagged) - fp)


def eval_accuracy(model: Model, dataset: Dataset, head: str=MAIN, *,
                  reference_labels: Optional[np.ndarray]=None) -> float:
    """Fraction of argmax(head) matching the labels (or reference_labels, e.g. predictions on benign originals)."""
    if len(dataset) == 0:
        raise ValueError("Cannot score accuracy on an empty dataset")
    labels = dataset.labels if reference_labels is None else np.asarray(reference_labels)
    return float(np.mean(model.predict(dataset.images, head) == labels))


def batch_as_dataset(batch: AdversarialBatch, *, successful_only: bool=False) -> Dataset:
    chosen = batch.successful() if successful_only else batch
    return Dataset(chosen.perturbed, chosen.labels, split='adversarial', provenance={'attack': batch.attack})


def transfer_sweep(substitute: Model, defended: Model, dataset: Dataset, kappas: List[float], n: int, seed: int, *,
                   cw: Optional[dict]=None, workers: Optional[int]=None) -> List[dict]:
    """For each kappa, the fraction of substitute-made C&W examples that change the defended main head's label.

    :return: One row per kappa - rate, transferred count, attack failures (counted as non-transfers) and n."""
    if tuple(substitute.spec.input_shape) != tuple(defended.spec.input_shape):
        raise ValueError("Substitute and defended model take different inputs")
    subset = dataset.head(n)
    rows = []
    if len(subset) == 0:
        return rows
    benign_labels = defended.predict(subset.images)
    for kappa in kappas:
        config = AttackConfig('cw_l2', **dict(cw or {}, kappa=float(kappa))).validate()
        batch = batch_attack(substitute, subset, config, seed, workers=workers)
        changed = defended.predict(batch.perturbed) != benign_labels
        transferred = batch.success & changed
        rows.append({'kappa': kappa, 'rate': float(transferred.mean()), 'transferred': int(transferred.sum()),
                     'attack_failures': int((~batch.success).sum()), 'n': len(batch)})
        logging.info("Transfer at kappa=%g: %.3f" % (kappa, rows[-1]['rate']))
    return rows


def detection_pr(defended: Model, classmap: Classmap, adversarial_batch: AdversarialBatch,
                 benign_set: Dataset) -> DetectionScores:
    """Precision and recall of the pair detector on the successful adversarial examples mixed with as many
    benign examples."""
    adversarial = adversarial_batch.successful()
    if len(adversarial) == 0:
        raise ValueError("No successful adversarial examples to detect")
    benign = benign_set.head(len(adversarial))
    adversarial_flags = [not v.accepted for v in classify_or_reject(defended, classmap, adversarial.perturbed).verdicts]
    benign_flags = [not v.accepted for v in classify_or_reject(defended, classmap, benign.images).verdicts]
    return scores_from_flags(adversarial_flags, benign_flags)


def generation_rate(model: Model, dataset: Dataset, kappas: List[float], n: int, targeted: bool, seed: int, *,
                    pairs: Optional[Mapping[int, int]]=None, classmap: Optional[Classmap]=None,
                    cw: Optional[dict]=None, eta: tuple=(0.5, 0.5), workers: Optional[int]=None) -> List[dict]:
    """For each kappa, the fraction of inputs for which C&W finds a valid adversarial example.

    Against a defended model this is the combined attack, aiming at the attacker's pairs (recovered by query
    unless given), and an example only counts when the defender's Classmap accepts it. Against a plain model
    it is the single head attack. Targeted attacks pick a random target per example.

    :param pairs: What the attacker believes the label pairs are.
    :param classmap: The defender's Classmap, defaults to the one the model was trained with."""
    subset = dataset.head(n)
    rows = []
    if len(subset) == 0:
        return rows
    defender = None
    if model.spec.defended:
        defender = classmap if classmap is not None else trained_classmap(model)
        if pairs is None:
            pairs = infer_classmap_by_query(model, subset.images)
    for kappa in kappas:
        kind = 'cw_l2_combined' if model.spec.defended else 'cw_l2'
        changes = dict(cw or {}, kappa=float(kappa), target='random' if targeted else None)
        if kind == 'cw_l2_combined':
            changes.update(eta1=eta[0], eta2=eta[1])
        batch = batch_attack(model, subset, AttackConfig(kind, **changes).validate(), seed, pairs=pairs,
                             workers=workers)
        valid = batch.success.copy()
        if defender is not None:
            valid &= classify_or_reject(model, defender, batch.perturbed).labels >= 0
        rows.append({'kappa': kappa, 'targeted': targeted, 'rate': float(valid.mean()),
                     'generated': int(valid.sum()), 'attack_successes': int(batch.success.sum()),
                     'n': len(batch)})
        logging.info("Generation (%s, %s) at kappa=%g: %.3f" %
                     (model.variant, 'targeted' if targeted else 'nontargeted', kappa, rows[-1]['rate']))
    return rows


def trained_classmap(model: Model) -> Classmap:
    """The Classmap a defended model was trained against, from its training metadata."""
    try:
        return Classmap.from_dict(model.metadata['defence']['classmap'])
    except (KeyError, TypeError):
        raise ValueError("No Classmap in the training metadata of %s - pass the defender's" % repr(model))



def benign_tradeoff(oracle: Model, defended: Model, classmap: Classmap, test_set: Dataset) -> dict:
    """Benign accuracy of both models, the defended model's benign rejection rate, and its accuracy on the
    examples the detector accepts."""
    oracle_accuracy = eval_accuracy(oracle, test_set)
    defended_accuracy = eval_accuracy(defended, test_set)
    classified = classify_or_reject(defended, classmap, test_set.images)
    accepted = classified.labels >= 0
    accepted_accuracy = float(np.mean(classified.labels[accepted] == test_set.labels[accepted])) \
        if np.any(accepted) else None
    return {'oracle_accuracy': oracle_accuracy,
            'defended_accuracy': defended_accuracy,
            'accuracy_drop': oracle_accuracy - defended_accuracy,
            'misdetection_rate': classified.rejection_rate,
            'accepted_accuracy': accepted_accuracy}


def classmap_similarity(map_a: Classmap, map_b: Classmap) -> float:
    """Fraction of classes given the same robust label by both maps."""
    if map_a.class_count != map_b.class_count:
        raise ValueError("Classmaps have %d and %d classes" % (map_a.class_count, map_b.class_count))
    same = sum(1 for label in map_a.pairs if map_a.robust(label) == map_b.robust(label))
    return same / map_a.class_count


def run_experiment(config: ExperimentConfig) -> EvalReport:
    """Run a scenario and write its report (plus sidecars) if config.out is set.

    A failing stage is recorded in the report's errors and the run carries on where it can -
    check report.failed."""
    config.validate()
    report = EvalReport(config.scenario, config.to_dict())
    logging.info("Running %s (run %s)" % (config.scenario, report.run_id))
    models = _ModelCache(config.models)
    try:
        dataset = _dataset(config)
        _RUNNERS[config.scenario](config, models, dataset, report)
    except Exception as e:
        report.add_error(config.scenario, e)
    report.finish()
    if config.out is not None:
        report.write(config.out)
    return report


class _ModelCache:
    # loads each role's weights once and hands out frozen models
    def __init__(self, paths: Dict[str, str]):
        self.paths = paths
        self.loaded = {}

    def __getitem__(self, role: str) -> Model:
        if role not in self.loaded:
            self.loaded[role] = load_weights(self.paths[role]).mark_as_frozen()
        return self.loaded[role]

    def __contains__(self, role: str):
        return role in self.paths


def _dataset(config: ExperimentConfig) -> Dataset:
    dataset = load_directory(config.data, config.split)
    if config.n_per_class is not None:
        dataset = make_desk_subset(dataset, config.n_per_class, config.subset_seed)
    return dataset


def _classmap(config: ExperimentConfig) -> Classmap:
    return Classmap.load(config.classmap)


def _blackbox_accuracy(config: ExperimentConfig, models: _ModelCache, dataset: Dataset, report: EvalReport):
    oracle, defended, substitute = models['oracle'], models['defended'], models['substitute']
    subset = dataset.head(config.n)
    oracle_benign = oracle.predict(subset.images)
    defended_benign = defended.predict(subset.images)
    report.add_cell(attack='none', oracle_accuracy=eval_accuracy(oracle, subset),
                    defended_accuracy=eval_accuracy(defended, subset))
    for attack in config.attack_configs():
        stage = attack.kind
        try:
            batch = batch_attack(substitute, subset, attack, config.seed, workers=config.workers)
            adversarial = batch_as_dataset(batch)
            oracle_labels = oracle.predict(adversarial.images)
            defended_labels = defended.predict(adversarial.images)
            cell = {'attack': attack.kind,
                    'substitute_success_rate': batch.success_rate,
                    'oracle_accuracy': float(np.mean(oracle_labels == batch.labels)),
                    'defended_accuracy': float(np.mean(defended_labels == batch.labels))}
            if config.against_benign:
                cell['oracle_accuracy_vs_benign'] = float(np.mean(oracle_labels == oracle_benign))
                cell['defended_accuracy_vs_benign'] = float(np.mean(defended_labels == defended_benign))
            report.add_cell(**cell)
            report.add_records([{'attack': attack.kind, 'index': i, 'label': int(batch.labels[i]),
                                 'success': bool(batch.success[i]), 'oracle_label': int(oracle_labels[i]),
                                 'defended_label': int(defended_labels[i]),
                                 'oracle_benign_label': int(oracle_benign[i]),
                                 'defended_benign_label': int(defended_benign[i]),
                                 'l2': float(batch.l2[i]), 'linf': float(batch.linf[i])}
                                for i in range(len(batch))])
        except Exception as e:
            report.add_error(stage, e)


def _transfer_sweep(config: ExperimentConfig, models: _ModelCache, dataset: Dataset, report: EvalReport):
    targets = [('defended', models['defended'])]
    if 'oracle' in models:
        targets.append(('oracle', models['oracle']))
    for role, target in targets:
        try:
            rows = transfer_sweep(models['substitute'], target, dataset, config.kappas, config.n, config.seed,
                                  cw=config.cw, workers=config.workers)
        except Exception as e:
            report.add_error('transfer_' + role, e)
            continue
        for row in rows:
            report.add_sweep_row('transfer', model=role, **row)
            report.add_cell(model=role, kappa=row['kappa'], transfer_rate=row['rate'])


def _detection(config: ExperimentConfig, substitute: Model, defended: Model, dataset: Dataset, report: EvalReport,
               sweep: str):
    classmap = _classmap(config)
    subset = dataset.head(config.n)
    for kappa in config.kappas:
        try:
            batch = batch_attack(substitute, subset, config.cw_config(kappa), config.seed, workers=config.workers)
            scores = detection_pr(defended, classmap, batch, dataset)
        except Exception as e:
            report.add_error('%s_kappa_%g' % (sweep, kappa), e)
            continue
        row = {'kappa': kappa, 'precision': scores.precision, 'recall': scores.recall,
               'true_positives': scores.true_positives, 'false_positives': scores.false_positives,
               'false_negatives': scores.false_negatives, 'true_negatives': scores.true_negatives,
               'attack_success_rate': batch.success_rate}
        report.add_cell(**row)
        report.add_sweep_row(sweep, **row)
        successful = batch.successful()
        verdicts = classify_or_reject(defended, classmap, successful.perturbed).verdicts
        report.add_records([{'kappa': kappa, 'set': 'adversarial', 'label': int(successful.labels[i]),
                             'accepted': v.accepted, 'predicted': v.predicted, 'auxiliary': v.auxiliary}
                            for i, v in enumerate(verdicts)])
        benign = dataset.head(len(successful))
        verdicts = classify_or_reject(defended, classmap, benign.images).verdicts
        report.add_records([{'kappa': kappa, 'set': 'benign', 'label': int(benign.labels[i]),
                             'accepted': v.accepted, 'predicted': v.predicted, 'auxiliary': v.auxiliary}
                            for i, v in enumerate(verdicts)])


def _detection_pr(config: ExperimentConfig, models: _ModelCache, dataset: Dataset, report: EvalReport):
    _detection(config, models['substitute'], models['defended'], dataset, report, 'detection')


def _worst_case_blackbox(config: ExperimentConfig, models: _ModelCache, dataset: Dataset, report: EvalReport):
    defended = models['defended']
    substitute = clone_as_substitute(defended, defended.spec.with_variant('plain'), worst_case=True,
                                     seed=config.seed).mark_as_frozen()
    _detection(config, substitute, defended, dataset, report, 'worst_case_detection')


def _greybox_generation(config: ExperimentConfig, models: _ModelCache, dataset: Dataset, report: EvalReport):
    n = config.generation_n
    defender = _classmap(config) if config.classmap is not None else None
    for role in ('defended', 'defended_nolock', 'oracle'):
        if role not in models:
            continue
        for targeted in (True, False):
            try:
                rows = generation_rate(models[role], dataset, config.kappas, n, targeted, config.seed,
                                       classmap=defender, cw=config.cw,
                                       workers=config.workers)
            except Exception as e:
                report.add_error('generation_%s_%s' % (role, 'targeted' if targeted else 'nontargeted'), e)
                continue
            for row in rows:
                report.add_sweep_row('generation', model=role, **row)
                report.add_cell(model=role, kappa=row['kappa'], targeted=targeted, generation_rate=row['rate'])


def _benign_tradeoff(config: ExperimentConfig, models: _ModelCache, dataset: Dataset, report: EvalReport):
    subset = dataset.head(config.n)
    result = benign_tradeoff(models['oracle'], models['defended'], _classmap(config), subset)
    report.add_cell(**result)
    classified = classify_or_reject(models['defended'], _classmap(config), subset.images)
    oracle_labels = models['oracle'].predict(subset.images)
    report.add_records([{'index': i, 'label': int(subset.labels[i]), 'oracle_label': int(oracle_labels[i]),
                         'accepted': v.accepted, 'predicted': v.predicted, 'auxiliary': v.auxiliary}
                        for i, v in enumerate(classified.verdicts)])


def _classmap_similarity(config: ExperimentConfig, models: _ModelCache, dataset: Dataset, report: EvalReport):
    model = models['oracle']
    subset = dataset.head(config.n)
    maps = {}
    for attack in config.attack_configs():
        try:
            batch = batch_attack(model, subset, attack, config.seed, workers=config.workers)
            vulnerability = estimate_vulnerability(model, batch.perturbed, batch.labels)
        except Exception as e:
            report.add_error('classmap_' + attack.kind, e)
            continue
        maps[attack.kind] = encode_classmap(vulnerability, source_attack=attack.kind, epsilon=attack.epsilon,
                                            model_hash=model.architecture_hash())
        report.add_matrix('vulnerability_' + attack.kind, vulnerability.matrix)
        report.add_records([{'attack': attack.kind, 'label': label, 'robust': robust}
                            for label, robust in sorted(maps[attack.kind].pairs.items())])
    if not maps:
        return
    reference_name = 'fgsm' if 'fgsm' in maps else sorted(maps)[0]
    for name, classmap in maps.items():
        report.add_cell(attack=name, reference=reference_name,
                        agreement_rate=classmap_similarity(maps[reference_name], classmap),
                        pairs=[[k, v] for k, v in sorted(classmap.pairs.items())])


_RUNNERS = {'blackbox_accuracy': _blackbox_accuracy,
            'transfer_sweep': _transfer_sweep,
            'detection_pr': _detection_pr,
            'worst_case_blackbox': _worst_case_blackbox,
            'greybox_generation': _greybox_generation,
            'benign_tradeoff': _benign_tradeoff,
            'classmap_similarity': _classmap_similarity}
