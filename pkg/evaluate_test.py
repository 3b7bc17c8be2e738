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
import os
import tempfile
import numpy as np
from unittest import TestCase, main
from cmtd.data import Dataset, AdversarialBatch
from cmtd.defence import Classmap
from cmtd.evaluate import ExperimentConfig, DetectionScores, scores_from_flags, eval_accuracy, detection_pr, \
    benign_tradeoff, classmap_similarity, transfer_sweep, generation_rate, trained_classmap, run_experiment
from cmtd.model import ModelSpec, build_model, save_weights
from cmtd.report import EvalReport, run_id, load_records
from data_test import synthetic_mnist


def small_model(variant: str='plain', seed: int=0):
    spec = ModelSpec([{'kind': 'dense', 'units': 6}], input_shape=(8, 8, 1), variant=variant)
    return build_model(spec, seed).mark_as_frozen()


def ten_class_map() -> Classmap:
    return Classmap({i: (i + 1) % 10 for i in range(10)})


class ScoringTest(TestCase):
    def test_accuracy(self):
        model = small_model(seed=1)
        images = np.random.default_rng(1).uniform(size=(5, 8, 8, 1))
        predictions = model.predict(images)
        self.assertTrue(eval_accuracy(model, Dataset(images, predictions)) == 1.0, 'own predictions score 1')
        wrong = predictions.copy()
        wrong[:2] = (wrong[:2] + 1) % 10
        self.assertAlmostEqual(eval_accuracy(model, Dataset(images, wrong)), 0.6, delta=1e-12)
        self.assertTrue(eval_accuracy(model, Dataset(images, wrong), reference_labels=predictions) == 1.0,
                        'reference labels should replace the dataset labels')
        with self.assertRaises(ValueError):
            eval_accuracy(model, Dataset(np.zeros((0, 8, 8, 1)), np.zeros(0)))

    def test_flags(self):
        scores = scores_from_flags([True, False], [True, False])
        self.assertTrue(scores == DetectionScores(1, 1, 1, 1), 'confusion counts wrong')
        self.assertTrue(scores.precision == 0.5 and scores.recall == 0.5, 'precision or recall wrong')
        nothing = scores_from_flags([False, False], [False])
        self.assertTrue(nothing.precision is None and nothing.recall == 0.0, 'nothing flagged has no precision')

    def test_detection_pr(self):
        model = small_model('defended_locked', 2)
        images = np.random.default_rng(2).uniform(size=(6, 8, 8, 1))
        labels = np.arange(6) % 10
        failed = AdversarialBatch(images, images, labels, attack='cw_l2', config={}, success=np.zeros(6, bool))
        with self.assertRaises(ValueError):
            detection_pr(model, ten_class_map(), failed, Dataset(images, labels))
        worked = AdversarialBatch(images, images, labels, attack='cw_l2', config={},
                                  success=[True, True, False, True, False, False])
        scores = detection_pr(model, ten_class_map(), worked, Dataset(images, labels))
        self.assertTrue(scores.true_positives + scores.false_negatives == 3, 'only successes are scored')
        self.assertTrue(scores.false_positives + scores.true_negatives == 3, 'as many benign as adversarial')

    def test_similarity(self):
        self.assertTrue(classmap_similarity(ten_class_map(), ten_class_map()) == 1.0, 'identical maps agree')
        changed = dict(ten_class_map().pairs)
        changed[4] = 0
        self.assertAlmostEqual(classmap_similarity(ten_class_map(), Classmap(changed)), 0.9, delta=1e-12)
        with self.assertRaises(ValueError):
            classmap_similarity(ten_class_map(), Classmap({0: 1, 1: 0}))

    def test_tradeoff(self):
        model = small_model('defended_locked', 3)
        images = np.random.default_rng(3).uniform(size=(20, 8, 8, 1))
        result = benign_tradeoff(model, model, ten_class_map(), Dataset(images, model.predict(images)))
        self.assertTrue(result['accuracy_drop'] == 0.0 and result['oracle_accuracy'] == 1.0, 'same model, no drop')
        self.assertTrue(0.0 <= result['misdetection_rate'] <= 1.0, 'misdetection rate out of range')
        if result['accepted_accuracy'] is not None:
            self.assertTrue(result['accepted_accuracy'] == 1.0, 'accepted examples keep their predicted label')

    def test_empty_sweeps(self):
        model = small_model(seed=4)
        empty = Dataset(np.zeros((0, 8, 8, 1)), np.zeros(0))
        self.assertTrue(transfer_sweep(model, model, empty, [0, 10], 5, 0) == [], 'no examples, no rows')
        self.assertTrue(generation_rate(model, empty, [0], 5, True, 0) == [], 'no examples, no rows')
        with self.assertRaises(ValueError):
            transfer_sweep(model, build_model(ModelSpec([], input_shape=(4,)), 0), empty, [0], 5, 0)

    def test_generation_rows(self):
        model = small_model(seed=5)
        images = np.random.default_rng(5).uniform(size=(3, 8, 8, 1))
        rows = generation_rate(model, Dataset(images, model.predict(images)), [0, 5], 3, False, 0,
                               cw={'max_iterations': 20, 'search_steps': 1}, workers=1)
        self.assertTrue([row['kappa'] for row in rows] == [0, 5], 'one row per kappa')
        self.assertTrue(all(0.0 <= row['rate'] <= 1.0 and row['n'] == 3 for row in rows), 'bad generation row')

    def test_generation_judged_by_defender(self):
        model = small_model('defended_locked', 6)
        images = np.random.default_rng(6).uniform(size=(4, 8, 8, 1))
        dataset = Dataset(images, model.predict(images))
        settings = {'cw': {'max_iterations': 30, 'search_steps': 2}, 'workers': 1}
        misled = generation_rate(model, dataset, [0], 4, False, 0, pairs={i: (i + 2) % 10 for i in range(10)},
                                 classmap=ten_class_map(), **settings)[0]
        self.assertTrue(misled['generated'] == 0 and misled['rate'] == 0.0,
                        'examples landing on pairs the defender does not hold were counted')
        informed = generation_rate(model, dataset, [0], 4, False, 0, pairs=ten_class_map().pairs,
                                   classmap=ten_class_map(), **settings)[0]
        self.assertTrue(informed['generated'] == informed['attack_successes'],
                        'successes on the defender pairs should all count')

    def test_generation_classmap_source(self):
        model = small_model('defended_locked', 7)
        images = np.random.default_rng(7).uniform(size=(2, 8, 8, 1))
        with self.assertRaises(ValueError):
            generation_rate(model, Dataset(images, model.predict(images)), [0], 2, False, 0)
        model.metadata['defence'] = {'classmap': ten_class_map().to_dict()}
        self.assertTrue(trained_classmap(model).pairs == ten_class_map().pairs, 'training metadata Classmap not used')


class ConfigTest(TestCase):
    def test_validation(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ValueError):
                ExperimentConfig(scenario='speedrun', data=tmp).validate()
            with self.assertRaises(ValueError):
                ExperimentConfig(scenario='benign_tradeoff', data=tmp, models={'oracle': 'x'}).validate()
            with self.assertRaises(ValueError):
                ExperimentConfig(scenario='benign_tradeoff', data=tmp,
                                 models={'oracle': 'x', 'defended': 'y'}).validate()
            with self.assertRaises(FileNotFoundError):
                ExperimentConfig(scenario='benign_tradeoff', data=tmp, classmap='z',
                                 models={'oracle': 'x', 'defended': 'y'}).validate()
            with self.assertRaises(ValueError):
                ExperimentConfig(scenario='transfer_sweep', data=tmp, kappas=[-1],
                                 models={'substitute': 'x', 'defended': 'y'}).validate(check_files=False)
            with self.assertRaises(ValueError):
                ExperimentConfig(flavour='strawberry')
            path = os.path.join(tmp, 'experiment.json')
            with open(path, 'w') as f:
                json.dump({'scenario': 'classmap_similarity', 'data': tmp, 'models': {'oracle': 'x'}}, f)
            config = ExperimentConfig.load(path, seed=5, out=None)
            self.assertTrue(config.seed == 5 and config.out is None, 'overrides not applied')
            self.assertTrue([a.kind for a in config.attack_configs()] == ['fgsm', 'igs', 'deepfool_linf', 'cw_l2',
                                                                          'jsma'], 'similarity attacks wrong')
            self.assertTrue(config.cw_config(20).kappa == 20.0, 'kappa not applied')


class ReportTest(TestCase):
    @staticmethod
    def report() -> EvalReport:
        report = EvalReport('transfer_sweep', {'seed': 1, 'n': 5})
        report.add_cell(model='defended', kappa=0, transfer_rate=0.25)
        report.add_sweep_row('transfer', kappa=0, rate=0.25)
        report.add_sweep_row('transfer', kappa=10, rate=0.5, note=None)
        report.add_matrix('vulnerability_fgsm', np.eye(2))
        report.add_records([{'index': 0, 'success': True}, {'index': 1, 'success': False}])
        return report.finish()

    def test_write(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'out.json')
            written = ReportTest.report().write(path)
            self.assertTrue(written[0] == path and all(os.path.exists(p) for p in written), 'files missing')
            with open(path) as f:
                document = json.load(f)
            self.assertTrue(document['cells'][0]['transfer_rate'] == 0.25 and document['record_count'] == 2,
                            'report content wrong')
            with open(os.path.join(tmp, 'out.transfer.csv')) as f:
                self.assertTrue(f.read() == 'kappa,rate,note\n0,0.25,\n10,0.5,\n', 'sweep csv wrong')
            with open(os.path.join(tmp, 'out.vulnerability_fgsm.csv')) as f:
                self.assertTrue(f.readline().strip() == 'row,0,1', 'matrix csv header wrong')
            self.assertTrue(load_records(os.path.join(tmp, 'out.records.cbor'))[1] == {'index': 1, 'success': False},
                            'records did not survive cbor')
            self.assertTrue([name for name in os.listdir(tmp) if name.startswith('.')] == [], 'temp files left')

    def test_rates_and_ids(self):
        report = EvalReport('benign_tradeoff', {'seed': 1})
        for bad in ({'misdetection_rate': 1.5}, {'precision': -0.1}, {'oracle_accuracy': 2.0}):
            with self.assertRaises(ValueError):
                report.add_cell(**bad)
        report.add_cell(precision=None, recall=0.0)
        self.assertTrue(run_id({'a': 1, 'b': 2}) == run_id({'b': 2, 'a': 1}), 'run id depends on key order')
        self.assertTrue(run_id({'a': 1}) != run_id({'a': 2}), 'different configs share a run id')
        report.add_error('stage', RuntimeError('broken'))
        self.assertTrue(report.failed and report.errors[0]['type'] == 'RuntimeError', 'error not recorded')


class ExperimentTest(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        directory = cls.tmp.name
        synthetic_mnist(directory, n=40)
        cls.paths = {}
        for role, variant, seed in (('oracle', 'plain', 1), ('defended', 'defended_locked', 2),
                                    ('substitute', 'plain', 3)):
            cls.paths[role] = os.path.join(directory, role + '.cmtd')
            save_weights(build_model(ModelSpec([{'kind': 'dense', 'units': 6}], input_shape=(8, 8, 1),
                                               variant=variant), seed), cls.paths[role])
        cls.classmap = os.path.join(directory, 'classmap.json')
        ten_class_map().save(cls.classmap)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def config(self, scenario: str, **kwargs) -> ExperimentConfig:
        return ExperimentConfig(scenario=scenario, data=ExperimentTest.tmp.name, models=dict(ExperimentTest.paths),
                                classmap=ExperimentTest.classmap, **kwargs)

    def test_benign_tradeoff(self):
        out = os.path.join(ExperimentTest.tmp.name, 'tradeoff.json')
        documents = []
        for _ in range(2):
            report = run_experiment(self.config('benign_tradeoff', n=30, out=out))
            self.assertFalse(report.failed, 'benign tradeoff failed: %s' % str(report.errors))
            with open(out) as f:
                document = json.load(f)
            del document['timing']
            documents.append(document)
        self.assertTrue(documents[0] == documents[1], 'reruns should match apart from timing')
        self.assertTrue(len(load_records(os.path.join(ExperimentTest.tmp.name, 'tradeoff.records.cbor'))) == 30,
                        'one record per example')

    def test_classmap_similarity(self):
        attacks = [{'kind': 'fgsm', 'epsilon': 0.1}, {'kind': 'igs', 'epsilon': 0.1, 'max_iterations': 3,
                                                     'igs_ascent': True}]
        report = run_experiment(self.config('classmap_similarity', attacks=attacks, n=40, workers=2))
        self.assertFalse(report.failed, 'similarity failed: %s' % str(report.errors))
        self.assertTrue([cell['attack'] for cell in report.cells] == ['fgsm', 'igs'], 'one cell per attack')
        self.assertTrue(report.cells[0]['agreement_rate'] == 1.0, 'the reference agrees with itself')
        self.assertTrue(set(report.matrices) == {'vulnerability_fgsm', 'vulnerability_igs'}, 'matrices missing')

    def test_blackbox_accuracy(self):
        attacks = [{'kind': 'fgsm', 'epsilon': 0.1}]
        report = run_experiment(self.config('blackbox_accuracy', attacks=attacks, n=10, workers=1))
        self.assertFalse(report.failed, 'blackbox accuracy failed: %s' % str(report.errors))
        self.assertTrue(report.cells[0]['attack'] == 'none' and report.cells[1]['attack'] == 'fgsm', 'cells wrong')
        self.assertTrue(len(report.records) == 10, 'one record per attacked example')

    def test_stage_failure_recorded(self):
        config = self.config('classmap_similarity', attacks=[{'kind': 'fgsm'}], n=5)
        report = run_experiment(config)
        self.assertTrue(report.failed, 'five examples cannot cover ten classes')
        self.assertTrue(report.errors[0]['stage'] == 'classmap_fgsm', 'failing stage not named')

    def test_missing_model(self):
        config = self.config('benign_tradeoff')
        config.models['defended'] = os.path.join(ExperimentTest.tmp.name, 'missing.cmtd')
        with self.assertRaises(FileNotFoundError):
            run_experiment(config)


if __name__ == '__main__':
    main()
