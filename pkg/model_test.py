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

import os
import tempfile
import numpy as np
from unittest import TestCase, main
from cmtd import FormatError, DivergenceError, ShapeError
from cmtd.data import Dataset
from cmtd.gradients import LossSpec, value_and_grad
from cmtd.model import ModelSpec, Model, build_model, clone_as_substitute, save_weights, load_weights, SEVER
from cmtd.training import Adam, OptimizerConfig, train_epoch, train, cross_entropy_builder


def toy_dataset(n: int=200, seed: int=0) -> Dataset:
    """Two well separated blobs in the unit square."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centres = np.where(labels[:, None] == 0, 0.2, 0.8)
    return Dataset(centres + rng.uniform(-0.05, 0.05, (n, 2)), labels, split='train', class_count=2)


def small_spec(variant: str='plain') -> ModelSpec:
    return ModelSpec([{'kind': 'conv2d', 'filters': 2, 'size': 3}, {'kind': 'maxpool'},
                      {'kind': 'dense', 'units': 6}], class_count=3, input_shape=(6, 6, 1), variant=variant)


class ModelTest(TestCase):
    def test_build_deterministic(self):
        first = build_model(small_spec('defended_locked'), 7)
        second = build_model(small_spec('defended_locked'), 7)
        other = build_model(small_spec('defended_locked'), 8)
        self.assertTrue(list(first.parameters) == list(second.parameters), 'parameter order changed')
        self.assertTrue(all(np.array_equal(first.parameters[n], second.parameters[n]) for n in first.parameters),
                        'same spec and seed should give the same parameters')
        self.assertFalse(np.array_equal(first.parameters['layer.0.w'], other.parameters['layer.0.w']),
                         'different seeds should differ')
        self.assertTrue(np.all(np.abs(first.parameters['lock.0.w']) <= 0.5), 'lock draws out of range')
        self.assertTrue(np.all(first.parameters['layer.0.b'] == 0.0), 'biases start at zero')

    def test_presets(self):
        desk = ModelSpec.desk().validate()
        self.assertTrue(0 < desk.parameter_count() < 200000, 'desk model is too big: %d' % desk.parameter_count())
        oracle = build_model(ModelSpec.full_oracle(), 0)
        self.assertTrue(oracle.logits(np.zeros((28, 28, 1))).shape == (10,), 'oracle logits have the wrong shape')
        collapsing = [dict(layer, padding='valid') if layer['kind'] == 'conv2d' else layer
                      for layer in ModelSpec.full_oracle().layers]
        with self.assertRaises(ShapeError):
            ModelSpec(collapsing).validate()
        cifar = ModelSpec.preset('full_substitute_cifar').validate()
        self.assertTrue(cifar.input_shape == (32, 32, 3), 'cifar substitute has the wrong input')
        with self.assertRaises(ValueError):
            ModelSpec.preset('enormous')
        with self.assertRaises(ValueError):
            ModelSpec([], variant='armoured').validate()
        with self.assertRaises(ValueError):
            ModelSpec([{'kind': 'lstm'}]).validate()

    def test_spec_hashing(self):
        spec = small_spec()
        self.assertTrue(spec == ModelSpec.from_dict(spec.to_dict()), 'spec did not survive to_dict')
        self.assertTrue(spec.architecture_hash() != spec.with_variant('defended_locked').architecture_hash(),
                        'variant should change the architecture hash')
        self.assertTrue(spec.trunk_hash() == spec.with_variant('defended_locked').trunk_hash(),
                        'variant should not change the trunk hash')

    def test_heads(self):
        x = np.random.default_rng(0).uniform(size=(4, 6, 6, 1))
        plain = build_model(small_spec(), 1)
        self.assertTrue(list(plain.forward_heads(x)) == ['z'], 'plain should only have Z')
        with self.assertRaises(ValueError):
            plain.forward_heads(x, ['z_star'])
        nolock = build_model(small_spec('defended_nolock'), 1)
        self.assertTrue(set(nolock.forward_heads(x)) == {'z', 'z_aux'}, 'no-lock model has Z and Z prime')
        self.assertTrue(nolock.main_head == 'z', 'no-lock main head is Z')

        locked = build_model(small_spec('defended_locked'), 1)
        heads = locked.forward_heads(x)
        self.assertTrue(np.array_equal(heads['z_star'], heads['z'] * locked.lock_output(heads['z_aux'])),
                        'Z* is not Z times g(Z prime)')
        self.assertTrue(np.array_equal(locked.predict(x), np.argmax(heads['z_star'], axis=1)),
                        'predict should use Z*')
        ones = locked.forward_heads(x, lock_override=np.ones(3))
        self.assertTrue(np.array_equal(ones['z_star'], ones['z']), 'an all ones lock should give Z* == Z')
        with self.assertRaises(ValueError):
            locked.forward_heads(x + 1.0)
        with self.assertRaises(ShapeError):
            locked.forward_heads(np.zeros((4, 5, 5, 1)))

    def test_chunked_inference(self):
        model = build_model(ModelSpec([{'kind': 'dense', 'units': 4}], class_count=3, input_shape=(5,)), 2)
        x = np.random.default_rng(2).uniform(size=(600, 5))
        chunked = model.logits(x)
        self.assertTrue(chunked.shape == (600, 3), 'chunks were not joined')
        self.assertTrue(np.allclose(chunked[300:310], model.logits(x[300:310]), rtol=0, atol=1e-12),
                        'chunked inference differs')

    def test_severed_lock(self):
        model = build_model(small_spec('defended_locked'), 3)
        x = np.random.default_rng(3).uniform(size=(6, 6, 1))
        loss = LossSpec.cross_entropy(1)
        attached = value_and_grad(model, x, loss)
        severed = value_and_grad(model, x, loss, lock_override=SEVER)
        self.assertTrue(abs(attached[0] - severed[0]) < 1e-12, 'severing should not change the loss')
        self.assertFalse(np.allclose(attached[1], severed[1]), 'severing should change the input gradient')

    def test_update_parameter(self):
        model = build_model(small_spec('defended_locked'), 4)
        with self.assertRaises(ValueError):
            model.update_parameter('lock.0.w', np.zeros((3, 3)))
        with self.assertRaises(ShapeError):
            model.update_parameter('head.z.b', np.zeros(4))
        old = model.parameters['head.z.b']
        model.update_parameter('head.z.b', np.ones(3))
        self.assertTrue(np.all(old == 0.0), 'the old array should not be changed')
        model.mark_as_frozen()
        with self.assertRaises(ValueError):
            model.update_parameter('head.z.b', np.zeros(3))
        self.assertFalse(model.copy().frozen, 'copies start thawed')


class TrainingTest(TestCase):
    def test_toy_epoch(self):
        model = build_model(ModelSpec([], class_count=2, input_shape=(2,)), 0)
        for name in model.trainable_names:
            model.update_parameter(name, np.zeros_like(model.parameters[name]))
        metrics = train_epoch(model, toy_dataset(), optimizer=Adam(OptimizerConfig(learning_rate=0.1, batch_size=4)))
        self.assertTrue(metrics.accuracy == 1.0, 'toy data should separate after one epoch: %s' % str(metrics))
        self.assertTrue(metrics.batches == 50 and metrics.examples == 200, 'wrong batch count')

    def test_lock_frozen(self):
        model = build_model(ModelSpec([{'kind': 'dense', 'units': 4}], class_count=2, input_shape=(2,),
                                      variant='defended_locked'), 5)
        before = {name: values.copy() for name, values in model.parameters.items()}
        train(model, toy_dataset(40), 2, config=OptimizerConfig(batch_size=8), seed=3)
        for name in model.frozen_names:
            self.assertTrue(np.array_equal(before[name], model.parameters[name]), name + ' moved in training')
        self.assertFalse(np.array_equal(before['head.z.w'], model.parameters['head.z.w']), 'Z head did not train')
        self.assertTrue(model.metadata['epochs'] == 2, 'epochs not recorded')

    def test_training_deterministic(self):
        models = [build_model(ModelSpec([{'kind': 'dense', 'units': 3}], class_count=2, input_shape=(2,)), 6)
                  for _ in range(2)]
        for model in models:
            train(model, toy_dataset(30), 2, config=OptimizerConfig(batch_size=7), seed=11)
        self.assertTrue(all(np.array_equal(models[0].parameters[n], models[1].parameters[n])
                            for n in models[0].parameters), 'same seed should train the same weights')

    def test_errors(self):
        model = build_model(ModelSpec([], class_count=2, input_shape=(2,)), 0)
        with self.assertRaises(ValueError):
            train_epoch(model, Dataset(np.zeros((0, 2)), np.zeros(0), class_count=2))

        def poisoned(tape, m, params, x, labels):
            loss, z, terms = cross_entropy_builder(tape, m, params, x, labels)
            return tape.constant(np.nan), z, terms

        with self.assertRaises(DivergenceError) as context:
            train_epoch(model, toy_dataset(8), poisoned)
        self.assertTrue(context.exception.batch_index == 0, 'divergence should name the batch')
        model.mark_as_frozen()
        with self.assertRaises(ValueError):
            train_epoch(model, toy_dataset(8))
        with self.assertRaises(ValueError):
            OptimizerConfig(learning_rate=0.0).validate()


class WeightsTest(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.model = build_model(small_spec('defended_locked'), 9)
        cls.model.metadata['epochs'] = 3
        cls.path = os.path.join(cls.tmp.name, 'model.cmtd')
        save_weights(cls.model, cls.path)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_round_trip(self):
        loaded = load_weights(WeightsTest.path, expected=small_spec('defended_locked'))
        x = np.random.default_rng(9).uniform(size=(3, 6, 6, 1))
        self.assertTrue(loaded.seed == 9 and loaded.metadata['epochs'] == 3, 'manifest lost the seed or metadata')
        for head, values in WeightsTest.model.forward_heads(x).items():
            self.assertTrue(np.array_equal(values, loaded.forward_heads(x)[head]), head + ' changed on reload')
        self.assertTrue(isinstance(loaded, Model) and not loaded.frozen, 'loaded models start thawed')

    def test_wrong_architecture(self):
        with self.assertRaises(ValueError):
            load_weights(WeightsTest.path, expected=small_spec('plain'))

    def test_truncated(self):
        with open(WeightsTest.path, 'rb') as f:
            data = f.read()
        for length in (3, 40, len(data) - 5, len(data) - 1):
            path = os.path.join(WeightsTest.tmp.name, 'truncated.cmtd')
            with open(path, 'wb') as f:
                f.write(data[:length])
            with self.assertRaises(FormatError) as context:
                load_weights(path)
            self.assertTrue(context.exception.offset == length, 'truncation offset should be where data ran out')

    def test_bad_magic(self):
        path = os.path.join(WeightsTest.tmp.name, 'magic.cmtd')
        with open(WeightsTest.path, 'rb') as f:
            data = f.read()
        with open(path, 'wb') as f:
            f.write(b'XXXX' + data[4:])
        with self.assertRaises(FormatError) as context:
            load_weights(path)
        self.assertTrue(context.exception.offset == 0, 'bad magic is at offset 0')


class SubstituteTest(TestCase):
    def test_worst_case(self):
        oracle = build_model(small_spec('defended_locked'), 10)
        substitute = clone_as_substitute(oracle, small_spec(), worst_case=True, seed=1)
        x = np.random.default_rng(10).uniform(size=(5, 6, 6, 1))
        self.assertTrue(np.array_equal(substitute.logits(x), oracle.logits(x, 'z')),
                        'worst case substitute should reproduce the oracle Z head')
        self.assertTrue(substitute.variant == 'plain', 'substitute variant comes from its spec')

    def test_mismatch_and_fresh(self):
        oracle = build_model(small_spec(), 11)
        other = ModelSpec([{'kind': 'dense', 'units': 5}], class_count=3, input_shape=(6, 6, 1))
        with self.assertRaises(ValueError):
            clone_as_substitute(oracle, other, worst_case=True)
        with self.assertRaises(ValueError):
            clone_as_substitute(small_spec(), small_spec(), worst_case=True)
        fresh = clone_as_substitute(oracle, small_spec(), seed=12)
        self.assertFalse(np.array_equal(fresh.parameters['layer.0.w'], oracle.parameters['layer.0.w']),
                         'a normal substitute starts from its own seed')


if __name__ == '__main__':
    main()
