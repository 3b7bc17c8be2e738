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

import gzip
import hashlib
import os
import struct
import tempfile
import numpy as np
from unittest import TestCase, main
from cmtd import FormatError
from cmtd.data import Dataset, load_mnist_idx, load_cifar10_bin, load_directory, make_desk_subset, distortions, \
    AdversarialBatch, save_batch, load_batch
from cmtd.rng import SplitMix64, derive_seed
from cmtd.store import BATCH_MAGIC, encode_container, decode_container


def write_mnist(directory: str, pixels: np.ndarray, labels, split: str='test'):
    """IDX image and label files for uint8 pixels shaped (n, rows, cols)."""
    prefix = 'train' if split == 'train' else 't10k'
    n, rows, cols = pixels.shape
    image_path = os.path.join(directory, prefix + '-images-idx3-ubyte')
    label_path = os.path.join(directory, prefix + '-labels-idx1-ubyte')
    with open(image_path, 'wb') as f:
        f.write(struct.pack('>IIII', 0x803, n, rows, cols) + pixels.astype(np.uint8).tobytes())
    with open(label_path, 'wb') as f:
        f.write(struct.pack('>II', 0x801, n) + bytes(labels))
    return image_path, label_path


def synthetic_mnist(directory: str, n: int=40, size: int=8, seed: int=0, split: str='test'):
    """Random n images of size x size, labels cycling through the ten classes."""
    pixels = np.random.default_rng(seed).integers(0, 256, size=(n, size, size), dtype=np.uint8)
    return write_mnist(directory, pixels, [i % 10 for i in range(n)], split)


class MnistTest(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_pixels(self):
        pixels = np.zeros((3, 2, 2), dtype=np.uint8)
        pixels[1] = 255
        pixels[2] = [[1, 128], [254, 7]]
        image_path, label_path = write_mnist(self.tmp.name, pixels, [3, 1, 4])
        dataset = load_mnist_idx(image_path, label_path)
        self.assertTrue(dataset.images.shape == (3, 2, 2, 1), 'images should be (n, h, w, 1)')
        self.assertTrue(np.all(dataset.images[0] == 0.0) and np.all(dataset.images[1] == 1.0), 'endpoints wrong')
        self.assertTrue(np.array_equal(np.round(dataset.images[2, :, :, 0] * 255), pixels[2]), 'scaling not 1/255')
        self.assertTrue(dataset.labels.tolist() == [3, 1, 4], 'labels wrong')
        with open(image_path, 'rb') as f:
            self.assertTrue(dataset.provenance['files']['t10k-images-idx3-ubyte'] ==
                            hashlib.sha256(f.read()).hexdigest(), 'provenance hash wrong')

    def test_bad_files(self):
        image_path, label_path = synthetic_mnist(self.tmp.name, n=5)
        with self.assertRaises(FormatError) as context:
            load_mnist_idx(label_path, label_path)
        self.assertTrue(context.exception.offset == 0, 'bad magic is at offset 0')

        with open(image_path, 'rb') as f:
            data = f.read()
        truncated = os.path.join(self.tmp.name, 'truncated')
        with open(truncated, 'wb') as f:
            f.write(data[:100])
        with self.assertRaises(FormatError) as context:
            load_mnist_idx(truncated, label_path)
        self.assertTrue(context.exception.offset == 100, 'truncation should report where the data ran out')

        _, short_labels = write_mnist(self.tmp.name, np.zeros((4, 8, 8), np.uint8), [0, 1, 2, 3], 'train')
        with self.assertRaises(FormatError) as context:
            load_mnist_idx(image_path, short_labels)
        self.assertTrue(context.exception.offset == 4, 'count mismatch is at the label count')

        images, labels = write_mnist(self.tmp.name, np.zeros((3, 2, 2), np.uint8), [1, 12, 2], 'train')
        with self.assertRaises(FormatError) as context:
            load_mnist_idx(images, labels)
        self.assertTrue(context.exception.offset == 9, 'bad label offset wrong')

    def test_directory(self):
        synthetic_mnist(self.tmp.name, n=20, split='train')
        self.assertTrue(len(load_directory(self.tmp.name, 'train')) == 20, 'train split not found')
        with self.assertRaises(FileNotFoundError):
            load_directory(self.tmp.name, 'test')
        with self.assertRaises(ValueError):
            load_directory(self.tmp.name, 'validation')

    def test_gzipped(self):
        plain = load_mnist_idx(*synthetic_mnist(self.tmp.name, n=12))
        zipped = os.path.join(self.tmp.name, 'zipped')
        os.mkdir(zipped)
        for name in ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'):
            with open(os.path.join(self.tmp.name, name), 'rb') as src, \
                    gzip.open(os.path.join(zipped, name + '.gz'), 'wb') as dest:
                dest.write(src.read())
        dataset = load_directory(zipped, 'test')
        self.assertTrue(np.array_equal(dataset.images, plain.images) and np.array_equal(dataset.labels, plain.labels),
                        'gzipped files should load the same')


class CifarTest(TestCase):
    @staticmethod
    def record(label: int, red: int=10, green: int=20, blue: int=30) -> bytes:
        planes = np.concatenate([np.full(1024, red), np.full(1024, green), np.full(1024, blue)]).astype(np.uint8)
        planes[1 * 32 + 2] = 200
        return bytes([label]) + planes.tobytes()

    def test_layout(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'test_batch.bin')
            with open(path, 'wb') as f:
                f.write(CifarTest.record(9) + CifarTest.record(0, 0, 255, 0))
            dataset = load_cifar10_bin(path)
            self.assertTrue(dataset.images.shape == (2, 32, 32, 3), 'cifar images should be 32x32x3')
            self.assertTrue(dataset.labels.tolist() == [9, 0], 'labels wrong')
            self.assertTrue(np.allclose(dataset.images[0, 0, 0], np.array([10, 20, 30]) / 255.0, rtol=0, atol=1e-15),
                            'channels should be the last axis')
            self.assertAlmostEqual(dataset.images[0, 1, 2, 0], 200 / 255.0, delta=1e-15)
            self.assertTrue(np.all(dataset.images[1, :, :, 1] == 1.0), 'green plane lost')
            self.assertTrue(len(load_directory(tmp, 'test')) == 2, 'directory loader missed cifar')

    def test_bad_length_and_empty(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'odd.bin')
            with open(path, 'wb') as f:
                f.write(CifarTest.record(1) + b'\x00' * 10)
            with self.assertRaises(FormatError) as context:
                load_cifar10_bin(path)
            self.assertTrue(context.exception.offset == 3073, 'offset should be the partial record')
            empty = os.path.join(tmp, 'empty.bin')
            open(empty, 'wb').close()
            with self.assertLogs(level='WARNING'):
                dataset = load_cifar10_bin(empty)
            self.assertTrue(len(dataset) == 0 and dataset.input_shape == (32, 32, 3), 'empty file gives empty set')


class DatasetTest(TestCase):
    @staticmethod
    def pool(per_class: int=30) -> Dataset:
        labels = np.repeat(np.arange(10), per_class)
        np.random.default_rng(0).shuffle(labels)
        return Dataset(np.random.default_rng(1).uniform(size=(len(labels), 3, 3, 1)), labels)

    def test_validation(self):
        with self.assertRaises(ValueError):
            Dataset(np.full((2, 3), 1.5), [0, 1])
        with self.assertRaises(ValueError):
            Dataset(np.zeros((2, 3)), [0])
        with self.assertRaises(ValueError):
            Dataset(np.zeros((2, 3)), [0, 10])
        dataset = Dataset(np.zeros((2, 3)), [0, 1])
        with self.assertRaises(ValueError):
            dataset.images[0, 0] = 0.5

    def test_desk_subset(self):
        pool = DatasetTest.pool()
        subset = make_desk_subset(pool, 3, 42)
        self.assertTrue(len(subset) == 30 and subset.class_counts() == [3] * 10, 'subset is not balanced')
        self.assertTrue(subset.labels.tolist() == sorted(subset.labels.tolist()), 'classes should come in order')
        again = make_desk_subset(pool, 3, 42)
        self.assertTrue(np.array_equal(subset.images, again.images), 'same seed should pick the same examples')
        other = make_desk_subset(pool, 3, 43)
        self.assertFalse(np.array_equal(subset.images, other.images), 'different seeds should differ')
        self.assertTrue(len(make_desk_subset(pool, 0, 1)) == 0, 'zero per class is empty')
        self.assertTrue(subset.provenance['subset_seed'] == 42, 'seed not recorded')
        with self.assertRaises(ValueError) as context:
            make_desk_subset(pool, 31, 0)
        self.assertTrue('Class 0' in str(context.exception), 'error should name the short class')

    def test_head_and_subset(self):
        pool = DatasetTest.pool(2)
        self.assertTrue(len(pool.head(5)) == 5 and len(pool.head(500)) == 20, 'head should clip')
        self.assertTrue(pool.subset([3, 1]).labels.tolist() == [pool.labels[3], pool.labels[1]], 'subset order')


class RngTest(TestCase):
    def test_splitmix(self):
        self.assertTrue(SplitMix64(0).next() == 0xE220A8397B1DCDAF, 'SplitMix64 reference output')
        first, second = SplitMix64(99), SplitMix64(99)
        self.assertTrue([first.next() for _ in range(5)] == [second.next() for _ in range(5)], 'not reproducible')
        generator = SplitMix64(5)
        self.assertTrue(all(0 <= generator.below(7) < 7 for _ in range(200)), 'below out of range')
        shuffled = SplitMix64(5).shuffle(range(20))
        self.assertTrue(sorted(shuffled) == list(range(20)), 'shuffle is not a permutation')
        with self.assertRaises(ValueError):
            generator.below(0)

    def test_derive_seed(self):
        self.assertTrue(derive_seed(7, 1, 2) == derive_seed(7, 1, 2), 'derived seeds not reproducible')
        self.assertTrue(derive_seed(7, 1) != derive_seed(7, 2) and derive_seed(7, 1) != derive_seed(8, 1),
                        'derived seeds should differ')
        self.assertTrue(all(0 <= derive_seed(s, s * 3) < 2 ** 63 for s in range(50)), 'derived seed out of range')


class ContainerTest(TestCase):
    def setUp(self):
        self.header = len(encode_container(BATCH_MAGIC, {}, {}))

    def test_duplicate_record(self):
        single = encode_container(BATCH_MAGIC, {}, {'a': np.zeros(2)})
        with self.assertRaises(FormatError) as context:
            decode_container(single + single[self.header:], BATCH_MAGIC)
        self.assertTrue(context.exception.offset == len(single), 'a repeated record should fail where it starts')

    def test_bad_record_name(self):
        data = bytearray(encode_container(BATCH_MAGIC, {}, {'ab': np.ones(1)}))
        data[self.header + 2:self.header + 4] = b'\xff\xfe'
        with self.assertRaises(FormatError) as context:
            decode_container(bytes(data), BATCH_MAGIC)
        self.assertTrue(context.exception.offset == self.header + 2, 'bad name offset wrong')


class BatchFileTest(TestCase):
    @staticmethod
    def batch(attack: str='fgsm') -> AdversarialBatch:
        rng = np.random.default_rng(3)
        originals = rng.uniform(size=(10, 4, 4, 1))
        perturbed = np.clip(originals + rng.uniform(-0.1, 0.1, originals.shape), 0, 1)
        return AdversarialBatch(originals, perturbed, np.arange(10) % 3, attack=attack, config={'epsilon': 0.1},
                                success=np.arange(10) % 2 == 0, targets=np.full(10, 2), iterations=np.ones(10))

    def test_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'batch.cmtb')
            for attack in ('fgsm', 'mystery_attack'):
                batch = BatchFileTest.batch(attack)
                save_batch(batch, path)
                self.assertTrue(load_batch(path) == batch, attack + ' batch did not survive a file')
            with open(path, 'rb') as f:
                data = bytearray(f.read())
            data[4:6] = struct.pack('<H', 2)
            with open(path, 'wb') as f:
                f.write(bytes(data))
            with self.assertRaises(FormatError) as context:
                load_batch(path)
            self.assertTrue(context.exception.offset == 4, 'version error is at the version field')

    def test_distortions(self):
        batch = BatchFileTest.batch()
        l2, linf = batch.recompute_distortions()
        delta = (batch.perturbed - batch.originals).reshape(10, -1)
        self.assertTrue(np.allclose(l2, np.linalg.norm(delta, axis=1), rtol=0, atol=1e-12), 'l2 wrong')
        self.assertTrue(np.allclose(linf, np.abs(delta).max(axis=1), rtol=0, atol=1e-12), 'linf wrong')
        successful = batch.successful()
        self.assertTrue(len(successful) == 5 and np.all(successful.success), 'successful() should filter')
        self.assertTrue(batch.success_rate == 0.5, 'success rate wrong')
        empty_l2, empty_linf = distortions(np.zeros((0, 3)), np.zeros((0, 3)))
        self.assertTrue(len(empty_l2) == 0 and len(empty_linf) == 0, 'empty distortions')
        with self.assertRaises(ValueError):
            distortions(np.zeros((2, 3)), np.zeros((2, 4)))


if __name__ == '__main__':
    main()
