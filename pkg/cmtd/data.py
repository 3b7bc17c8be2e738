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
import logging
import os
import struct
import numpy as np
from typing import Optional, List, Dict, Iterable, Union
from . import FormatError
from .rng import SplitMix64
from .store import BATCH_MAGIC, write_container, read_container

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CLASS_COUNT = 10

MNIST_FILES = {'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
               'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte')}
CIFAR_FILES = {'train': ['data_batch_%d.bin' % i for i in range(1, 6)],
               'test': ['test_batch.bin']}


class Dataset:
    """Images in [0, 1] shaped (n, h, w, c) with integer labels. Immutable once built.

    :param images: The pixels.
    :param labels: One class id per image.
    :param split: 'train', 'test' or anything descriptive.
    :param provenance: Where it came from - file hashes, subset seeds...
    :param class_count: Labels must be below this."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, *, split: str='test',
                 provenance: Optional[dict]=None, class_count: int=CLASS_COUNT):
        images = np.array(images, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64).reshape(-1)
        if images.shape[0] != labels.shape[0]:
            raise ValueError("Image count %d does not match label count %d" % (images.shape[0], labels.shape[0]))
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("Dataset pixels need to lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            raise ValueError("Dataset labels need to lie in [0, %d)" % class_count)
        images.flags.writeable = False
        labels.flags.writeable = False
        self.images = images
        self.labels = labels
        self.split = split
        self.provenance = {} if provenance is None else dict(provenance)
        self.class_count = class_count

    @property
    def input_shape(self):
        return self.images.shape[1:]

    def subset(self, indices: Iterable[int], **provenance) -> 'Dataset':
        """The chosen examples, in the given order."""
        indices = np.asarray(list(indices), dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], split=self.split,
                       provenance=dict(self.provenance, **provenance), class_count=self.class_count)

    def head(self, count: int) -> 'Dataset':
        """The first count examples."""
        return self.subset(range(min(count, len(self))), head=count)

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.class_count).tolist()

    def __len__(self):
        return self.labels.shape[0]

    def __repr__(self):
        return "<Dataset %s n=%d shape=%s>" % (self.split, len(self), self.input_shape)


def load_mnist_idx(image_path: str, label_path: str, *, split: str='test') -> Dataset:
    """MNIST in the big-endian IDX format.

    :param image_path: An idx3 image file (magic 0x803, dims n, rows, cols).
    :param label_path: An idx1 label file (magic 0x801, dim n).
    :param split: Recorded on the Dataset.
    :return: The Dataset, pixels scaled by 1/255."""
    image_data = _read(image_path)
    label_data = _read(label_path)

    _check_magic(image_data, MNIST_IMAGE_MAGIC, image_path)
    if len(image_data) < 16:
        raise FormatError(image_path, len(image_data), "Truncated image header")
    n, rows, cols = struct.unpack_from('>III', image_data, 4)
    expected = 16 + n * rows * cols
    if len(image_data) < expected:
        raise FormatError(image_path, len(image_data), "Truncated images (wanted %d bytes)" % expected)
    pixels = np.frombuffer(image_data, dtype=np.uint8, count=n * rows * cols, offset=16)

    _check_magic(label_data, MNIST_LABEL_MAGIC, label_path)
    if len(label_data) < 8:
        raise FormatError(label_path, len(label_data), "Truncated label header")
    label_count, = struct.unpack_from('>I', label_data, 4)
    if label_count != n:
        raise FormatError(label_path, 4, "Label count %d does not match image count %d" % (label_count, n))
    if len(label_data) < 8 + n:
        raise FormatError(label_path, len(label_data), "Truncated labels (wanted %d bytes)" % (8 + n))
    labels = np.frombuffer(label_data, dtype=np.uint8, count=n, offset=8)
    bad = np.flatnonzero(labels >= CLASS_COUNT)
    if bad.size:
        raise FormatError(label_path, 8 + int(bad[0]), "Label %d out of range" % labels[bad[0]])

    dataset = Dataset(pixels.reshape(n, rows, cols, 1) / 255.0, labels, split=split,
                      provenance={'source': 'mnist',
                                  'files': {os.path.basename(image_path): _sha256(image_data),
                                            os.path.basename(label_path): _sha256(label_data)}})
    logging.info("Loaded MNIST %s: %d examples of %dx%d" % (split, n, rows, cols))
    return dataset


def load_cifar10_bin(paths: Union[str, List[str]], *, split: str='test') -> Dataset:
    """CIFAR-10 binary batches - each record is a label byte then 3072 bytes of R, G and B planes.

    :param paths: One or more batch files, concatenated in order.
    :param split: Recorded on the Dataset.
    :return: A Dataset of 32x32x3 images."""
    if isinstance(paths, str):
        paths = [paths]
    images, labels, files = [], [], {}
    for path in paths:
        data = _read(path)
        files[os.path.basename(path)] = _sha256(data)
        if len(data) % CIFAR_RECORD != 0:
            raise FormatError(path, len(data) - len(data) % CIFAR_RECORD,
                              "File length %d is not a multiple of %d" % (len(data), CIFAR_RECORD))
        if len(data) == 0:
            logging.warning("Empty CIFAR-10 file: " + path)
            continue
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(records[:, 0] >= CLASS_COUNT)
        if bad.size:
            raise FormatError(path, int(bad[0]) * CIFAR_RECORD, "Label %d out of range" % records[bad[0], 0])
        labels.append(records[:, 0])
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    if len(images) == 0:
        return Dataset(np.zeros((0, 32, 32, 3)), np.zeros(0), split=split,
                       provenance={'source': 'cifar10', 'files': files})
    dataset = Dataset(np.concatenate(images) / 255.0, np.concatenate(labels), split=split,
                      provenance={'source': 'cifar10', 'files': files})
    logging.info("Loaded CIFAR-10 %s: %d examples" % (split, len(dataset)))
    return dataset


def load_directory(directory: str, split: str) -> Dataset:
    """Whichever of MNIST or CIFAR-10 is found in a directory."""
    if split not in MNIST_FILES:
        raise ValueError("Split is either 'train' or 'test', not: " + split)
    dotted = tuple(n.replace('-idx', '.idx') for n in MNIST_FILES[split])
    for image_name, label_name in (MNIST_FILES[split], dotted, tuple(n + '.gz' for n in MNIST_FILES[split])):
        image_path, label_path = os.path.join(directory, image_name), os.path.join(directory, label_name)
        if os.path.exists(image_path) and os.path.exists(label_path):
            return load_mnist_idx(image_path, label_path, split=split)
    cifar = [os.path.join(directory, name) for name in CIFAR_FILES[split]]
    found = [path for path in cifar if os.path.exists(path)]
    if found:
        return load_cifar10_bin(found, split=split)
    raise FileNotFoundError("No MNIST or CIFAR-10 %s files in: %s" % (split, directory))


def make_desk_subset(dataset: Dataset, n_per_class: int, seed: int) -> Dataset:
    """A class balanced subset chosen by SplitMix64 Fisher-Yates shuffles (one generator, classes in order).

    :param dataset: Where to draw from.
    :param n_per_class: How many of each class.
    :param seed: Seeds the generator, same seed gives the same subset on every platform.
    :return: The subset, class 0 first."""
    if n_per_class < 0:
        raise ValueError("n_per_class cannot be negative")
    generator = SplitMix64(seed)
    chosen = []
    for cls in range(dataset.class_count):
        population = np.flatnonzero(dataset.labels == cls).tolist()
        if len(population) < n_per_class:
            raise ValueError("Class %d has only %d examples, %d wanted" % (cls, len(population), n_per_class))
        if n_per_class == 0:
            continue
        chosen.extend(generator.shuffle(population)[:n_per_class])
    subset = dataset.subset(chosen, subset_seed=seed, n_per_class=n_per_class)
    logging.info("Desk subset: %d per class, %d examples (seed %d)" % (n_per_class, len(subset), seed))
    return subset


def distortions(originals: np.ndarray, perturbed: np.ndarray):
    """Per-example L2 and L-infinity distance. Returns (l2, linf)."""
    if originals.shape != perturbed.shape:
        raise ValueError("Originals %s and perturbed %s differ in shape" % (originals.shape, perturbed.shape))
    n = originals.shape[0]
    delta = (perturbed - originals).reshape(n, int(np.prod(originals.shape[1:])))
    return np.sqrt((delta * delta).sum(axis=1)), np.abs(delta).max(axis=1, initial=0.0)


class AdversarialBatch:
    """Originals, their perturbed versions and how the attack went for each.

    :param originals: (n, ...) benign inputs.
    :param perturbed: Same shape, the attack outputs.
    :param labels: True labels.
    :param attack: The attack name - kept as an opaque string.
    :param config: The attack configuration as a dict.
    :param success: Per-example success flags.
    :param targets: Per-example target class, -1 where untargeted.
    :param iterations: Per-example iterations used.
    :param l2: Per-example L2 distortion, computed if not given.
    :param linf: Per-example L-infinity distortion, computed if not given."""

    ARRAYS = ('originals', 'perturbed', 'labels', 'success', 'targets', 'iterations', 'l2', 'linf')

    def __init__(self, originals, perturbed, labels, *, attack: str, config: dict, success, targets=None,
                 iterations=None, l2=None, linf=None):
        self.originals = np.asarray(originals, dtype=np.float64)
        self.perturbed = np.asarray(perturbed, dtype=np.float64)
        n = self.originals.shape[0]
        self.labels = np.asarray(labels, dtype=np.int64).reshape(n)
        self.attack = str(attack)
        self.config = dict(config)
        self.success = np.asarray(success, dtype=bool).reshape(n)
        self.targets = np.full(n, -1, dtype=np.int64) if targets is None else np.asarray(targets, np.int64).reshape(n)
        self.iterations = np.zeros(n, dtype=np.int64) if iterations is None else \
            np.asarray(iterations, dtype=np.int64).reshape(n)
        computed = distortions(self.originals, self.perturbed)
        self.l2 = computed[0] if l2 is None else np.asarray(l2, dtype=np.float64).reshape(n)
        self.linf = computed[1] if linf is None else np.asarray(linf, dtype=np.float64).reshape(n)

    def recompute_distortions(self):
        return distortions(self.originals, self.perturbed)

    @property
    def success_rate(self) -> float:
        return float(self.success.mean()) if len(self) else 0.0

    def successful(self) -> 'AdversarialBatch':
        """Only the examples where the attack worked."""
        keep = self.success
        return AdversarialBatch(self.originals[keep], self.perturbed[keep], self.labels[keep], attack=self.attack,
                                config=self.config, success=self.success[keep], targets=self.targets[keep],
                                iterations=self.iterations[keep], l2=self.l2[keep], linf=self.linf[keep])

    def __len__(self):
        return self.originals.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AdversarialBatch):
            return False
        return self.attack == other.attack and self.config == other.config and \
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in AdversarialBatch.ARRAYS)

    def __repr__(self):
        return "<AdversarialBatch '%s' n=%d success=%.3f>" % (self.attack, len(self), self.success_rate)


def save_batch(batch: AdversarialBatch, path: str):
    manifest = {'attack': batch.attack, 'config': batch.config, 'count': len(batch)}
    write_container(path, BATCH_MAGIC, manifest, {name: getattr(batch, name) for name in AdversarialBatch.ARRAYS})
    logging.info("Saved adversarial batch: %s (%s)" % (path, repr(batch)))


def load_batch(path: str) -> AdversarialBatch:
    manifest, arrays = read_container(path, BATCH_MAGIC)
    missing = [name for name in AdversarialBatch.ARRAYS if name not in arrays]
    if missing or 'attack' not in manifest:
        raise FormatError(path, 0, "Batch file is missing: " + ', '.join(missing or ['attack']))
    return AdversarialBatch(arrays['originals'], arrays['perturbed'], arrays['labels'], attack=manifest['attack'],
                            config=manifest.get('config', {}), success=arrays['success'] != 0,
                            targets=arrays['targets'], iterations=arrays['iterations'],
                            l2=arrays['l2'], linf=arrays['linf'])


def _read(path: str) -> bytes:
    opener = gzip.open if path.endswith('.gz') else open
    with opener(path, 'rb') as f:
        return f.read()


def _check_magic(data: bytes, magic: int, path: str):
    if len(data) < 4:
        raise FormatError(path, len(data), "Truncated magic number")
    found, = struct.unpack_from('>I', data, 0)
    if found != magic:
        raise FormatError(path, 0, "Bad magic number 0x%08x (wanted 0x%08x)" % (found, magic))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
