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

import hashlib
import json
import logging
import numpy as np
from collections import OrderedDict
from typing import Optional, List, Dict, Tuple, Union, Iterable
from . import Freezable, ShapeError, FormatError
from .tensor import Tape, Tensor, OpKind
from .store import WEIGHTS_MAGIC, write_container, read_container

VARIANTS = ('plain', 'defended_nolock', 'defended_locked')
LAYER_KINDS = ('conv2d', 'maxpool', 'dropout', 'dense')
HEAD_Z = 'z'
HEAD_AUX = 'z_aux'
HEAD_COMBINED = 'z_star'
MAIN = 'main'
SEVER = 'sever'  # lock_override value: g's current output, treated as a constant
LOCK_INIT_RANGE = 0.5
INFERENCE_CHUNK = 256


class ModelSpec:
    """A layer stack plus the heads implied by the variant.

    :param layers: A list of dicts - {'kind': 'conv2d', 'filters': 8, 'size': 3, 'padding': 'valid'},
     {'kind': 'maxpool'}, {'kind': 'dropout', 'rate': 0.2}, {'kind': 'dense', 'units': 64}.
     conv2d and dense are followed by a relu; the flatten before the first dense is implicit.
    :param class_count: Width of every logits head.
    :param input_shape: (h, w, c) for images or (d,) for flat inputs.
    :param variant: 'plain', 'defended_nolock' or 'defended_locked'."""

    def __init__(self, layers: List[dict], *, class_count: int=10, input_shape: Iterable[int]=(28, 28, 1),
                 variant: str='plain'):
        self.layers = [dict(layer) for layer in layers]
        self.class_count = int(class_count)
        self.input_shape = tuple(int(i) for i in input_shape)
        self.variant = variant

    def validate(self) -> 'ModelSpec':
        """Check the whole stack by walking the shapes through it. Raises ValueError."""
        self.parameter_shapes()
        return self

    @property
    def heads(self) -> Tuple[str, ...]:
        if self.variant == 'plain':
            return HEAD_Z,
        if self.variant == 'defended_nolock':
            return HEAD_Z, HEAD_AUX
        return HEAD_Z, HEAD_AUX, HEAD_COMBINED

    @property
    def main_head(self) -> str:
        return HEAD_COMBINED if self.variant == 'defended_locked' else HEAD_Z

    @property
    def defended(self) -> bool:
        return self.variant != 'plain'

    def parameter_shapes(self) -> 'OrderedDict[str, Tuple[int, ...]]':
        """name -> shape, in the order they are initialised and stored."""
        if self.variant not in VARIANTS:
            raise ValueError("Model variant needs to be one of %s, not: %s" % (', '.join(VARIANTS), self.variant))
        if self.class_count < 2:
            raise ValueError("A classifier needs at least two classes, not: %d" % self.class_count)
        if len(self.input_shape) not in (1, 3) or min(self.input_shape) < 1:
            raise ValueError("Input shape needs to be (h, w, c) or (d,), not: " + str(self.input_shape))
        shapes = OrderedDict()
        current = self.input_shape
        for idx, layer in enumerate(self.layers):
            kind = layer.get('kind')
            if kind not in LAYER_KINDS:
                raise ValueError("Unsupported layer kind at %d: %s" % (idx, kind))
            if kind == 'conv2d':
                if len(current) != 3:
                    raise ShapeError(OpKind.CONV2D, (current,), "layer %d needs an image shaped input" % idx)
                filters, size = int(layer['filters']), int(layer.get('size', 3))
                padding = layer.get('padding', 'valid')
                if padding not in ('valid', 'same') or filters < 1 or size < 1:
                    raise ValueError("Bad conv2d layer at %d: %s" % (idx, str(layer)))
                if padding == 'valid':
                    h, w = current[0] - size + 1, current[1] - size + 1
                else:
                    h, w = current[0], current[1]
                if h < 1 or w < 1:
                    raise ShapeError(OpKind.CONV2D, (current,), "layer %d shrinks the image to nothing" % idx)
                shapes['layer.%d.w' % idx] = (size, size, current[2], filters)
                shapes['layer.%d.b' % idx] = (filters,)
                current = (h, w, filters)
            elif kind == 'maxpool':
                if len(current) != 3 or current[0] < 2 or current[1] < 2:
                    raise ShapeError(OpKind.MAXPOOL, (current,), "layer %d needs an image of at least 2x2" % idx)
                current = (current[0] // 2, current[1] // 2, current[2])
            elif kind == 'dropout':
                if not 0.0 <= float(layer.get('rate', 0.0)) < 1.0:
                    raise ValueError("Dropout rate at %d needs to be in [0, 1): %s" % (idx, str(layer)))
            else:
                units = int(layer['units'])
                if units < 1:
                    raise ValueError("Dense layer at %d needs at least one unit" % idx)
                shapes['layer.%d.w' % idx] = (int(np.prod(current)), units)
                shapes['layer.%d.b' % idx] = (units,)
                current = (units,)
        hidden = int(np.prod(current))
        k = self.class_count
        shapes['head.z.w'] = (hidden, k)
        shapes['head.z.b'] = (k,)
        if self.defended:
            shapes['head.z_aux.w'] = (hidden, k)
            shapes['head.z_aux.b'] = (k,)
        if self.variant == 'defended_locked':
            for stage in (0, 1):
                shapes['lock.%d.w' % stage] = (k, k)
                shapes['lock.%d.b' % stage] = (k,)
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(shape)) for shape in self.parameter_shapes().values())

    def to_dict(self) -> dict:
        return {'layers': self.layers, 'class_count': self.class_count,
                'input_shape': list(self.input_shape), 'variant': self.variant}

    @staticmethod
    def from_dict(d: dict) -> 'ModelSpec':
        try:
            return ModelSpec(d['layers'], class_count=d.get('class_count', 10),
                             input_shape=d.get('input_shape', (28, 28, 1)), variant=d.get('variant', 'plain'))
        except (KeyError, TypeError):
            raise ValueError("Model spec needs at least a 'layers' list: " + str(d)[:200])

    @staticmethod
    def load(path: str) -> 'ModelSpec':
        """A spec from a JSON file - either a full spec or {"preset": "desk", ...overrides}."""
        with open(path) as f:
            d = json.load(f)
        if 'preset' in d:
            return ModelSpec.preset(d['preset'], variant=d.get('variant', 'plain'),
                                    input_shape=d.get('input_shape')).validate()
        return ModelSpec.from_dict(d).validate()

    def with_variant(self, variant: str) -> 'ModelSpec':
        return ModelSpec(self.layers, class_count=self.class_count, input_shape=self.input_shape, variant=variant)

    def canonical_json(self, *, trunk_only: bool=False) -> str:
        d = self.to_dict()
        if trunk_only:
            del d['variant']
        return json.dumps(d, sort_keys=True, separators=(',', ':'))

    def architecture_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def trunk_hash(self) -> str:
        """Hash of everything but the variant - two specs with the same trunk hash share trunk and Z head shapes."""
        return hashlib.sha256(self.canonical_json(trunk_only=True).encode()).hexdigest()

    # presets
    @staticmethod
    def preset(name: str, *, variant: str='plain', input_shape: Optional[Iterable[int]]=None) -> 'ModelSpec':
        presets = {'desk': ModelSpec.desk,
                   'desk_substitute': ModelSpec.desk_substitute,
                   'full_oracle': ModelSpec.full_oracle,
                   'full_substitute_mnist': ModelSpec.full_substitute_mnist,
                   'full_substitute_cifar': ModelSpec.full_substitute_cifar}
        try:
            builder = presets[name]
        except KeyError:
            raise ValueError("No model preset called '%s' (try: %s)" % (name, ', '.join(sorted(presets))))
        spec = builder(variant=variant)
        if input_shape is not None:
            spec.input_shape = tuple(int(i) for i in input_shape)
        return spec

    @staticmethod
    def desk(*, variant: str='plain', input_shape=(28, 28, 1)) -> 'ModelSpec':
        """The CPU-sized oracle: conv 8, conv 8, pool, conv 16, conv 16, pool, dense 64."""
        return ModelSpec([_conv(8), _conv(8), {'kind': 'maxpool'}, _conv(16), _conv(16), {'kind': 'maxpool'},
                          {'kind': 'dense', 'units': 64}], input_shape=input_shape, variant=variant)

    @staticmethod
    def desk_substitute(*, variant: str='plain', input_shape=(28, 28, 1)) -> 'ModelSpec':
        return ModelSpec([_conv(8), _conv(8), {'kind': 'maxpool'},
                          {'kind': 'dense', 'units': 32}, {'kind': 'dense', 'units': 32}],
                         input_shape=input_shape, variant=variant)

    @staticmethod
    def full_oracle(*, variant: str='plain', input_shape=(28, 28, 1)) -> 'ModelSpec':
        """The full scale oracle. Same padding - three valid blocks would shrink 28x28 to nothing."""
        layers = []
        for filters in (32, 64, 128):
            layers.extend([_conv(filters, 'same'), _conv(filters, 'same'), {'kind': 'maxpool'},
                           {'kind': 'dropout', 'rate': 0.2}])
        layers.extend([{'kind': 'dense', 'units': 512}, {'kind': 'dropout', 'rate': 0.2}])
        return ModelSpec(layers, input_shape=input_shape, variant=variant)

    @staticmethod
    def full_substitute_mnist(*, variant: str='plain', input_shape=(28, 28, 1)) -> 'ModelSpec':
        return ModelSpec([_conv(32), _conv(32), {'kind': 'maxpool'}, _conv(64), _conv(64), {'kind': 'maxpool'},
                          {'kind': 'dense', 'units': 200}, {'kind': 'dense', 'units': 200}],
                         input_shape=input_shape, variant=variant)

    @staticmethod
    def full_substitute_cifar(*, variant: str='plain', input_shape=(32, 32, 3)) -> 'ModelSpec':
        return ModelSpec([_conv(64), _conv(64), {'kind': 'maxpool'}, _conv(128), _conv(128), {'kind': 'maxpool'},
                          {'kind': 'dense', 'units': 256}, {'kind': 'dense', 'units': 256}],
                         input_shape=input_shape, variant=variant)

    def __eq__(self, other):
        return isinstance(other, ModelSpec) and self.canonical_json() == other.canonical_json()

    def __repr__(self):
        return "<ModelSpec %s layers=%d classes=%d input=%s>" % \
               (self.variant, len(self.layers), self.class_count, self.input_shape)


class Model(Freezable):
    """Named parameters for a ModelSpec, and the forward pass over them.

    Do not construct directly - use build_model, load_weights or clone_as_substitute."""

    def __init__(self, spec: ModelSpec, parameters: Dict[str, np.ndarray], *, seed: Optional[int]=None,
                 metadata: Optional[dict]=None):
        super().__init__()
        shapes = spec.parameter_shapes()
        if list(parameters.keys()) != list(shapes.keys()):
            raise ValueError("Parameter names do not match the spec: wanted %s, got %s" %
                             (list(shapes.keys()), list(parameters.keys())))
        for name, shape in shapes.items():
            if tuple(np.shape(parameters[name])) != shape:
                raise ShapeError('parameter ' + name, (shape, np.shape(parameters[name])))
        self.spec = spec
        self.parameters = OrderedDict((name, np.array(values, dtype=np.float64))
                                      for name, values in parameters.items())
        self.seed = seed
        self.metadata = {} if metadata is None else dict(metadata)

    @property
    def variant(self) -> str:
        return self.spec.variant

    @property
    def heads(self) -> Tuple[str, ...]:
        return self.spec.heads

    @property
    def main_head(self) -> str:
        return self.spec.main_head

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    @property
    def frozen_names(self) -> List[str]:
        """Parameters no optimizer may touch - the lock unit."""
        return [name for name in self.parameters if name.startswith('lock.')]

    @property
    def trainable_names(self) -> List[str]:
        return [name for name in self.parameters if not name.startswith('lock.')]

    def architecture_hash(self) -> str:
        return self.spec.architecture_hash()

    def parameter_count(self) -> int:
        return sum(v.size for v in self.parameters.values())

    def resolve_head(self, head: str) -> str:
        """'main' becomes Z* or Z; anything else has to be a head this variant has."""
        if head == MAIN:
            return self.main_head
        if head not in self.heads:
            raise ValueError("A %s model has no head '%s' (it has: %s)" % (self.variant, head, ', '.join(self.heads)))
        return head

    def update_parameter(self, name: str, values: np.ndarray):
        """Replace a parameter's array. The old array is left untouched."""
        self.ensure_mutable()
        if name in self.frozen_names:
            raise ValueError("Lock unit parameters cannot be changed: " + name)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.parameters[name].shape:
            raise ShapeError('parameter ' + name, (self.parameters[name].shape, values.shape))
        self.parameters[name] = values

    def bind(self, tape: Tape, *, trainable: bool=False) -> Dict[str, Tensor]:
        """Record the parameters on a tape.

        :param tape: The tape.
        :param trainable: True to have gradients reported for the trainable (non-lock) parameters.
        :return: name -> Tensor"""
        frozen = set(self.frozen_names)
        return {name: tape.leaf(values, requires_grad=trainable and name not in frozen)
                for name, values in self.parameters.items()}

    def heads_on_tape(self, tape: Tape, x: Tensor, params: Optional[Dict[str, Tensor]]=None, *,
                      want: Optional[Iterable[str]]=None, lock_override=None) -> Dict[str, Tensor]:
        """The forward pass, recorded.

        :param tape: The tape to record on.
        :param x: One example shaped as input_shape, or a batch with a leading axis.
        :param params: From bind, or None to bind the parameters as constants.
        :param want: Head names (or 'main') to return, defaults to every head.
        :param lock_override: Test hook - an array to use in place of g's output, or SEVER to use g's
         current output as a constant.
        :return: head name -> logits Tensor, shaped (k,) for a single example or (n, k) for a batch."""
        wanted = {self.resolve_head(h) for h in (self.heads if want is None else want)}
        if params is None:
            params = self.bind(tape)
        if x.values.ndim == len(self.spec.input_shape) and x.shape == self.spec.input_shape:
            single = True
            h = tape.forward(OpKind.RESHAPE, x, shape=(1,) + self.spec.input_shape)
        elif x.values.ndim == len(self.spec.input_shape) + 1 and x.shape[1:] == self.spec.input_shape:
            single = False
            h = x
        else:
            raise ShapeError('model input', (self.spec.input_shape, x.shape), "want one example or a batch")

        n = h.shape[0]
        for idx, layer in enumerate(self.spec.layers):
            kind = layer['kind']
            if kind == 'conv2d':
                h = tape.forward(OpKind.CONV2D, h, params['layer.%d.w' % idx], params['layer.%d.b' % idx],
                                 padding=layer.get('padding', 'valid'))
                h = tape.forward(OpKind.RELU, h)
            elif kind == 'maxpool':
                h = tape.forward(OpKind.MAXPOOL, h)
            elif kind == 'dropout':
                h = tape.forward(OpKind.DROPOUT, h, rate=float(layer.get('rate', 0.0)), train_only=True)
            else:
                h = _flatten(tape, h, n)
                h = tape.forward(OpKind.DENSE, h, params['layer.%d.w' % idx], params['layer.%d.b' % idx])
                h = tape.forward(OpKind.RELU, h)
        h = _flatten(tape, h, n)

        out = {}
        z = tape.forward(OpKind.DENSE, h, params['head.z.w'], params['head.z.b'])
        out[HEAD_Z] = z
        if HEAD_AUX in wanted or HEAD_COMBINED in wanted:
            out[HEAD_AUX] = tape.forward(OpKind.DENSE, h, params['head.z_aux.w'], params['head.z_aux.b'])
        if HEAD_COMBINED in wanted:
            g = self._lock(tape, out[HEAD_AUX], params)
            if lock_override is not None:
                g = tape.constant(g.values.copy() if _is_sever(lock_override)
                                  else np.broadcast_to(np.asarray(lock_override, dtype=np.float64), g.shape))
            out[HEAD_COMBINED] = tape.forward(OpKind.MUL, z, g)
        if single:
            out = {name: tape.forward(OpKind.RESHAPE, t, shape=(self.class_count,)) for name, t in out.items()}
        return {name: t for name, t in out.items() if name in wanted}

    def lock_output(self, z_aux: np.ndarray) -> np.ndarray:
        """g(Z') on plain arrays."""
        if self.variant != 'defended_locked':
            raise ValueError("Only a defended_locked model has a lock unit")
        tape = Tape()
        return self._lock(tape, tape.constant(z_aux), self.bind(tape)).values

    def forward_heads(self, x: np.ndarray, heads: Optional[Iterable[str]]=None, *,
                      lock_override=None) -> Dict[str, np.ndarray]:
        """Inference - every requested head from one trunk evaluation.

        :param x: One example or a batch, pixels in [0, 1].
        :param heads: Head names or 'main', defaults to all the variant has.
        :param lock_override: See heads_on_tape.
        :return: head name -> logits array."""
        x = np.asarray(x, dtype=np.float64)
        if x.size != 0 and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("Model input needs to lie in [0, 1], got [%g, %g]" % (x.min(), x.max()))
        requested = list(self.heads if heads is None else heads)
        resolved = {h: self.resolve_head(h) for h in requested}
        batched = x.ndim == len(self.spec.input_shape) + 1
        if not batched or x.shape[0] <= INFERENCE_CHUNK:
            tape = Tape()
            found = self.heads_on_tape(tape, tape.constant(x), want=resolved.values(), lock_override=lock_override)
            return {h: found[r].values for h, r in resolved.items()}
        chunks = [self.forward_heads(x[start:start + INFERENCE_CHUNK], requested, lock_override=lock_override)
                  for start in range(0, x.shape[0], INFERENCE_CHUNK)]
        return {h: np.concatenate([c[h] for c in chunks]) for h in requested}

    def logits(self, x: np.ndarray, head: str=MAIN) -> np.ndarray:
        return self.forward_heads(x, [head])[head]

    def probabilities(self, x: np.ndarray, head: str=MAIN) -> np.ndarray:
        z = self.logits(x, head)
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, x: np.ndarray, head: str=MAIN) -> np.ndarray:
        """argmax labels from a head ('main' by default)."""
        return np.argmax(self.logits(x, head), axis=-1)

    def copy(self) -> 'Model':
        """A thawed deep copy."""
        return Model(self.spec, self.parameters, seed=self.seed, metadata=self.metadata)

    def _lock(self, tape: Tape, z_aux: Tensor, params: Dict[str, Tensor]) -> Tensor:
        hidden = tape.forward(OpKind.DENSE, z_aux, params['lock.0.w'], params['lock.0.b'])
        hidden = tape.forward(OpKind.TANH, hidden)
        return tape.forward(OpKind.DENSE, hidden, params['lock.1.w'], params['lock.1.b'])

    def __repr__(self):
        return "<Model %s params=%d hash=%s%s>" % (self.variant, self.parameter_count(),
                                                  self.architecture_hash()[:12], ' frozen' if self.frozen else '')


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Fresh parameters for a spec.

    Hidden layers are fan-in scaled uniform (sqrt(6/fan_in)), heads use sqrt(3/fan_in), biases start at zero.
    The lock unit is drawn from uniform(-0.5, 0.5) and never changes after this.

    :param spec: A ModelSpec.
    :param seed: Seeds a numpy Generator; same spec and seed gives identical parameters.
    :return: The Model."""
    shapes = spec.parameter_shapes()
    rng = np.random.default_rng(seed)
    parameters = OrderedDict()
    for name, shape in shapes.items():
        if name.startswith('lock.'):
            parameters[name] = rng.uniform(-LOCK_INIT_RANGE, LOCK_INIT_RANGE, size=shape)
        elif name.endswith('.b'):
            parameters[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt((3.0 if name.startswith('head.') else 6.0) / fan_in)
            parameters[name] = rng.uniform(-limit, limit, size=shape)
    model = Model(spec, parameters, seed=seed)
    logging.debug("Built model: " + repr(model))
    return model


def clone_as_substitute(oracle: Union[Model, ModelSpec], substitute_spec: ModelSpec, *,
                        worst_case: bool=False, seed: int=0) -> Model:
    """A substitute for the black-box experiments.

    :param oracle: The oracle Model (needed for worst case) or just its spec.
    :param substitute_spec: What the substitute looks like.
    :param worst_case: Copy the oracle's trunk and Z head (never Z' or the lock) instead of starting fresh.
    :param seed: Initialises whatever is not copied.
    :return: A thawed Model."""
    substitute = build_model(substitute_spec, seed)
    if not worst_case:
        return substitute
    if not isinstance(oracle, Model):
        raise ValueError("A worst case substitute copies weights, so it needs the oracle model not only its spec")
    if oracle.spec.trunk_hash() != substitute_spec.trunk_hash():
        raise ValueError("Worst case copy needs matching specs: oracle %s vs substitute %s" %
                         (oracle.spec, substitute_spec))
    for name in substitute.parameters:
        if name.startswith('layer.') or name.startswith('head.z.'):
            substitute.parameters[name] = oracle.parameters[name].copy()
    substitute.metadata['copied_from'] = oracle.architecture_hash()
    logging.info("Worst case substitute copied from oracle: " + oracle.architecture_hash()[:12])
    return substitute


def save_weights(model: Model, path: str):
    """Write the weight container: manifest (architecture hash, seed, variant, class_count, spec, metadata)
    then one record per parameter."""
    manifest = {'architecture_hash': model.architecture_hash(),
                'seed': model.seed,
                'variant': model.variant,
                'class_count': model.class_count,
                'spec': model.spec.to_dict(),
                'training': model.metadata}
    write_container(path, WEIGHTS_MAGIC, manifest, model.parameters)
    logging.info("Saved weights: " + path)


def load_weights(path: str, expected: Optional[ModelSpec]=None) -> Model:
    """Read a weight container.

    :param path: The file.
    :param expected: If given, the stored architecture hash has to match this spec's.
    :return: A thawed Model."""
    manifest, arrays = read_container(path, WEIGHTS_MAGIC)
    try:
        spec = ModelSpec.from_dict(manifest['spec'])
        stored_hash = manifest['architecture_hash']
    except (KeyError, TypeError):
        raise FormatError(path, 0, "Manifest is missing the spec or architecture hash")
    if spec.architecture_hash() != stored_hash:
        raise FormatError(path, 0, "Manifest spec does not hash to the stored architecture hash")
    if expected is not None and expected.architecture_hash() != stored_hash:
        raise ValueError("Architecture hash mismatch loading %s: stored %s, expected %s" %
                         (path, stored_hash[:12], expected.architecture_hash()[:12]))
    model = Model(spec, arrays, seed=manifest.get('seed'), metadata=manifest.get('training'))
    logging.info("Loaded weights: %s (%s)" % (path, model.variant))
    return model


def _conv(filters: int, padding: str='valid') -> dict:
    return {'kind': 'conv2d', 'filters': filters, 'size': 3, 'padding': padding}


def _flatten(tape: Tape, h: Tensor, n: int) -> Tensor:
    if h.values.ndim == 2:
        return h
    return tape.forward(OpKind.RESHAPE, h, shape=(n, int(np.prod(h.shape[1:]))))


def _is_sever(value) -> bool:
    return isinstance(value, str) and value == SEVER
