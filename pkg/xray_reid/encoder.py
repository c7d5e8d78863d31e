"""
Embedding network: a small ReLU multilayer perceptron over feature vectors.

Hidden layers are affine + ReLU, the output layer is affine, and the output
is optionally divided by its Euclidean norm. Forward returns a trace that the
backward pass consumes to produce exact reverse-mode gradients.

Inputs may be a single vector or a batch with one sample per row; batch
gradients are summed over rows.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    DimensionMismatchError,
    EncoderError,
)
from .storage import atomic_output

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'REIDENC1'
CHECKPOINT_VERSION = 1
PARAM_DTYPE = '<f8'


@dataclass(frozen=True)
class EncoderConfig:
    """
    Shape and behaviour of the encoder

    Attributes:
    - input_dim: feature dimension m
    - hidden_dims: widths of the ReLU hidden layers
    - output_dim: embedding dimension d
    - activation: only 'relu' is supported
    - normalize_output: project embeddings onto the unit sphere
    - init_seed: seed of the He initialisation
    """
    input_dim: int
    hidden_dims: Tuple[int, ...] = ()
    output_dim: int = 32
    activation: str = 'relu'
    normalize_output: bool = True
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'hidden_dims', tuple(int(h) for h in self.hidden_dims))

    def validate(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ConfigError(f"encoder dimensions must be positive, got {dims}")
        if self.activation != 'relu':
            raise ConfigError(f"unsupported activation '{self.activation}' (only 'relu')")
        return self

    def layer_shapes(self):
        """(fan_out, fan_in) per layer, input to output."""
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def to_dict(self):
        return {
            'input_dim': int(self.input_dim),
            'hidden_dims': [int(h) for h in self.hidden_dims],
            'output_dim': int(self.output_dim),
            'activation': self.activation,
            'normalize_output': bool(self.normalize_output),
            'init_seed': int(self.init_seed),
        }

    @classmethod
    def from_dict(cls, raw):
        return cls(
            input_dim=int(raw['input_dim']),
            hidden_dims=tuple(raw.get('hidden_dims', ())),
            output_dim=int(raw['output_dim']),
            activation=raw.get('activation', 'relu'),
            normalize_output=bool(raw.get('normalize_output', True)),
            init_seed=int(raw.get('init_seed', 0)),
        )


def _frozen(array):
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Per-layer weights (fan_out x fan_in) and biases, plus the shaping config."""
    config: EncoderConfig
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        weights = tuple(_frozen(w) for w in self.weights)
        biases = tuple(_frozen(b) for b in self.biases)
        shapes = self.config.layer_shapes()
        if len(weights) != len(shapes) or len(biases) != len(shapes):
            raise DimensionMismatchError(f"expected {len(shapes)} layers, got {len(weights)} weights / {len(biases)} biases")
        for layer, (w, b, shape) in enumerate(zip(weights, biases, shapes)):
            if w.shape != shape or b.shape != (shape[0],):
                raise DimensionMismatchError(
                    f"layer {layer}: weight {w.shape} / bias {b.shape} do not match config shape {shape}"
                )
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'biases', biases)

    @property
    def num_layers(self):
        return len(self.weights)

    def __eq__(self, other):
        if not isinstance(other, EncoderParams):
            return NotImplemented
        return self.config == other.config and all(
            a.tobytes() == b.tobytes()
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )

    __hash__ = None

    def digest(self):
        """SHA-256 over config and raw parameter bytes."""
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode('utf-8'))
        for array in self.weights + self.biases:
            h.update(array.astype(PARAM_DTYPE).tobytes())
        return h.hexdigest()

    def apply_gradients(self, grads, learning_rate):
        """Plain gradient step, returns new params."""
        return EncoderParams(
            config=self.config,
            weights=tuple(w - learning_rate * g for w, g in zip(self.weights, grads.weights)),
            biases=tuple(b - learning_rate * g for b, g in zip(self.biases, grads.biases)),
        )


@dataclass(frozen=True)
class ParamGrads:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]


@dataclass(frozen=True)
class ForwardTrace:
    """
    Cached values of one forward call

    Attributes:
    - layer_inputs: input a_l to every layer (a_0 is the batch itself)
    - preactivations: z_l = a_l W_l^T + b_l for every layer
    - raw_output: output before normalisation
    - norms: row norms of raw_output when normalising, else None
    - single: whether forward received a single vector
    """
    layer_inputs: Tuple[np.ndarray, ...]
    preactivations: Tuple[np.ndarray, ...]
    raw_output: np.ndarray
    norms: Optional[np.ndarray]
    single: bool


def init_params(config):
    """
    He-initialised parameters: W ~ N(0, 2 / fan_in), b = 0, seeded by init_seed.
    """
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    weights = []
    biases = []
    for fan_out, fan_in in config.layer_shapes():
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return EncoderParams(config=config, weights=tuple(weights), biases=tuple(biases))


def identity_params(dim):
    """Encoder that returns its input unchanged (raw-feature scoring)."""
    config = EncoderConfig(input_dim=dim, hidden_dims=(), output_dim=dim, normalize_output=False)
    return EncoderParams(config=config, weights=(np.eye(dim),), biases=(np.zeros(dim),))


def forward(params, x):
    """
    Embed one vector or a batch of row vectors

    Args:
        params (EncoderParams): Encoder parameters
        x (array-like): shape (input_dim,) or (n, input_dim)

    Returns:
        tuple: (embedding of shape (d,) or (n, d), ForwardTrace)
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != params.config.input_dim:
        raise DimensionMismatchError(
            f"encoder expects input of length {params.config.input_dim}, got shape {x.shape}"
        )

    layer_inputs = []
    preactivations = []
    activation = batch
    last = params.num_layers - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(activation)
        z = activation @ w.T + b
        preactivations.append(z)
        activation = np.maximum(z, 0.0) if layer < last else z

    raw = activation
    norms = None
    output = raw
    if params.config.normalize_output:
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise EncoderError("encoder output has zero norm; cannot normalise")
        output = raw / norms

    trace = ForwardTrace(
        layer_inputs=tuple(layer_inputs),
        preactivations=tuple(preactivations),
        raw_output=raw,
        norms=norms,
        single=single,
    )
    return (output[0] if single else output), trace


def embed(params, x):
    """Forward pass without keeping the trace."""
    return forward(params, x)[0]


def backward(params, trace, grad_embedding):
    """
    Reverse-mode gradients of sum(embedding * grad_embedding)

    Args:
        params (EncoderParams): Same params the trace was produced with
        trace (ForwardTrace): Output of ``forward``
        grad_embedding (array-like): Upstream gradient, same shape as the embedding

    Returns:
        tuple: (ParamGrads, grad_input shaped like the forward input)
    """
    if len(trace.layer_inputs) != params.num_layers or any(
        a.shape[1] != w.shape[1] or z.shape[1] != w.shape[0]
        for a, z, w in zip(trace.layer_inputs, trace.preactivations, params.weights)
    ):
        raise DimensionMismatchError("trace does not match encoder params")
    if (trace.norms is not None) != bool(params.config.normalize_output):
        raise DimensionMismatchError("trace normalisation does not match encoder params")

    grad = np.asarray(grad_embedding, dtype=np.float64)
    grad = grad[None, :] if trace.single else grad
    if grad.shape != trace.raw_output.shape:
        raise DimensionMismatchError(
            f"grad_embedding shape {np.shape(grad_embedding)} does not match embedding shape"
        )

    if trace.norms is not None:
        unit = trace.raw_output / trace.norms
        grad = (grad - unit * np.sum(unit * grad, axis=1, keepdims=True)) / trace.norms

    grad_weights = [None] * params.num_layers
    grad_biases = [None] * params.num_layers
    for layer in range(params.num_layers - 1, -1, -1):
        grad_weights[layer] = grad.T @ trace.layer_inputs[layer]
        grad_biases[layer] = grad.sum(axis=0)
        grad = grad @ params.weights[layer]
        if layer > 0:
            grad = grad * (trace.preactivations[layer - 1] > 0.0)

    grads = ParamGrads(weights=tuple(grad_weights), biases=tuple(grad_biases))
    return grads, (grad[0] if trace.single else grad)


def save_checkpoint(params, path):
    """
    Write params as: magic, header length (<u8), JSON header, <f8 blocks.

    Blocks are stored in layer order, weight before bias; header offsets are
    relative to the first block.
    """
    layers = []
    blocks = []
    offset = 0
    for w, b in zip(params.weights, params.biases):
        w_bytes = w.astype(PARAM_DTYPE).tobytes()
        b_bytes = b.astype(PARAM_DTYPE).tobytes()
        layers.append({
            'weight_shape': list(w.shape),
            'weight_offset': offset,
            'bias_shape': list(b.shape),
            'bias_offset': offset + len(w_bytes),
        })
        offset += len(w_bytes) + len(b_bytes)
        blocks.extend([w_bytes, b_bytes])
    header = {
        'format_version': CHECKPOINT_VERSION,
        'dtype': PARAM_DTYPE,
        'config': params.config.to_dict(),
        'layers': layers,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    with atomic_output(path, mode='wb') as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(np.array([len(header_bytes)], dtype='<u8').tobytes())
        handle.write(header_bytes)
        for block in blocks:
            handle.write(block)
    logger.debug(f"Saved encoder checkpoint to {path}")


def load_checkpoint(path):
    """Read params written by ``save_checkpoint``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path} is not an encoder checkpoint (bad magic bytes)")
    start = len(CHECKPOINT_MAGIC)
    if len(data) < start + 8:
        raise CheckpointError(f"{path} is truncated")
    header_length = int(np.frombuffer(data[start:start + 8], dtype='<u8')[0])
    header_end = start + 8 + header_length
    try:
        header = json.loads(data[start + 8:header_end].decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path} has an unreadable header: {e}") from e
    if header.get('format_version') != CHECKPOINT_VERSION or header.get('dtype') != PARAM_DTYPE:
        raise CheckpointVersionError(
            f"{path} has format version {header.get('format_version')} / dtype {header.get('dtype')}, "
            f"expected {CHECKPOINT_VERSION} / {PARAM_DTYPE}"
        )

    try:
        config = EncoderConfig.from_dict(header['config']).validate()
        layers = header['layers']
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"{path} has an invalid config: {e}") from e
    shapes = config.layer_shapes()
    if len(layers) != len(shapes):
        raise CheckpointShapeError(f"{path} stores {len(layers)} layers, config implies {len(shapes)}")

    body = data[header_end:]
    weights = []
    biases = []
    for index, (layer, shape) in enumerate(zip(layers, shapes)):
        if tuple(layer['weight_shape']) != shape or tuple(layer['bias_shape']) != (shape[0],):
            raise CheckpointShapeError(
                f"{path} layer {index} stores weight {layer['weight_shape']} / bias {layer['bias_shape']}, "
                f"config implies {list(shape)} / {[shape[0]]}"
            )
        weights.append(_read_block(body, layer['weight_offset'], shape, path))
        biases.append(_read_block(body, layer['bias_offset'], (shape[0],), path))
    return EncoderParams(config=config, weights=tuple(weights), biases=tuple(biases))


def _read_block(body, offset, shape, path):
    count = int(np.prod(shape))
    end = offset + 8 * count
    if offset < 0 or end > len(body):
        raise CheckpointError(f"{path} is truncated (block at {offset} needs {8 * count} bytes)")
    return np.frombuffer(body[offset:end], dtype=PARAM_DTYPE).astype(np.float64).reshape(shape)
