import json

import numpy as np
import pytest

from xray_reid.encoder import (
    CHECKPOINT_MAGIC,
    EncoderConfig,
    EncoderParams,
    backward,
    embed,
    forward,
    identity_params,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from xray_reid.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    DimensionMismatchError,
    EncoderError,
)

LAYOUTS = {0: (), 1: (6,), 2: (6, 5)}


def perturbed(params, kind, layer, index, delta):
    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    target = weights[layer] if kind == 'weight' else biases[layer]
    target[index] += delta
    return EncoderParams(config=params.config, weights=tuple(weights), biases=tuple(biases))


def relative_error(analytic, numeric):
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / scale


def test_init_params_shapes():
    params = init_params(EncoderConfig(input_dim=4, hidden_dims=(), output_dim=4, init_seed=3))
    assert params.num_layers == 1
    assert params.weights[0].shape == (4, 4)
    np.testing.assert_array_equal(params.biases[0], np.zeros(4))


def test_init_params_is_deterministic():
    config = EncoderConfig(input_dim=5, hidden_dims=(7,), output_dim=3, init_seed=9)
    assert init_params(config) == init_params(config)
    assert init_params(config) != init_params(EncoderConfig(input_dim=5, hidden_dims=(7,), output_dim=3, init_seed=10))


def test_he_scale():
    params = init_params(EncoderConfig(input_dim=256, output_dim=256, init_seed=0))
    assert abs(params.weights[0].std() - np.sqrt(2.0 / 256)) < 0.1 * np.sqrt(2.0 / 256)


def test_invalid_config():
    with pytest.raises(ConfigError):
        init_params(EncoderConfig(input_dim=3, hidden_dims=(0,), output_dim=2))
    with pytest.raises(ConfigError):
        init_params(EncoderConfig(input_dim=3, activation='tanh'))


def test_identity_forward():
    x = np.array([0.5, -1.0, 2.0])
    embedding, _ = forward(identity_params(3), x)
    np.testing.assert_array_equal(embedding, x)


def test_normalisation_arithmetic():
    config = EncoderConfig(input_dim=2, output_dim=2, normalize_output=True)
    params = EncoderParams(config=config, weights=(np.eye(2),), biases=(np.zeros(2),))
    embedding, _ = forward(params, [3.0, 4.0])
    np.testing.assert_allclose(embedding, [0.6, 0.8], rtol=0, atol=1e-15)


def test_normalised_outputs_on_unit_sphere():
    params = init_params(EncoderConfig(input_dim=10, hidden_dims=(16, 12), output_dim=8, init_seed=1))
    x = np.random.default_rng(0).standard_normal((100, 10))
    norms = np.linalg.norm(embed(params, x), axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-12)


def test_batch_matches_single_rows():
    params = init_params(EncoderConfig(input_dim=4, hidden_dims=(5,), output_dim=3, init_seed=2))
    x = np.random.default_rng(1).standard_normal((6, 4))
    batch = embed(params, x)
    for row in range(6):
        np.testing.assert_allclose(embed(params, x[row]), batch[row], rtol=0, atol=1e-15)


def test_dimension_mismatch():
    params = init_params(EncoderConfig(input_dim=4, output_dim=2))
    with pytest.raises(DimensionMismatchError):
        forward(params, np.zeros(5))


def test_zero_norm_raises():
    config = EncoderConfig(input_dim=2, output_dim=2, normalize_output=True)
    params = EncoderParams(config=config, weights=(np.zeros((2, 2)),), biases=(np.zeros(2),))
    with pytest.raises(EncoderError):
        forward(params, [1.0, 1.0])


def test_zero_upstream_gradient():
    params = init_params(EncoderConfig(input_dim=4, hidden_dims=(5,), output_dim=3, init_seed=4))
    _, trace = forward(params, np.ones(4))
    grads, grad_input = backward(params, trace, np.zeros(3))
    assert all(not g.any() for g in grads.weights + grads.biases)
    assert not grad_input.any()


def test_linear_layer_weight_gradient_is_outer_product():
    params = init_params(EncoderConfig(input_dim=3, output_dim=2, normalize_output=False, init_seed=5))
    x = np.array([1.0, -2.0, 0.5])
    upstream = np.array([0.3, -0.7])
    _, trace = forward(params, x)
    grads, _ = backward(params, trace, upstream)
    np.testing.assert_allclose(grads.weights[0], np.outer(upstream, x), rtol=0, atol=1e-15)
    np.testing.assert_allclose(grads.biases[0], upstream, rtol=0, atol=1e-15)


def test_backward_rejects_mismatched_trace():
    small = init_params(EncoderConfig(input_dim=3, output_dim=2))
    large = init_params(EncoderConfig(input_dim=3, hidden_dims=(4,), output_dim=2))
    _, trace = forward(small, np.ones(3))
    with pytest.raises(DimensionMismatchError):
        backward(large, trace, np.ones(2))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    step = 1e-5
    configurations = 0
    for depth in (0, 1, 2):
        for normalize in (False, True):
            for trial in range(17):
                config = EncoderConfig(
                    input_dim=4, hidden_dims=LAYOUTS[depth], output_dim=3,
                    normalize_output=normalize, init_seed=int(rng.integers(1 << 30)),
                )
                params = init_params(config)
                params = EncoderParams(
                    config=config,
                    weights=params.weights,
                    biases=tuple(0.1 * rng.standard_normal(b.shape) for b in params.biases),
                )
                x = rng.standard_normal((2, 4))
                # keep every hidden unit away from the ReLU kink
                while any(np.min(np.abs(z)) < 1e-3 for z in forward(params, x)[1].preactivations[:-1]):
                    x = rng.standard_normal((2, 4))
                upstream = rng.standard_normal((2, 3))

                def objective(p, inputs=x):
                    return float(np.sum(embed(p, inputs) * upstream))

                _, trace = forward(params, x)
                grads, grad_input = backward(params, trace, upstream)

                for kind, analytic_set in (('weight', grads.weights), ('bias', grads.biases)):
                    for layer, analytic in enumerate(analytic_set):
                        numeric = np.zeros_like(analytic)
                        for index in np.ndindex(analytic.shape):
                            numeric[index] = (
                                objective(perturbed(params, kind, layer, index, step))
                                - objective(perturbed(params, kind, layer, index, -step))
                            ) / (2 * step)
                        assert relative_error(analytic, numeric) < 1e-6, (depth, normalize, trial, kind, layer)

                numeric_input = np.zeros_like(x)
                for index in np.ndindex(x.shape):
                    shifted = x.copy()
                    shifted[index] += step
                    plus = objective(params, shifted)
                    shifted[index] -= 2 * step
                    numeric_input[index] = (plus - objective(params, shifted)) / (2 * step)
                assert relative_error(grad_input, numeric_input) < 1e-6
                configurations += 1
    assert configurations >= 100


def test_digest_tracks_parameters():
    params = init_params(EncoderConfig(input_dim=3, output_dim=2, init_seed=1))
    assert params.digest() == init_params(EncoderConfig(input_dim=3, output_dim=2, init_seed=1)).digest()
    assert perturbed(params, 'bias', 0, (0,), 1e-12).digest() != params.digest()


def test_parameters_are_read_only():
    params = init_params(EncoderConfig(input_dim=3, output_dim=2))
    with pytest.raises(ValueError):
        params.weights[0][0, 0] = 1.0


def test_checkpoint_round_trip(tmp_path):
    params = init_params(EncoderConfig(input_dim=6, hidden_dims=(5, 4), output_dim=3, init_seed=8))
    path = tmp_path / 'enc.ckpt'

    save_checkpoint(params, path)
    loaded = load_checkpoint(path)

    assert loaded == params
    assert loaded.digest() == params.digest()
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)


def test_corrupted_magic(tmp_path):
    path = tmp_path / 'enc.ckpt'
    save_checkpoint(init_params(EncoderConfig(input_dim=2, output_dim=2)), path)
    data = bytearray(path.read_bytes())
    data[0:4] = b'XXXX'
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_shape_disagreeing_with_config(tmp_path):
    path = tmp_path / 'enc.ckpt'
    save_checkpoint(init_params(EncoderConfig(input_dim=3, output_dim=2)), path)
    data = path.read_bytes()
    start = len(CHECKPOINT_MAGIC)
    length = int(np.frombuffer(data[start:start + 8], dtype='<u8')[0])
    header = json.loads(data[start + 8:start + 8 + length])
    header['layers'][0]['weight_shape'] = [3, 2]
    encoded = json.dumps(header).encode('utf-8')
    rebuilt = CHECKPOINT_MAGIC + np.array([len(encoded)], dtype='<u8').tobytes() + encoded + data[start + 8 + length:]
    path.write_bytes(rebuilt)

    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / 'enc.ckpt'
    save_checkpoint(init_params(EncoderConfig(input_dim=3, output_dim=2)), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
