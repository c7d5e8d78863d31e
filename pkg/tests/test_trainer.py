import math
from dataclasses import replace

import numpy as np
import pytest

from xray_reid.encoder import EncoderConfig, EncoderParams, forward, init_params
from xray_reid.errors import ConfigError, TrainingError
from xray_reid.metric import MiningStrategy, Triplet, mine_triplets, triplet_loss
from xray_reid.models import SplitSpec, SyntheticConfig
from xray_reid.operations import generate_synthetic, split_by_patient
from xray_reid.trainer import TrainConfig, batch_gradients, evaluate_mean_loss, sgd_step, train


def encoder_for(dataset, hidden=(8,), seed=0):
    return init_params(EncoderConfig(input_dim=dataset.ambient_dim, hidden_dims=hidden, output_dim=4, init_seed=seed))


def test_zero_learning_rate_is_identity(synthetic_dataset):
    params = encoder_for(synthetic_dataset)
    trained, history = train(TrainConfig(learning_rate=0.0, epochs=3, batch_size=18), params, synthetic_dataset)
    assert trained == params
    assert len(history) == 3


def test_zero_epochs_returns_initial_params(synthetic_dataset):
    params = encoder_for(synthetic_dataset)
    trained, history = train(TrainConfig(epochs=0), params, synthetic_dataset)
    assert trained == params
    assert len(history) == 0


def test_single_step_matches_finite_differences(make_dataset):
    dataset = make_dataset([('A', [1.0, 0.2, -0.3]), ('A', [0.4, 1.1, 0.0]), ('B', [0.9, 0.1, -0.2])])
    params = init_params(EncoderConfig(input_dim=3, hidden_dims=(4,), output_dim=2, init_seed=3))
    params = EncoderParams(params.config, params.weights, (np.full(4, 0.5), np.zeros(2)))
    triplets = [Triplet(0, 1, 2)]
    alpha = 4.0
    lr = 0.1
    features = dataset.features

    def loss_of(p):
        e = forward(p, features)[0]
        return triplet_loss(e[0], e[1], e[2], alpha)

    assert loss_of(params) > 0
    updated, loss = sgd_step(params, features, triplets, alpha, lr)
    assert loss == pytest.approx(loss_of(params), abs=1e-15)

    step = 1e-5
    for layer in range(params.num_layers):
        numeric = np.zeros_like(params.weights[layer])
        for index in np.ndindex(numeric.shape):
            shifted = [w.copy() for w in params.weights]
            shifted[layer][index] += step
            plus = loss_of(EncoderParams(params.config, tuple(shifted), params.biases))
            shifted[layer][index] -= 2 * step
            minus = loss_of(EncoderParams(params.config, tuple(shifted), params.biases))
            numeric[index] = (plus - minus) / (2 * step)
        expected = params.weights[layer] - lr * numeric
        error = np.linalg.norm(updated.weights[layer] - expected) / np.linalg.norm(params.weights[layer] - expected)
        assert error < 1e-6


def test_collapsed_batch_loss_equals_margin():
    config = EncoderConfig(input_dim=3, output_dim=2, normalize_output=False)
    collapsed = EncoderParams(config, (np.zeros((2, 3)),), (np.array([0.5, -0.5]),))
    features = np.random.default_rng(0).standard_normal((6, 3))
    labels = ['A', 'A', 'B', 'B', 'C', 'C']
    embeddings, trace = forward(collapsed, features)
    triplets = mine_triplets(embeddings, labels, MiningStrategy.SEMI_HARD, 10, seed=0, alpha=0.2)

    loss, _ = batch_gradients(collapsed, embeddings, trace, triplets, 0.2)

    assert abs(loss - 0.2) < 1e-9


def test_mean_loss_of_collapsed_encoder(synthetic_dataset):
    config = EncoderConfig(input_dim=synthetic_dataset.ambient_dim, output_dim=2, normalize_output=False)
    collapsed = EncoderParams(config, (np.zeros((2, synthetic_dataset.ambient_dim)),), (np.ones(2),))
    assert evaluate_mean_loss(collapsed, synthetic_dataset, 0.3, seed=1, count=50) == pytest.approx(0.3, abs=1e-12)


def test_mean_loss_of_separated_clusters(make_dataset):
    dataset = make_dataset([('A', [0.0, 0.0]), ('A', [0.0, 0.0]), ('B', [10.0, 0.0]), ('B', [10.0, 0.0])])
    config = EncoderConfig(input_dim=2, output_dim=2, normalize_output=False)
    params = EncoderParams(config, (np.eye(2),), (np.zeros(2),))
    assert evaluate_mean_loss(params, dataset, 0.2, seed=0, count=8) == 0.0


def test_mean_loss_matches_naive_loop(synthetic_dataset):
    params = encoder_for(synthetic_dataset, seed=4)
    embeddings = forward(params, synthetic_dataset.features)[0]
    triplets = mine_triplets(embeddings, synthetic_dataset.patient_ids, MiningStrategy.RANDOM, 40, seed=5, alpha=0.2)
    naive = sum(triplet_loss(embeddings[a], embeddings[p], embeddings[n], 0.2) for a, p, n in triplets) / 40
    assert evaluate_mean_loss(params, synthetic_dataset, 0.2, seed=5, count=40) == pytest.approx(naive, abs=1e-12)


def test_noise_free_training_reduces_loss():
    dataset = generate_synthetic(SyntheticConfig(
        num_identities=16, visits_per_identity=3, latent_dim=4, ambient_dim=8, visit_noise_sigma=0.0,
        projection_seed=2, sample_seed=3,
    ))
    params = encoder_for(dataset, hidden=(16,), seed=1)
    _, history = train(TrainConfig(epochs=10, batch_size=24, learning_rate=0.1, triplets_per_batch=32,
                                       mining=MiningStrategy.RANDOM), params, dataset)
    assert history.train_loss[-1] < history.train_loss[0]


def test_training_is_deterministic(synthetic_dataset):
    train_set, val_set, _ = split_by_patient(synthetic_dataset, SplitSpec(0.5, 0.25, 0.25, seed=0))
    config = TrainConfig(epochs=3, batch_size=9, triplets_per_batch=16, seed=4)
    params = encoder_for(synthetic_dataset)

    first, history_a = train(config, params, train_set, val_set)
    second, history_b = train(config, params, train_set, val_set)

    assert first == second
    assert history_a.to_frame().equals(history_b.to_frame())


def test_history_columns_and_validation(synthetic_dataset):
    train_set, val_set, _ = split_by_patient(synthetic_dataset, SplitSpec(0.5, 0.25, 0.25, seed=0))
    _, history = train(TrainConfig(epochs=2, batch_size=9, val_pairs=20), encoder_for(synthetic_dataset), train_set, val_set)

    frame = history.to_frame()
    assert list(frame.columns) == ['epoch', 'train_loss', 'val_loss', 'val_auroc']
    assert list(frame['epoch']) == [1, 2]
    assert all(0.0 <= v <= 1.0 for v in history.val_auroc)


def test_missing_validation_gives_nan(synthetic_dataset):
    _, history = train(TrainConfig(epochs=1, batch_size=18), encoder_for(synthetic_dataset), synthetic_dataset)
    assert math.isnan(history.val_loss[0]) and math.isnan(history.val_auroc[0])


def test_history_csv(tmp_path, synthetic_dataset):
    _, history = train(TrainConfig(epochs=4, batch_size=18), encoder_for(synthetic_dataset), synthetic_dataset)
    path = tmp_path / 'history.csv'
    history.save_csv(path)
    lines = path.read_text(encoding='utf-8').splitlines()
    assert lines[0] == 'epoch,train_loss,val_loss,val_auroc'
    assert len(lines) == 5


def test_overlapping_validation_rejected(synthetic_dataset):
    with pytest.raises(TrainingError, match='shares'):
        train(TrainConfig(epochs=1), encoder_for(synthetic_dataset), synthetic_dataset, synthetic_dataset)


def test_training_set_needs_positive_pairs(make_dataset):
    dataset = make_dataset([('A', [0.0, 1.0]), ('B', [1.0, 0.0])])
    with pytest.raises(TrainingError):
        train(TrainConfig(epochs=1), encoder_for(dataset), dataset)


def test_non_finite_loss_names_epoch_and_batch(synthetic_dataset):
    params = encoder_for(synthetic_dataset, hidden=())
    params = replace(params, config=replace(params.config, normalize_output=False))
    with pytest.raises(TrainingError) as excinfo:
        train(TrainConfig(epochs=5, learning_rate=1e200, batch_size=36), params, synthetic_dataset)
    assert excinfo.value.epoch is not None and excinfo.value.batch is not None


def test_invalid_train_config():
    with pytest.raises(ConfigError):
        TrainConfig(mining='nearest')
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1).validate()


def test_lr_decay_applies_per_epoch(synthetic_dataset):
    params = encoder_for(synthetic_dataset)
    config = TrainConfig(learning_rate=0.1, lr_decay=0.5, epochs=3, batch_size=len(synthetic_dataset),
                         triplets_per_batch=16, mining=MiningStrategy.RANDOM, seed=4)

    trained, _ = train(config, params, synthetic_dataset)

    # one batch per epoch: replay with lr * decay**epoch
    labels = synthetic_dataset.patient_ids
    shuffle_rng = np.random.default_rng(config.seed)
    expected = params
    for epoch in range(config.epochs):
        rows = shuffle_rng.permutation(len(synthetic_dataset))
        features = synthetic_dataset.features[rows]
        triplets = mine_triplets(forward(expected, features)[0], [labels[i] for i in rows], config.mining,
                                 config.triplets_per_batch, seed=[config.seed, epoch, 0], alpha=config.alpha)
        expected, _ = sgd_step(expected, features, triplets, config.alpha, 0.1 * 0.5 ** epoch)

    assert trained == expected
    assert trained != train(replace(config, lr_decay=1.0), params, synthetic_dataset)[0]
