import numpy as np
import pytest

from app.core.errors import RejectedInputError
from app.models.experiments import ClassifierConfig
from app.services.classifier import Classifier, build_classifier, train_classifier
from app.services.datagen import LabeledDataset, generate_mixture


def test_learns_the_benchmark_mixture(benchmark_data, benchmark_mixture):
    model = train_classifier(benchmark_data, ClassifierConfig(hidden=[16], epochs=30), seed=0)
    held_out = generate_mixture(benchmark_mixture, 500, seed=99)
    assert model.accuracy(held_out) >= 0.98


def test_probabilities_are_normalized(rng):
    model = build_classifier(2, 3, [4], seed=1)
    probs = model.predict_proba(rng.normal(size=(10, 2)))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(model.predict(rng.normal(size=(3, 2))).shape, (3,))


def test_same_seed_same_model(benchmark_data):
    cfg = ClassifierConfig(hidden=[8], epochs=3)
    assert train_classifier(benchmark_data, cfg, seed=4).to_bytes() == train_classifier(benchmark_data, cfg, seed=4).to_bytes()


def test_continue_from_initial_model(benchmark_data):
    cfg = ClassifierConfig(hidden=[8], epochs=3)
    init = build_classifier(2, 2, [8], seed=2)
    unchanged = train_classifier(benchmark_data, cfg, seed=0, init=init, epochs=0)
    assert unchanged.to_bytes() == init.to_bytes()
    with pytest.raises(RejectedInputError):
        train_classifier(benchmark_data, cfg, init=build_classifier(3, 2, [8], seed=2))


def test_rejects_empty_data():
    with pytest.raises(RejectedInputError):
        train_classifier(LabeledDataset.empty(2, 2), ClassifierConfig())


def test_per_example_loss_matches_accuracy_sign(benchmark_data):
    model = Classifier.from_bytes(train_classifier(benchmark_data, ClassifierConfig(hidden=[8], epochs=10), seed=1).to_bytes())
    losses = model.per_example_loss(benchmark_data)
    assert losses.shape == (len(benchmark_data),)
    assert np.all(losses >= 0)
    assert model.accuracy(None) is None
