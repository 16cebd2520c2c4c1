import math

import numpy as np
import pytest

from app.core.config import loader
from app.core.errors import RejectedInputError
from app.models.experiments import DiffusionTrainConfig, MixtureSpec, TrainConfig
from app.services import diffusion as diffusion_module
from app.services.datagen import LabeledDataset, generate_mixture
from app.services.diffusion import (
    TIME_EMBED_DIM,
    ConditionalDenoiser,
    build_linear_schedule,
    diffusion_train,
    forward_diffuse_closed,
    forward_diffuse_step,
    sample,
    sample_dataset,
    time_embedding,
)
from app.services.nn_core import DenseLayer, DenseNetwork

QUICK = DiffusionTrainConfig(
    timesteps=20, beta_min=0.01, beta_max=0.3, hidden=[16], epoch_scale=None,
    train=TrainConfig(learning_rate=0.05, epochs=5, batch_size=16),
)


def zero_denoiser(schedule, data_dim=2, num_classes=2) -> ConditionalDenoiser:
    width = data_dim + TIME_EMBED_DIM + num_classes
    body = DenseNetwork([DenseLayer(np.zeros((data_dim, width)), np.zeros(data_dim))])
    return ConditionalDenoiser(body, data_dim, num_classes, schedule)


class TestSchedule:
    def test_two_step_products(self):
        schedule = build_linear_schedule(2, 0.1, 0.2)
        np.testing.assert_allclose(schedule.alpha_bar, [0.9, 0.72], atol=1e-15)

    def test_long_schedule_reaches_noise(self):
        schedule = build_linear_schedule(1000, 1e-4, 0.02)
        assert schedule.alpha_bar[-1] < 1e-4

    @pytest.mark.parametrize("T", [2, 50, 1000])
    def test_matches_independent_product(self, T):
        schedule = build_linear_schedule(T, 1e-4, 0.02)
        product = 1.0
        for t in range(T):
            product *= 1.0 - schedule.beta[t]
            assert schedule.alpha_bar[t] == pytest.approx(product, abs=1e-12)
        np.testing.assert_allclose(schedule.alpha_bar[1:], schedule.alpha_bar[:-1] * schedule.alpha[1:], atol=1e-15)

    @pytest.mark.parametrize("T, lo, hi", [(1, 0.1, 0.2), (10, 0.2, 0.1), (10, 0.0, 0.1), (10, 0.1, 1.0)])
    def test_invalid_bounds(self, T, lo, hi):
        with pytest.raises(RejectedInputError):
            build_linear_schedule(T, lo, hi)


class TestForwardProcess:
    def test_tiny_beta_keeps_input(self):
        schedule = build_linear_schedule(2, 1e-12, 2e-12)
        x = np.array([0.3, -1.2])
        np.testing.assert_allclose(forward_diffuse_step(x, 1, schedule, np.zeros(2)), x, atol=1e-11)

    def test_zero_input_scales_noise(self):
        schedule = build_linear_schedule(10, 0.01, 0.2)
        z = np.array([1.5, -0.5, 2.0])
        np.testing.assert_allclose(forward_diffuse_step(np.zeros(3), 4, schedule, z), math.sqrt(schedule.beta[3]) * z)

    def test_closed_form_endpoints(self):
        schedule = build_linear_schedule(1000, 1e-12, 0.5)
        x0 = np.array([2.0, -3.0])
        np.testing.assert_allclose(forward_diffuse_closed(x0, 1, schedule, np.zeros(2)), x0, atol=1e-10)
        noise = np.array([0.7, 0.1])
        np.testing.assert_allclose(forward_diffuse_closed(x0, 1000, schedule, noise), noise, atol=1e-8)

    @pytest.mark.parametrize("t", [0, 11, 2.0])
    def test_step_out_of_range(self, t):
        schedule = build_linear_schedule(10, 0.01, 0.2)
        with pytest.raises(RejectedInputError):
            forward_diffuse_step(np.zeros(2), t, schedule, np.zeros(2))
        with pytest.raises(RejectedInputError):
            forward_diffuse_closed(np.zeros(2), t, schedule, np.zeros(2))

    def test_dimension_mismatch(self):
        schedule = build_linear_schedule(10, 0.01, 0.2)
        with pytest.raises(RejectedInputError):
            forward_diffuse_step(np.zeros(2), 1, schedule, np.zeros(3))

    def test_recorded_noise_replays_exactly(self):
        schedule = build_linear_schedule(30, 1e-3, 0.2)
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=3)
        noises = [rng.standard_normal(3) for _ in range(schedule.T)]

        def trajectory():
            x, path = x0, []
            for t, z in enumerate(noises, start=1):
                x = forward_diffuse_step(x, t, schedule, z)
                path.append(x)
            return np.stack(path)

        first = trajectory()
        np.testing.assert_array_equal(trajectory(), first)
        np.testing.assert_array_equal(
            first[-1], forward_diffuse_step(first[-2], schedule.T, schedule, noises[-1])
        )

    @pytest.mark.parametrize("t", [1, 10, 40])
    def test_iterated_steps_match_marginal(self, t):
        schedule = build_linear_schedule(40, 1e-3, 0.1)
        rng = np.random.default_rng(t)
        n = 10_000
        x0 = np.array([1.0, -2.0])
        x = np.tile(x0, (n, 1))
        for s in range(1, t + 1):
            x = forward_diffuse_step(x, s, schedule, rng.standard_normal(x.shape))
        alpha_bar = schedule.alpha_bar[t - 1]
        variance = 1.0 - alpha_bar
        mean_se = math.sqrt(variance / n)
        var_se = variance * math.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(x.mean(axis=0) - math.sqrt(alpha_bar) * x0) < 4 * mean_se)
        assert np.all(np.abs(x.var(axis=0, ddof=1) - variance) < 4 * var_se)


class TestTimeEmbedding:
    def test_layout(self):
        schedule = build_linear_schedule(8, 0.01, 0.2)
        emb = time_embedding(np.array([4]), schedule)
        assert emb.shape == (1, TIME_EMBED_DIM)
        assert emb[0, 0] == 0.5
        assert emb[0, 1] == pytest.approx(math.sqrt(schedule.alpha_bar[3]))
        np.testing.assert_allclose(emb[0, 2:6], np.sin(0.5 * np.pi * 2.0 ** np.arange(4)), atol=1e-12)
        np.testing.assert_allclose(emb[0, 6:], np.cos(0.5 * np.pi * 2.0 ** np.arange(4)), atol=1e-12)


class TestTraining:
    def test_empty_dataset(self):
        with pytest.raises(RejectedInputError):
            diffusion_train(LabeledDataset.empty(2, 2), QUICK, seed=0)

    def test_fixed_seed_is_bitwise_reproducible(self, benchmark_data):
        first = diffusion_train(benchmark_data, QUICK, seed=9)
        second = diffusion_train(benchmark_data, QUICK, seed=9)
        assert first.to_bytes() == second.to_bytes()

    def test_single_point_overfits(self, mocker):
        data = LabeledDataset(np.array([[0.5, -0.5]]), np.array([1]), 2)
        cfg = QUICK.model_copy(update={"train": TrainConfig(learning_rate=0.05, epochs=1000, batch_size=1)})
        spy = mocker.spy(diffusion_module, "train_network")
        diffusion_train(data, cfg, seed=2)
        losses = spy.spy_return.epoch_losses
        assert np.mean(losses[-100:]) < np.mean(losses[:100])

    def test_default_schedule_is_the_ddpm_range(self):
        cfg = DiffusionTrainConfig()
        assert (cfg.timesteps, cfg.beta_min, cfg.beta_max) == (200, 1e-4, 0.02)

    def test_epoch_scaling(self):
        cfg = DiffusionTrainConfig()
        assert cfg.resolve_epochs(2, 400) == 2500
        assert cfg.resolve_epochs(2, 10) == cfg.max_epochs
        assert QUICK.resolve_epochs(2, 400) == 5

    def test_serialized_denoiser_predicts_the_same(self, benchmark_data, rng):
        denoiser = diffusion_train(benchmark_data, QUICK, seed=1)
        restored = ConditionalDenoiser.from_bytes(denoiser.to_bytes())
        x = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(restored.predict_noise(x, 1, 7), denoiser.predict_noise(x, 1, 7))
        assert restored.schedule.T == 20


class TestSampling:
    def test_zero_network_follows_hand_update(self):
        schedule = build_linear_schedule(2, 0.1, 0.2)
        denoiser = zero_denoiser(schedule)
        rng = np.random.default_rng(5)
        x_T = rng.standard_normal((3, 2))
        z = rng.standard_normal((3, 2))
        x_1 = x_T / math.sqrt(0.8) + math.sqrt(0.2) * z
        expected = x_1 / math.sqrt(0.9)
        np.testing.assert_allclose(sample(denoiser, schedule, 0, 3, seed=5), expected, atol=1e-12)

    def test_same_seed_same_samples(self, benchmark_data):
        denoiser = diffusion_train(benchmark_data, QUICK, seed=3)
        np.testing.assert_array_equal(sample(denoiser, None, 1, 10, 8), sample(denoiser, None, 1, 10, 8))
        assert sample(denoiser, None, 1, 10, 8).shape == (10, 2)

    def test_rejects_foreign_schedule(self):
        denoiser = zero_denoiser(build_linear_schedule(4, 0.01, 0.2))
        with pytest.raises(RejectedInputError, match="schedule"):
            sample(denoiser, build_linear_schedule(5, 0.01, 0.2), 0, 2, 0)
        with pytest.raises(RejectedInputError, match="schedule"):
            sample(denoiser, build_linear_schedule(4, 0.02, 0.2), 0, 2, 0)
        equal = build_linear_schedule(4, 0.01, 0.2)
        np.testing.assert_array_equal(sample(denoiser, equal, 0, 2, 0), sample(denoiser, None, 0, 2, 0))

    @pytest.mark.parametrize("y, count", [(2, 1), (-1, 1), (0, 0)])
    def test_rejects_bad_requests(self, y, count):
        denoiser = zero_denoiser(build_linear_schedule(4, 0.01, 0.2))
        with pytest.raises(RejectedInputError):
            sample(denoiser, None, y, count, 0)

    def test_dataset_labels_and_origin(self):
        denoiser = zero_denoiser(build_linear_schedule(4, 0.01, 0.2))
        data = sample_dataset(denoiser, 3, lambda y: 100 + y, origin=2)
        assert data.class_counts().tolist() == [3, 3]
        assert set(data.origin.tolist()) == {2}
        assert len(sample_dataset(denoiser, 0, lambda y: y, origin=2)) == 0


@pytest.mark.slow
def test_desk_denoiser_generation_quality():
    profile = loader.load_config("defaults/desk_schedule.yaml")["diffusion"]
    spec = MixtureSpec()
    data = generate_mixture(spec, 400, seed=17)
    denoiser = diffusion_train(data, DiffusionTrainConfig(**profile), seed=17)
    means = np.asarray(spec.means)
    for y in range(2):
        points = sample(denoiser, None, y, 500, seed=100 + y)
        assert np.all(np.abs(points.mean(axis=0) - means[y]) <= 0.15)
        # 等方差等先验下 Bayes 边界为 x1 + x2 = 0
        predicted = (points.sum(axis=1) > 0).astype(int)
        assert np.mean(predicted == y) >= 0.95
