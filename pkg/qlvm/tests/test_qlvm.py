import os
import unittest

import numpy as np
import pandas as pd
from django.test import SimpleTestCase
from scipy.special import logit

from qlvm.exceptions import ConfigError, LatticeError, NumericalError
from qlvm.services.data_service import (
    Checkpoint, decode_checkpoint, encode_checkpoint, split, synth_mixture,
)
from qlvm.services.lattice import PointSet, fibonacci_rule, generate_points, lattice_points
from qlvm.services.net import Network, NetworkSpec, init_network, log_likelihood
from qlvm.services.qlvm_service import (
    PosteriorTable, TrainConfig, embed, embed_dataset, evaluate_bound, normalize_log_weights, posterior_table,
    qmc_log_evidence, reconstruct, sample_prior, train,
)
from qlvm.tests.factories import binary_matrix, constant_decoder, make_decoder

SLOW_TESTS = os.environ.get('QLVM_SLOW_TESTS') == '1'


def two_point_decoder(first: float, second: float) -> Network:
    """一维恒等嵌入解码器，在 z=0 和 z=1 处分别输出概率 first 和 second"""
    spec = NetworkSpec(latent_dim=1, widths=(1,), embedding='identity', activation='tanh')
    net = Network(spec)
    (weight, bias), = net.layers
    bias[...] = logit(first)
    weight[...] = logit(second) - logit(first)
    return net


TWO_POINTS = PointSet(points=np.array([[0.0], [1.0]]), mode='qmc')


class QmcEvidenceTest(SimpleTestCase):
    """格点证据估计"""

    def test_constant_decoder_gives_exact_likelihood(self):
        logits = np.array([0.3, -1.2, 2.0])
        net = constant_decoder(logits)
        x = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        points = generate_points(fibonacci_rule(8), 'rqmc', seed=0)
        values = qmc_log_evidence(net, x, points).values
        for i in range(2):
            self.assertAlmostEqual(values[i], log_likelihood('bernoulli', logits, x[i]), places=12)

    def test_single_point(self):
        net = make_decoder(seed=1, widths=(8, 5))
        x = binary_matrix(0, 3, 5)
        z = np.array([[0.2, 0.7]])
        values = qmc_log_evidence(net, x, PointSet(z, 'qmc')).values
        decoded = net.forward(z, record=False)[0]
        for i in range(3):
            self.assertAlmostEqual(values[i], log_likelihood('bernoulli', decoded, x[i]), places=12)

    def test_mixture_of_two_likelihoods(self):
        net = two_point_decoder(0.9, 0.1)
        value = qmc_log_evidence(net, np.array([[1.0]]), TWO_POINTS).values[0]
        self.assertAlmostEqual(value, np.log(0.5), places=12)

    def test_empty_point_set(self):
        with self.assertRaises(LatticeError):
            qmc_log_evidence(make_decoder(widths=(4, 81)), binary_matrix(0, 1, 81),
                             PointSet(np.zeros((0, 2)), 'qmc'))

    def test_batch_independence(self):
        net = make_decoder(seed=3, widths=(16, 16))
        x = binary_matrix(1, 6, 16)
        points = generate_points(fibonacci_rule(9), 'rqmc', seed=3)
        together = qmc_log_evidence(net, x, points).values
        for i in range(6):
            alone = qmc_log_evidence(net, x[i:i + 1], points).values[0]
            self.assertLess(abs(alone - together[i]), 1e-12)

    def test_bound_grows_with_lattice_size(self):
        """平均意义下更大的格点给出不更低的界"""
        net = make_decoder(seed=5, widths=(32, 32, 16))
        x = binary_matrix(9, 20, 16)
        n_shifts = 100 if SLOW_TESTS else 30
        means, errors = [], []
        for k in (10, 12, 14):
            report = evaluate_bound(net, x, generate_points(fibonacci_rule(k), 'qmc'), n_shifts, seed=k)
            means.append(report.mean)
            errors.append(report.std / np.sqrt(n_shifts))
        for small, large in ((0, 1), (1, 2), (0, 2)):
            slack = 2.0 * np.hypot(errors[small], errors[large])
            self.assertGreaterEqual(means[large], means[small] - slack - 1e-12)


class PosteriorTest(SimpleTestCase):
    """后验权重与嵌入"""

    def test_constant_decoder_is_uniform(self):
        net = constant_decoder([0.4, -0.4])
        points = generate_points(fibonacci_rule(8), 'qmc')
        table = posterior_table(net, np.array([[1.0, 0.0]]), points)
        np.testing.assert_allclose(table.weights, np.full((1, points.m), 1.0 / points.m), rtol=1e-12)

    def test_likelihood_ratio(self):
        net = two_point_decoder(0.6, 0.2)
        table = posterior_table(net, np.array([[1.0]]), TWO_POINTS)
        np.testing.assert_allclose(table.weights[0], [0.75, 0.25], rtol=1e-12)
        np.testing.assert_allclose(np.exp(table.log_weights), table.weights, rtol=1e-12)

    def test_rows_sum_to_one(self):
        net = make_decoder(seed=4, widths=(16, 81))
        table = posterior_table(net, binary_matrix(2, 10, 81), generate_points(fibonacci_rule(12), 'qmc'))
        np.testing.assert_allclose(table.weights.sum(axis=1), 1.0, atol=1e-9)

    def test_argmax_invariant_under_scaling(self):
        rng = np.random.default_rng(0)
        ll = rng.normal(scale=20.0, size=(10000, 21))
        shifted = ll + rng.normal(scale=500.0, size=(10000, 1))
        weights, _ = normalize_log_weights(ll)
        shifted_weights, _ = normalize_log_weights(shifted)
        np.testing.assert_array_equal(np.argmax(weights, axis=1), np.argmax(shifted_weights, axis=1))
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)

    def test_single_point_posterior(self):
        points = PointSet(np.array([[0.3, 0.8]]), 'qmc')
        table = PosteriorTable(points, np.ones((1, 1)), np.zeros((1, 1)))
        embedding = embed(table)
        np.testing.assert_allclose(embedding.mean, [[0.3, 0.8]], atol=1e-12)
        np.testing.assert_array_equal(embedding.mode, [[0.3, 0.8]])
        np.testing.assert_allclose(embedding.resultant, 1.0, atol=1e-12)

    def test_circular_mean_wraps(self):
        points = PointSet(np.array([[0.1], [0.9]]), 'qmc')
        table = PosteriorTable(points, np.array([[0.5, 0.5]]), np.log(np.array([[0.5, 0.5]])))
        mean = embed(table).mean[0, 0]
        self.assertLess(min(mean, 1.0 - mean), 1e-12)

    def test_mode_ties_take_smallest_index(self):
        points = PointSet(np.array([[0.1], [0.5], [0.9]]), 'qmc')
        weights = np.array([[0.25, 0.375, 0.375]])
        embedding = embed(PosteriorTable(points, weights, np.log(weights)))
        self.assertEqual(embedding.mode_index[0], 1)

    def test_uniform_posterior_has_no_direction(self):
        points = generate_points(fibonacci_rule(10), 'qmc')
        weights = np.full((1, points.m), 1.0 / points.m)
        embedding = embed(PosteriorTable(points, weights, np.log(weights)))
        self.assertLess(float(embedding.resultant.max()), 1e-6)

    def test_embed_dataset_matches_single_table(self):
        net = make_decoder(seed=6, widths=(8, 81))
        x = binary_matrix(3, 7, 81)
        points = generate_points(fibonacci_rule(9), 'qmc')
        whole = embed(posterior_table(net, x, points))
        chunked = embed_dataset(net, x, points)
        np.testing.assert_array_equal(chunked.mode_index, whole.mode_index)
        np.testing.assert_allclose(chunked.mean, whole.mean, atol=1e-12)
        self.assertEqual(chunked.subset([0, 2]).mean.shape, (2, 2))

    def test_reconstruct_uses_mode(self):
        net = make_decoder(seed=6, widths=(8, 81))
        embedding = embed_dataset(net, binary_matrix(3, 3, 81), generate_points(fibonacci_rule(9), 'qmc'))
        np.testing.assert_allclose(reconstruct(net, embedding), net.predict_mean(embedding.mode))
        with self.assertRaises(ConfigError):
            reconstruct(net, embedding, use='median')


class SamplePriorTest(SimpleTestCase):
    """先验采样"""

    def test_empty_request(self):
        self.assertEqual(sample_prior(make_decoder(widths=(4, 9)), 0, seed=1).shape, (0, 9))

    def test_seeded(self):
        net = make_decoder(widths=(4, 9))
        np.testing.assert_array_equal(sample_prior(net, 5, seed=2), sample_prior(net, 5, seed=2))

    def test_constant_decoder_rows_identical(self):
        samples = sample_prior(constant_decoder([0.0, 1.0]), 4, seed=3)
        np.testing.assert_array_equal(samples, np.tile(samples[0], (4, 1)))
        self.assertTrue(np.all((samples > 0) & (samples < 1)))


class TrainTest(SimpleTestCase):
    """训练循环"""

    def config(self, **overrides):
        values = dict(rule=fibonacci_rule(10), seed=0, epochs=5, batch_size=16, lr=1e-2, hidden=(16,),
                      activation='tanh')
        values.update(overrides)
        return TrainConfig(**values)

    def fresh_decoder(self, config, output_dim, seed=0):
        return init_network(config.decoder_spec(output_dim), seed)

    def test_seed_required(self):
        with self.assertRaises(ConfigError):
            self.config(seed=None)

    def test_zero_learning_rate_on_constant_decoder(self):
        config = self.config(lr=0.0)
        net = constant_decoder(np.zeros(16))
        before = net.params.copy()
        result = train(config, np.tile(binary_matrix(0, 1, 16), (40, 1)), net)
        np.testing.assert_array_equal(net.params, before)
        self.assertEqual(result.trace['objective'].nunique(), 1)
        self.assertEqual(list(result.trace['epoch']), [1, 2, 3, 4, 5])

    def test_deterministic_given_seed(self):
        config = self.config()
        x = binary_matrix(1, 40, 16)
        first = train(config, x, self.fresh_decoder(config, 16))
        second = train(config, x, self.fresh_decoder(config, 16))
        pd.testing.assert_frame_equal(first.trace, second.trace, check_exact=True)
        np.testing.assert_array_equal(first.net.params, second.net.params)

    def test_objective_improves(self):
        for seed in range(3):
            dataset = synth_mixture(seed, n_clusters=2, n=64, side=8)
            config = self.config(seed=seed, epochs=30, batch_size=64, hidden=(32, 32))
            result = train(config, dataset, self.fresh_decoder(config, dataset.dim, seed))
            objectives = result.trace['objective'].to_numpy()
            self.assertLess(objectives[-1], objectives[0])

    def test_resume_matches_uninterrupted_run(self):
        x = binary_matrix(2, 40, 16)
        full_config = self.config(epochs=4)
        full = train(full_config, x, self.fresh_decoder(full_config, 16))

        half_config = self.config(epochs=2)
        half = train(half_config, x, self.fresh_decoder(half_config, 16))
        stored = decode_checkpoint(encode_checkpoint(Checkpoint(
            kind='qlvm', networks={'decoder': half.net}, optimizers={'decoder': half.optimizer},
            epoch=half.epoch, rng_state=half.rng.bit_generator.state,
        )))
        resumed = train(full_config, x, stored.networks['decoder'], stored.optimizers['decoder'],
                        stored.restore_rng(), start_epoch=stored.epoch)

        np.testing.assert_array_equal(resumed.net.params, full.net.params)
        np.testing.assert_array_equal(resumed.trace['objective'].to_numpy(), full.trace['objective'].to_numpy()[2:])

    def test_on_epoch_callback(self):
        seen = []
        config = self.config(epochs=3)
        train(config, binary_matrix(3, 20, 16), self.fresh_decoder(config, 16),
              on_epoch=lambda epoch, objective: seen.append(epoch))
        self.assertEqual(seen, [1, 2, 3])

    def test_dimension_mismatch(self):
        config = self.config()
        with self.assertRaises(ConfigError):
            train(config, binary_matrix(0, 10, 9), self.fresh_decoder(config, 16))

    def test_non_finite_parameters_report_epoch(self):
        config = self.config(likelihood='gaussian')
        net = self.fresh_decoder(config, 4)
        net.layers[-1][1][0] = np.nan
        with self.assertRaises(NumericalError) as caught:
            train(config, np.zeros((8, 4)), net)
        self.assertEqual(caught.exception.diagnostics['epoch'], 1)
        self.assertEqual(caught.exception.diagnostics['batch'], 0)
        self.assertIn('max_logit', caught.exception.diagnostics)


class EvaluateBoundTest(SimpleTestCase):
    """测试集界"""

    def test_constant_decoder(self):
        logits = np.array([0.5, -0.5])
        x = np.array([[1.0, 0.0], [1.0, 1.0]])
        expected = np.mean([log_likelihood('bernoulli', logits, row) for row in x])
        report = evaluate_bound(constant_decoder(logits), x, generate_points(fibonacci_rule(9), 'qmc'),
                                n_shifts=5, seed=0)
        self.assertAlmostEqual(report.mean, expected, places=12)
        self.assertAlmostEqual(report.std, 0.0, places=12)
        self.assertEqual(report.n_shifts, 5)

    def test_unshifted_evaluation(self):
        net = make_decoder(seed=2, widths=(8, 81))
        x = binary_matrix(4, 5, 81)
        points = generate_points(fibonacci_rule(9), 'qmc')
        report = evaluate_bound(net, x, points, randomize=False)
        self.assertAlmostEqual(report.mean, qmc_log_evidence(net, x, points).mean, places=10)
        self.assertEqual(report.m, 34)

    def test_invalid_shift_count(self):
        with self.assertRaises(ConfigError):
            evaluate_bound(make_decoder(widths=(4, 81)), binary_matrix(0, 2, 81),
                           PointSet(lattice_points(fibonacci_rule(5)), 'qmc'), n_shifts=0)

    @unittest.skipUnless(SLOW_TESTS, '设置 QLVM_SLOW_TESTS=1 运行')
    def test_bound_approaches_training_objective(self):
        dataset = synth_mixture(0, n_clusters=4, n=400, side=12)
        config = TrainConfig(rule=fibonacci_rule(13), seed=0, epochs=40, batch_size=64, hidden=(64, 64))
        result = train(config, dataset, init_network(config.decoder_spec(dataset.dim), 0))
        report = evaluate_bound(result.net, dataset, generate_points(fibonacci_rule(16), 'qmc'), 5, seed=1)
        self.assertGreater(report.mean, -result.trace['objective'].iloc[-1] - 1.0)

    @unittest.skipUnless(SLOW_TESTS, '设置 QLVM_SLOW_TESTS=1 运行')
    def test_trained_bound_grows_with_lattice_size(self):
        """训练好的解码器、50 个测试点：m = 55, 233, 987, 6765 的平移平均界在 2 倍标准误内不下降"""
        train_set, test_set = split(synth_mixture(0, n_clusters=4, n=450, side=12), fraction=400 / 450)
        config = TrainConfig(rule=fibonacci_rule(13), seed=0, epochs=40, batch_size=64, hidden=(64, 64))
        result = train(config, train_set, init_network(config.decoder_spec(train_set.dim), 0))
        x = test_set.X[:50]
        n_shifts = 100
        means, errors = [], []
        for k in (10, 13, 16, 20):
            report = evaluate_bound(result.net, x, generate_points(fibonacci_rule(k), 'qmc'), n_shifts, seed=k)
            means.append(report.mean)
            errors.append(report.std / np.sqrt(n_shifts))
        for small in range(3):
            slack = 2.0 * np.hypot(errors[small], errors[small + 1])
            self.assertGreaterEqual(means[small + 1], means[small] - slack - 1e-12)
