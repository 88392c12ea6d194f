import itertools

import numpy as np
from django.test import SimpleTestCase

from qlvm.exceptions import ConfigError
from qlvm.services.analysis import (
    DensityField, aggregate_posterior, density_ratio_graph, geodesic, jacobian_frobenius, latent_grid,
    mean_shift, mean_shift_step, nearest_point_index, smooth_field, toroidal_distance, traversal,
)
from qlvm.services.lattice import PointSet, fibonacci_rule, generate_points
from qlvm.services.net import Network, NetworkSpec
from qlvm.services.qlvm_service import PosteriorTable, iter_posterior_tables
from qlvm.tests.factories import binary_matrix, constant_decoder, make_decoder
from qlvm.utils import wrap_unit


def lattice_field(k: int, weights=None) -> DensityField:
    points = generate_points(fibonacci_rule(k), 'qmc')
    if weights is None:
        weights = np.full(points.m, 1.0 / points.m)
    return DensityField(points, np.asarray(weights, dtype=np.float64))


def peaked_field(k: int, peaks, sigma: float) -> DensityField:
    points = generate_points(fibonacci_rule(k), 'qmc')
    density = sum(np.exp(-toroidal_distance(points.points, np.asarray(peak)) ** 2 / (2 * sigma ** 2))
                  for peak in peaks)
    return DensityField(points, density / density.sum())


def bellman_ford(graph, source: int) -> np.ndarray:
    edges = graph.tocoo()
    distance = np.full(graph.shape[0], np.inf)
    distance[source] = 0.0
    for _ in range(graph.shape[0] - 1):
        candidate = distance[edges.row] + edges.data
        updated = distance.copy()
        np.minimum.at(updated, edges.col, candidate)
        if np.array_equal(updated, distance):
            break
        distance = updated
    return distance


class AggregatePosteriorTest(SimpleTestCase):
    """聚合后验"""

    def setUp(self):
        self.points = PointSet(np.array([[0.1, 0.1], [0.5, 0.5], [0.9, 0.2]]), 'qmc')

    def table(self, weights):
        weights = np.asarray(weights, dtype=np.float64)
        with np.errstate(divide='ignore'):
            return PosteriorTable(self.points, weights, np.log(weights))

    def test_single_datum(self):
        field = aggregate_posterior(self.table([[0.2, 0.3, 0.5]]))
        np.testing.assert_array_equal(field.weights, [0.2, 0.3, 0.5])

    def test_disjoint_rows_average(self):
        field = aggregate_posterior(self.table([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        np.testing.assert_array_equal(field.weights, [0.5, 0.5, 0.0])

    def test_chunks_match_single_table(self):
        net = make_decoder(seed=2, widths=(8, 81))
        x = binary_matrix(0, 600, 81)
        points = generate_points(fibonacci_rule(9), 'qmc')
        chunked = aggregate_posterior(iter_posterior_tables(net, x, points, chunk=128))
        whole = aggregate_posterior(next(iter_posterior_tables(net, x, points, chunk=1000)))
        np.testing.assert_allclose(chunked.weights, whole.weights, rtol=1e-12)
        self.assertAlmostEqual(float(chunked.weights.sum()), 1.0, delta=1e-9)
        self.assertTrue(np.all(chunked.weights >= 0.0))

    def test_constant_decoder_gives_uniform_density(self):
        net = constant_decoder(np.zeros(81))
        points = generate_points(fibonacci_rule(8), 'qmc')
        field = aggregate_posterior(iter_posterior_tables(net, binary_matrix(1, 5, 81), points))
        np.testing.assert_allclose(field.weights, 1.0 / points.m, rtol=1e-12)

    def test_mismatched_point_sets(self):
        other = PosteriorTable(PointSet(self.points.points + 0.01, 'qmc'), np.full((1, 3), 1 / 3), np.zeros((1, 3)))
        with self.assertRaises(ConfigError):
            aggregate_posterior([self.table([[1.0, 0.0, 0.0]]), other])

    def test_empty_input(self):
        with self.assertRaises(ConfigError):
            aggregate_posterior([])


class MeanShiftTest(SimpleTestCase):
    """环面 mean-shift"""

    def test_toroidal_distance_wraps(self):
        self.assertAlmostEqual(float(toroidal_distance(np.array([0.05, 0.5]), np.array([0.95, 0.5]))), 0.1)

    def test_single_peak(self):
        peak = np.array([0.3, 0.6])
        field = peaked_field(20, [peak], sigma=0.03)
        seeds = wrap_unit(peak + np.array([[0.1, -0.05], [-0.12, 0.0], [0.0, 0.14]]))
        result = mean_shift(field, bandwidth=0.05, seeds=seeds)
        self.assertTrue(result.converged.all())
        self.assertEqual(result.n_clusters, 1)
        self.assertLess(float(toroidal_distance(result.centroids[0], peak)), 0.01)

    def test_peak_across_boundary(self):
        peak = np.array([0.99, 0.01])
        field = peaked_field(20, [peak], sigma=0.03)
        result = mean_shift(field, bandwidth=0.05, seeds=np.array([[0.05, 0.05], [0.93, 0.97]]))
        self.assertEqual(result.n_clusters, 1)
        self.assertLess(float(toroidal_distance(result.centroids[0], peak)), 0.01)

    def test_two_modes(self):
        peaks = np.array([[0.25, 0.25], [0.75, 0.75]])
        field = peaked_field(20, peaks, sigma=0.05)
        seeds = generate_points(fibonacci_rule(13), 'qmc').points
        result = mean_shift(field, bandwidth=0.1, seeds=seeds)

        self.assertEqual(result.n_clusters, 2)
        for peak in peaks:
            self.assertLess(float(toroidal_distance(result.centroids, peak).min()), 0.02)

        moved, _ = mean_shift_step(field, result.centroids, 0.1)
        self.assertTrue(np.all(toroidal_distance(moved, result.centroids) < 1e-6))
        converged = result.converged
        self.assertTrue(np.all(result.assignments[converged] >= 0))
        self.assertTrue(np.all(result.assignments[converged] < 2))
        self.assertTrue(np.all(result.assignments[~converged] == -1))

    def test_uniform_field_seeds_stay_put(self):
        field = lattice_field(10)
        result = mean_shift(field, bandwidth=0.05)
        self.assertTrue(result.converged.all())
        np.testing.assert_allclose(toroidal_distance(result.modes, field.points.points), 0.0, atol=1e-9)
        centroids = result.centroids
        for i, j in itertools.combinations(range(len(centroids)), 2):
            self.assertGreaterEqual(float(toroidal_distance(centroids[i], centroids[j])), 0.05)

    def test_invalid_bandwidth(self):
        with self.assertRaises(ConfigError):
            mean_shift(lattice_field(8), bandwidth=0.0)


class JacobianTest(SimpleTestCase):
    """Jacobian Frobenius 范数场"""

    def test_constant_decoder(self):
        field = jacobian_frobenius(constant_decoder([0.5, 1.0]), generate_points(fibonacci_rule(8), 'qmc'))
        np.testing.assert_array_equal(field.norms, 0.0)

    def test_sin_cos_stack(self):
        spec = NetworkSpec(latent_dim=1, widths=(2,), embedding='periodic', head='gaussian')
        net = Network(spec)
        net.layers[0][0][...] = np.eye(2)
        z = np.linspace(0.0, 1.0, 50, endpoint=False)[:, None]
        field = jacobian_frobenius(net, z)
        np.testing.assert_allclose(field.norms, 2.0 * np.pi, atol=1e-5)

    def test_translation_covariance(self):
        net = make_decoder(seed=4, widths=(8, 5))
        shift = np.array([0.2, 0.65])
        translated = net.copy()
        weight = translated.layers[0][0]
        original = net.layers[0][0]
        cos, sin = np.cos(2 * np.pi * shift)[:, None], np.sin(2 * np.pi * shift)[:, None]
        weight[:2] = cos * original[:2] - sin * original[2:]
        weight[2:] = sin * original[:2] + cos * original[2:]

        z = generate_points(fibonacci_rule(8), 'qmc').points
        expected = jacobian_frobenius(net, wrap_unit(z + shift)).norms
        np.testing.assert_allclose(jacobian_frobenius(translated, z).norms, expected, rtol=0, atol=1e-9)

    def test_step_range(self):
        with self.assertRaises(ConfigError):
            jacobian_frobenius(make_decoder(), np.zeros((1, 2)), step=0.02)


class SmoothFieldTest(SimpleTestCase):
    """环面高斯平滑"""

    def setUp(self):
        self.points = generate_points(fibonacci_rule(13), 'qmc')

    def test_constant_field(self):
        np.testing.assert_allclose(smooth_field(self.points, np.full(self.points.m, 3.5), 0.05), 3.5, rtol=1e-12)

    def test_tiny_bandwidth_is_identity(self):
        values = np.random.default_rng(0).random(self.points.m)
        np.testing.assert_allclose(smooth_field(self.points, values, 1e-6), values, atol=1e-9)

    def test_spike_spreads_symmetrically(self):
        values = np.zeros(self.points.m)
        values[0] = 1.0
        smoothed = smooth_field(self.points, values, 0.05)
        self.assertAlmostEqual(float(smoothed.mean()), float(values.mean()), delta=1e-9)
        for j in (1, 5, 40):
            self.assertAlmostEqual(smoothed[j], smoothed[self.points.m - j], delta=1e-12)
        self.assertEqual(int(np.argmax(smoothed)), 0)

    def test_mean_preserved(self):
        values = np.random.default_rng(1).random(self.points.m)
        self.assertAlmostEqual(float(smooth_field(self.points, values, 0.03).mean()), float(values.mean()),
                               delta=1e-9)

    def test_jacobian_field_smooth(self):
        field = jacobian_frobenius(make_decoder(seed=1, widths=(8, 4)), self.points).smooth(0.02)
        self.assertEqual(field.smoothed.shape, (self.points.m,))
        self.assertEqual(field.bandwidth, 0.02)


class GeodesicTest(SimpleTestCase):
    """密度比测地线"""

    def random_field(self, k, seed):
        weights = np.random.default_rng(seed).random(fibonacci_rule(k).m) + 0.01
        return lattice_field(k, weights / weights.sum())

    def test_edge_costs(self):
        field = self.random_field(9, 0)
        graph = density_ratio_graph(field).tocoo()
        z, rho = field.points.points, field.weights
        for u, v, cost in zip(graph.row[:50], graph.col[:50], graph.data[:50]):
            expected = float(toroidal_distance(z[u], z[v])) * rho[u] / rho[v]
            np.testing.assert_allclose(cost, expected, rtol=1e-12)
        dense = density_ratio_graph(field).toarray()
        np.testing.assert_array_equal(dense > 0, dense.T > 0)

    def test_same_endpoint(self):
        path = geodesic(self.random_field(8, 1), 3, 3)
        self.assertEqual(path.n_points, 1)
        self.assertEqual(path.cost, 0.0)

    def test_coordinates_snap_to_lattice(self):
        field = lattice_field(10)
        self.assertEqual(nearest_point_index(field, [0.999, 0.001]), 0)
        self.assertEqual(nearest_point_index(field, 7), 7)
        with self.assertRaises(ConfigError):
            nearest_point_index(field, field.m)

    def test_matches_bellman_ford(self):
        rng = np.random.default_rng(2)
        for trial in range(20):
            k = (9, 10, 11)[trial % 3]
            field = self.random_field(k, 100 + trial)
            source, destination = rng.choice(field.m, size=2, replace=False)
            path = geodesic(field, int(source), int(destination))
            oracle = bellman_ford(density_ratio_graph(field), int(source))
            np.testing.assert_allclose(path.cost, oracle[destination], rtol=1e-12)
            self.assertAlmostEqual(float(path.edge_costs.sum()), path.cost, delta=1e-12)
            self.assertEqual(path.indices[0], source)
            self.assertEqual(path.indices[-1], destination)

    def test_matches_path_enumeration(self):
        for trial in range(5):
            field = self.random_field(6, 200 + trial)
            graph = density_ratio_graph(field).toarray()
            m = field.m
            best = np.inf
            for length in range(0, m - 1):
                for middle in itertools.permutations(range(1, m - 1), length):
                    route = (0,) + middle + (m - 1,)
                    cost = 0.0
                    for u, v in zip(route[:-1], route[1:]):
                        cost += graph[u, v]
                    best = min(best, cost)
            np.testing.assert_allclose(geodesic(field, 0, m - 1).cost, best, rtol=1e-12)

    def test_uniform_field_is_nearly_straight(self):
        field = lattice_field(20)
        for source, destination in (([0.1, 0.2], [0.45, 0.2]), ([0.1, 0.4], [0.4, 0.1])):
            path = geodesic(field, source, destination)
            straight = float(toroidal_distance(path.points[0], path.points[-1]))
            self.assertGreaterEqual(path.cost, straight - 1e-12)
            self.assertLessEqual(path.cost, 1.1 * straight)

    def test_path_avoids_empty_region(self):
        """两个密度峰之间的低密度区域使路径代价高于均匀场"""
        peaks = [[0.3, 0.5], [0.7, 0.5]]
        field = peaked_field(13, peaks, sigma=0.05)
        uniform = lattice_field(13)
        peaked_cost = geodesic(field, peaks[0], peaks[1]).cost
        uniform_cost = geodesic(uniform, peaks[0], peaks[1]).cost
        self.assertGreater(peaked_cost, uniform_cost)

    def test_density_floor_positive(self):
        with self.assertRaises(ConfigError):
            density_ratio_graph(lattice_field(8), epsilon=0.0)


class TraversalTest(SimpleTestCase):
    """线性遍历与网格解码"""

    def test_frames(self):
        net = make_decoder(seed=3, widths=(8, 4))
        latents, decoded = traversal(net, [0.25, 0.5], [1.0, 0.0], 4)
        np.testing.assert_array_equal(latents[:, 0], [0.25, 0.5, 0.75, 0.0])
        np.testing.assert_array_equal(latents[:, 1], 0.5)
        np.testing.assert_array_equal(decoded, net.predict_mean(latents))

    def test_full_period_returns_to_start(self):
        net = make_decoder(seed=3, widths=(8, 4))
        start, direction = np.array([0.125, 0.375]), np.array([1.0, 1.0])
        _, decoded = traversal(net, start, direction, 8)
        np.testing.assert_array_equal(net.predict_mean((start + direction)[None]), decoded[:1])

    def test_single_step(self):
        latents, _ = traversal(make_decoder(widths=(4, 3)), [1.25, -0.5], [0.0, 1.0], 1)
        np.testing.assert_array_equal(latents, [[0.25, 0.5]])

    def test_constant_decoder_frames_identical(self):
        _, decoded = traversal(constant_decoder([0.1, 0.2, 0.3]), [0.0, 0.0], [0.3, 0.7], 6)
        np.testing.assert_array_equal(decoded, np.tile(decoded[0], (6, 1)))

    def test_invalid_arguments(self):
        with self.assertRaises(ConfigError):
            traversal(make_decoder(widths=(4, 3)), [0.0, 0.0], [0.0, 0.0], 4)
        with self.assertRaises(ConfigError):
            traversal(make_decoder(widths=(4, 3)), [0.0, 0.0], [1.0, 0.0], 0)

    def test_latent_grid(self):
        latents, decoded = latent_grid(make_decoder(widths=(4, 3)), 3)
        self.assertEqual(latents.shape, (9, 2))
        self.assertEqual(decoded.shape, (9, 3))
        np.testing.assert_array_equal(latents[0], [0.0, 0.0])
        np.testing.assert_allclose(latents[1], [0.0, 1.0 / 3.0])
