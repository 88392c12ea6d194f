"""
隐空间分析

聚合后验密度、环面上的加权 mean-shift 聚类、解码器 Jacobian 的 Frobenius 范数场及其平滑、
线性遍历、全隐空间网格解码，以及基于密度比的测地线（Dijkstra）。
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from qlvm.exceptions import ConfigError, NumericalError
from qlvm.services.lattice import PointSet
from qlvm.services.net import Network
from qlvm.services.qlvm_service import PosteriorTable
from qlvm.utils import wrap_unit, wrapped_delta

logger = logging.getLogger(__name__)

# 稠密核计算的行块大小
BLOCK_ROWS = 256

MEAN_SHIFT_TOL = 1e-6
MEAN_SHIFT_MAX_ITER = 500
GEODESIC_NEIGHBORS = 8

PointLike = Union[int, np.integer, Sequence[float], np.ndarray]


@dataclass
class DensityField:
    """评估点集上的聚合后验权重，和为 1"""
    points: PointSet
    weights: np.ndarray

    @property
    def m(self) -> int:
        return self.points.m


@dataclass
class ClusterResult:
    centroids: np.ndarray
    densities: np.ndarray
    modes: np.ndarray
    converged: np.ndarray
    assignments: np.ndarray
    bandwidth: float

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)


@dataclass
class JacobianField:
    points: np.ndarray
    norms: np.ndarray
    smoothed: Optional[np.ndarray] = None
    bandwidth: Optional[float] = None

    def smooth(self, bandwidth: float) -> 'JacobianField':
        return JacobianField(self.points, self.norms, smooth_field(self.points, self.norms, bandwidth), bandwidth)


@dataclass
class GeodesicPath:
    indices: np.ndarray
    points: np.ndarray
    edge_costs: np.ndarray
    cost: float

    @property
    def n_points(self) -> int:
        return len(self.indices)


def aggregate_posterior(tables: Union[PosteriorTable, Iterable[PosteriorTable]]) -> DensityField:
    """所有数据点后验行的平均

    Args:
        tables: 一个后验表，或逐块产生的后验表序列（可以是生成器），必须共享同一评估点集

    Returns:
        DensityField: 聚合密度
    """
    if isinstance(tables, PosteriorTable):
        tables = [tables]

    reference, total, count = None, None, 0
    for table in tables:
        if reference is None:
            reference = table.points
            total = np.zeros(reference.m)
        elif (table.points.points.shape != reference.points.shape
              or not np.array_equal(table.points.points, reference.points)):
            raise ConfigError("posterior tables were computed on different evaluation point sets")
        total += table.weights.sum(axis=0)
        count += table.weights.shape[0]
    if count == 0:
        raise ConfigError("aggregate_posterior needs at least one posterior row")
    return DensityField(points=reference, weights=total / count)


def toroidal_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """单位环面上的欧氏距离，支持广播"""
    delta = wrapped_delta(a, b)
    return np.sqrt(np.sum(delta * delta, axis=-1))


def _kernel_sums(points: np.ndarray, weights: np.ndarray, iterates: np.ndarray, bandwidth: float, cutoff: float):
    """对每个迭代点返回 (Σ Kρ·Δ, Σ Kρ)，Δ 为以迭代点为中心展开的局部坐标"""
    delta = wrapped_delta(points[None, :, :], iterates[:, None, :])
    distance_sq = np.sum(delta * delta, axis=2)
    kernel = np.exp(-distance_sq / (bandwidth * bandwidth)) * weights[None, :]
    kernel[distance_sq > (cutoff * bandwidth) ** 2] = 0.0
    return np.einsum('sm,smd->sd', kernel, delta), kernel.sum(axis=1)


def mean_shift_step(field: DensityField, iterates: np.ndarray, bandwidth: float,
                    cutoff: float = 3.0) -> Tuple[np.ndarray, np.ndarray]:
    """一次加权 mean-shift 更新，返回 (新位置, 核密度)；邻域为空的行返回 NaN"""
    iterates = np.atleast_2d(np.asarray(iterates, dtype=np.float64))
    shift, density = _kernel_sums(field.points.points, field.weights, iterates, bandwidth, cutoff)
    moved = np.full_like(iterates, np.nan)
    nonempty = density > 0.0
    moved[nonempty] = wrap_unit(iterates[nonempty] + shift[nonempty] / density[nonempty, None])
    return moved, density


def mean_shift(field: DensityField, bandwidth: float, seeds: Optional[np.ndarray] = None,
               tol: float = MEAN_SHIFT_TOL, max_iter: int = MEAN_SHIFT_MAX_ITER, cutoff: float = 3.0,
               min_relative_density: float = 1e-3) -> ClusterResult:
    """环面上以聚合密度加权的 mean-shift

    核为 K(u) = exp(-u²)，u = 距离/h，超过 cutoff·h 的点不参与。收敛后按核密度从高到低合并
    距离小于 h 的种子，再去掉密度低于最强簇 min_relative_density 倍的簇（鞍点）。

    Args:
        field: 聚合密度
        bandwidth: 带宽 h
        seeds: 初始点，默认为评估点集本身
        tol: 步长收敛阈值
        max_iter: 最大迭代次数
        cutoff: 邻域截断半径（以 h 为单位）
        min_relative_density: 保留簇的最小相对密度

    Returns:
        ClusterResult: 簇中心与每个种子的归属（未收敛为 -1）
    """
    if not bandwidth > 0:
        raise ConfigError(f"mean-shift bandwidth must be positive, got {bandwidth}")
    seeds = field.points.points.copy() if seeds is None else wrap_unit(np.atleast_2d(seeds))
    n_seeds = seeds.shape[0]
    modes = np.full_like(seeds, np.nan)
    mode_density = np.zeros(n_seeds)
    converged = np.zeros(n_seeds, dtype=bool)

    for start in range(0, n_seeds, BLOCK_ROWS):
        block = slice(start, min(start + BLOCK_ROWS, n_seeds))
        current = seeds[block].copy()
        active = np.ones(current.shape[0], dtype=bool)
        done = np.zeros(current.shape[0], dtype=bool)
        for _ in range(max_iter):
            if not active.any():
                break
            moved, _ = mean_shift_step(field, current[active], bandwidth, cutoff)
            empty = np.isnan(moved[:, 0])
            step = toroidal_distance(np.nan_to_num(moved), current[active])
            rows = np.flatnonzero(active)
            active[rows[empty]] = False
            settled = ~empty & (step < tol)
            current[rows[~empty]] = moved[~empty]
            done[rows[settled]] = True
            active[rows[settled]] = False
        modes[block] = current
        converged[block] = done

    settled = np.flatnonzero(converged)
    for start in range(0, len(settled), BLOCK_ROWS):
        rows = settled[start:start + BLOCK_ROWS]
        _, mode_density[rows] = _kernel_sums(field.points.points, field.weights, modes[rows], bandwidth, cutoff)
    logger.debug(f"mean-shift: {converged.sum()}/{n_seeds} 个种子收敛 (h={bandwidth})")

    centroids: List[np.ndarray] = []
    densities: List[float] = []
    assignments = np.full(n_seeds, -1, dtype=np.int64)
    for seed_index in np.argsort(-mode_density, kind='stable'):
        if not converged[seed_index]:
            continue
        if centroids:
            distances = toroidal_distance(np.asarray(centroids), modes[seed_index])
            nearest = int(np.argmin(distances))
            if distances[nearest] < bandwidth:
                assignments[seed_index] = nearest
                continue
        assignments[seed_index] = len(centroids)
        centroids.append(modes[seed_index])
        densities.append(mode_density[seed_index])

    centroids = np.asarray(centroids).reshape(-1, seeds.shape[1])
    densities = np.asarray(densities)
    if len(densities):
        keep = densities >= min_relative_density * densities.max()
        new_index = np.cumsum(keep) - 1
        for dropped in np.flatnonzero(~keep):
            new_index[dropped] = np.argmin(toroidal_distance(centroids[keep], centroids[dropped]))
        assigned = assignments >= 0
        assignments[assigned] = new_index[assignments[assigned]]
        centroids, densities = centroids[keep], densities[keep]

    logger.info(f"mean-shift 得到 {len(centroids)} 个簇 (h={bandwidth})")
    return ClusterResult(centroids=centroids, densities=densities, modes=modes, converged=converged,
                         assignments=assignments, bandwidth=float(bandwidth))


def _as_points(points: Union[PointSet, np.ndarray]) -> np.ndarray:
    values = points.points if isinstance(points, PointSet) else points
    return np.atleast_2d(np.asarray(values, dtype=np.float64))


def jacobian_frobenius(net: Network, eval_points: Union[PointSet, np.ndarray], step: float = 1e-4) -> JacobianField:
    """对解码均值（bernoulli 为 sigmoid 之后）做中心差分，逐点求 Jacobian 的 Frobenius 范数"""
    if not 0.0 < step <= 0.01:
        raise ConfigError(f"finite-difference step must lie in (0, 0.01], got {step}")
    z = _as_points(eval_points)
    squared = np.zeros(z.shape[0])
    for k in range(z.shape[1]):
        offset = np.zeros(z.shape[1])
        offset[k] = step
        column = (net.predict_mean(z + offset) - net.predict_mean(z - offset)) / (2.0 * step)
        squared += np.sum(column * column, axis=1)
    return JacobianField(points=z, norms=np.sqrt(squared))


def smooth_field(points: Union[PointSet, np.ndarray], values: np.ndarray, bandwidth: float = 0.02) -> np.ndarray:
    """环面高斯核加权平均 exp(-d²/(2·bw²))，每个输出点的权重归一化"""
    if not bandwidth > 0:
        raise ConfigError(f"smoothing bandwidth must be positive, got {bandwidth}")
    z = _as_points(points)
    values = np.asarray(values, dtype=np.float64)
    smoothed = np.empty_like(values)
    for start in range(0, z.shape[0], BLOCK_ROWS):
        block = z[start:start + BLOCK_ROWS]
        delta = wrapped_delta(z[None, :, :], block[:, None, :])
        kernel = np.exp(-np.sum(delta * delta, axis=2) / (2.0 * bandwidth * bandwidth))
        smoothed[start:start + BLOCK_ROWS] = kernel @ values / kernel.sum(axis=1)
    return smoothed


def density_ratio_graph(field: DensityField, epsilon: float = 1e-12,
                        n_neighbors: int = GEODESIC_NEIGHBORS) -> csr_matrix:
    """有向图：每个点与其 n_neighbors 个最近环面邻居相连（对称化），
    边 u→v 的代价为 距离(u, v)·ρ(u)/max(ρ(v), ε)"""
    if not epsilon > 0:
        raise ConfigError(f"density floor must be positive, got {epsilon}")
    z = field.points.points
    m = z.shape[0]
    k = min(n_neighbors, m - 1)
    if k < 1:
        raise ConfigError("geodesic graph needs at least two lattice points")

    _, neighbors = cKDTree(z, boxsize=1.0).query(z, k=k + 1)
    sources = np.repeat(np.arange(m), k)
    targets = neighbors[:, 1:].ravel()
    pairs = np.unique(np.concatenate([np.stack([sources, targets], axis=1),
                                      np.stack([targets, sources], axis=1)]), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    u, v = pairs[:, 0], pairs[:, 1]

    rho = field.weights
    costs = toroidal_distance(z[u], z[v]) * rho[u] / np.maximum(rho[v], epsilon)
    # csgraph 把显式 0 当作无边
    costs = np.maximum(costs, np.finfo(np.float64).tiny)
    return csr_matrix((costs, (u, v)), shape=(m, m))


def nearest_point_index(field: DensityField, point: PointLike) -> int:
    """整数视为格点下标，坐标则吸附到最近的格点"""
    if isinstance(point, (int, np.integer)):
        if not 0 <= point < field.m:
            raise ConfigError(f"lattice index {point} outside [0, {field.m})")
        return int(point)
    coordinates = wrap_unit(np.asarray(point, dtype=np.float64).reshape(1, -1))
    _, index = cKDTree(field.points.points, boxsize=1.0).query(coordinates, k=1)
    return int(index[0])


def geodesic(field: DensityField, source: PointLike, destination: PointLike,
             epsilon: float = 1e-12, n_neighbors: int = GEODESIC_NEIGHBORS) -> GeodesicPath:
    """密度比测地线：在 density_ratio_graph 上用 Dijkstra 求最小代价路径"""
    start = nearest_point_index(field, source)
    end = nearest_point_index(field, destination)
    z = field.points.points
    if start == end:
        return GeodesicPath(indices=np.array([start]), points=z[[start]], edge_costs=np.zeros(0), cost=0.0)

    graph = density_ratio_graph(field, epsilon, n_neighbors)
    distances, predecessors = dijkstra(graph, directed=True, indices=start, return_predecessors=True)
    if not np.isfinite(distances[end]):
        raise NumericalError("geodesic graph is disconnected", {'source': start, 'destination': end})

    path = [end]
    while path[-1] != start:
        path.append(int(predecessors[path[-1]]))
    indices = np.asarray(path[::-1], dtype=np.int64)
    edge_costs = np.asarray(graph[indices[:-1], indices[1:]]).ravel()
    logger.info(f"测地线 {start} -> {end}: {len(indices)} 个点, 代价 {distances[end]:.6g}")
    return GeodesicPath(indices=indices, points=z[indices], edge_costs=edge_costs, cost=float(distances[end]))


def traversal(net: Network, start: Sequence[float], direction: Sequence[float],
              n_steps: int) -> Tuple[np.ndarray, np.ndarray]:
    """沿 start + t·direction (mod 1) 解码，t 在一个周期内等距取 n_steps 个值"""
    start = np.asarray(start, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if not np.any(direction):
        raise ConfigError("traversal direction must be nonzero")
    if n_steps < 1:
        raise ConfigError(f"traversal needs n_steps >= 1, got {n_steps}")
    t = np.arange(n_steps, dtype=np.float64) / n_steps
    latents = wrap_unit(start[None, :] + t[:, None] * direction[None, :])
    return latents, net.predict_mean(latents)


def latent_grid(net: Network, resolution: int) -> Tuple[np.ndarray, np.ndarray]:
    """在覆盖整个单位格的 resolution^d 网格上解码（第一维变化最慢）"""
    if resolution < 1:
        raise ConfigError(f"grid resolution must be >= 1, got {resolution}")
    axis = np.arange(resolution, dtype=np.float64) / resolution
    mesh = np.meshgrid(*([axis] * net.spec.latent_dim), indexing='ij')
    latents = np.stack([grid.ravel() for grid in mesh], axis=1)
    return latents, net.predict_mean(latents)
