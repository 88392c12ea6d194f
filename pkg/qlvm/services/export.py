"""
产物导出

CSV 统一用 pandas 写出（'.' 小数点、',' 分隔、'\n' 换行、17 位有效数字），
二维场经最近邻分箱后写成 8 位 PGM，缩放范围记录在同名 .scale.txt 中。
"""
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from qlvm.exceptions import ConfigError
from qlvm.utils import format_float, render_key_value_text

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 256

PathLike = Union[str, Path]


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    logger.debug(f"写出 {path} ({len(frame)} 行)")
    return path


def point_frame(points: np.ndarray, **columns) -> pd.DataFrame:
    """index, z_0..z_{d-1}, 以及附加列"""
    data = {'index': np.arange(points.shape[0])}
    data.update({f'z_{k}': points[:, k] for k in range(points.shape[1])})
    data.update(columns)
    return pd.DataFrame(data)


def rasterize(points: np.ndarray, values: np.ndarray, resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """把二维环面上的散点值按最近邻分箱到 resolution x resolution 网格

    行对应第二个坐标，列对应第一个坐标，像素中心为 (i + 0.5)/resolution。
    """
    if points.shape[1] != 2:
        raise ConfigError(f"rasters need a two-dimensional latent space, got d={points.shape[1]}")
    if resolution < 1:
        raise ConfigError(f"raster resolution must be >= 1, got {resolution}")
    centers = (np.arange(resolution) + 0.5) / resolution
    column, row = np.meshgrid(centers, centers)
    pixels = np.stack([column.ravel(), row.ravel()], axis=1)
    _, nearest = cKDTree(points, boxsize=1.0).query(pixels, k=1)
    return np.asarray(values)[nearest].reshape(resolution, resolution)


def write_pgm(path: PathLike, image: np.ndarray, value_range: Optional[Tuple[float, float]] = None) -> Path:
    """写 P5 灰度图

    Args:
        path: 输出路径
        image: 二维数组（行优先）
        value_range: 固定的 (最小, 最大)；None 时按本文件的最小/最大值缩放

    Returns:
        Path: 写出的路径
    """
    path = Path(path)
    image = np.asarray(image, dtype=np.float64)
    low, high = value_range if value_range is not None else (float(np.min(image)), float(np.max(image)))
    span = high - low
    if span > 0:
        scaled = np.rint(255.0 * (np.clip(image, low, high) - low) / span)
    else:
        scaled = np.zeros_like(image)
    height, width = image.shape
    with open(path, 'wb') as handle:
        handle.write(f"P5\n{width} {height}\n255\n".encode('ascii'))
        handle.write(scaled.astype(np.uint8).tobytes())

    sidecar = path.with_suffix('.scale.txt')
    sidecar.write_text(render_key_value_text({
        'min': format_float(low), 'max': format_float(high), 'width': width, 'height': height,
    }), encoding='utf-8')
    return path


def write_field_pgm(path: PathLike, points: np.ndarray, values: np.ndarray,
                    resolution: int = DEFAULT_RESOLUTION) -> Optional[Path]:
    """二维隐空间时写出场的栅格图，其余维度跳过"""
    if points.shape[1] != 2:
        logger.info(f"隐空间维度 {points.shape[1]} 不是 2，跳过 {path}")
        return None
    return write_pgm(path, rasterize(points, values, resolution))


def tile_images(images: np.ndarray, image_shape: Sequence[int], columns: Optional[int] = None,
                gap: int = 1) -> np.ndarray:
    """把 n 张展平的图像拼成网格（相邻图像之间留 gap 个像素的空白）"""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    height, width = image_shape
    n = images.shape[0]
    columns = columns or max(n, 1)
    rows = max(-(-n // columns), 1)
    canvas = np.zeros((rows * (height + gap) - gap, columns * (width + gap) - gap))
    for index in range(n):
        top = (index // columns) * (height + gap)
        left = (index % columns) * (width + gap)
        canvas[top:top + height, left:left + width] = images[index].reshape(height, width)
    return canvas


def write_image_strip(path: PathLike, images: np.ndarray, image_shape: Optional[Sequence[int]],
                      columns: Optional[int] = None, value_range: Optional[Tuple[float, float]] = (0.0, 1.0)
                      ) -> Optional[Path]:
    """解码图像拼成条带/网格写成 PGM；数据没有图像形状时跳过"""
    if image_shape is None:
        logger.info(f"数据没有图像形状，跳过 {path}")
        return None
    return write_pgm(path, tile_images(images, image_shape, columns), value_range)
