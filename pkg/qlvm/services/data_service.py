"""
数据服务

IDX 图像/标签读取与写出、原始矩阵读取、合成高斯斑点数据集、训练/测试划分，
以及模型检查点的二进制持久化。
"""
import gzip
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from qlvm.exceptions import (
    CheckpointChecksumError, CheckpointFormatError, CheckpointTruncatedError, CheckpointVersionError,
    ConfigError, DataFormatError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError,
)
from qlvm.services.net import AdamState, Network, NetworkSpec
from qlvm.utils import parse_key_value_text, render_key_value_text

logger = logging.getLogger(__name__)

VALUE_KINDS = ('binary', 'real')

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b'QLVMCKPT'
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct('<8sIQ')
_CRC = struct.Struct('<I')
_RECORD_HEAD = struct.Struct('<H')
_RECORD_BODY = struct.Struct('<cQ')

PathLike = Union[str, Path]


@dataclass
class Dataset:
    """n x D 的样本矩阵

    binary 表示取值在 [0, 1] 的像素强度（作为 Bernoulli 目标），real 表示任意实数。
    """
    X: np.ndarray
    value_kind: str = 'binary'
    image_shape: Optional[Tuple[int, int]] = None
    name: str = 'dataset'
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if self.value_kind not in VALUE_KINDS:
            raise ConfigError(f"unknown value kind {self.value_kind!r}")
        if self.value_kind == 'binary' and self.X.size and (self.X.min() < 0.0 or self.X.max() > 1.0):
            raise DataFormatError(f"{self.name}: binary-pixel values must lie in [0, 1]")
        if self.image_shape is not None:
            self.image_shape = tuple(int(v) for v in self.image_shape)
            if self.image_shape[0] * self.image_shape[1] != self.X.shape[1]:
                raise DataFormatError(f"{self.name}: image shape {self.image_shape} does not match D={self.X.shape[1]}")
        if self.labels is not None and len(self.labels) != self.X.shape[0]:
            raise DataFormatError(f"{self.name}: {len(self.labels)} labels for {self.X.shape[0]} samples")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> 'Dataset':
        labels = self.labels[indices] if self.labels is not None else None
        return Dataset(self.X[indices], self.value_kind, self.image_shape, name or self.name, labels)

    def to_uint8_images(self) -> np.ndarray:
        """还原为 IDX 的 uint8 像素（需要 image_shape）"""
        if self.image_shape is None:
            raise DataFormatError(f"{self.name}: no image shape")
        pixels = np.rint(self.X * 255.0).astype(np.uint8)
        return pixels.reshape((self.n,) + self.image_shape)


# ---- IDX ----

def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'rb') as handle:
        return handle.read()


def _parse_idx(data: bytes, expected_magic: int, path: PathLike) -> np.ndarray:
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    magic = struct.unpack('>I', data[:4])[0]
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")

    n_dims = magic & 0xFF
    header_size = 4 + 4 * n_dims
    if len(data) < header_size:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(f'>{n_dims}I', data[4:header_size])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = data[header_size:]
    if len(payload) < expected:
        raise IdxTruncatedError(f"{path}: expected {expected} data bytes, found {len(payload)}")
    if len(payload) > expected:
        logger.warning(f"{path}: 忽略文件末尾多余的 {len(payload) - expected} 字节")
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims)


def load_idx(images_path: PathLike, labels_path: Optional[PathLike] = None) -> Dataset:
    """读取 IDX 图像（及可选标签），像素除以 255 缩放到 [0, 1]

    Args:
        images_path: 魔数 0x00000803 的图像文件（可 gzip 压缩）
        labels_path: 魔数 0x00000801 的标签文件

    Returns:
        Dataset: binary 类型、带 image_shape 的数据集
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    n, rows, cols = images.shape
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path).astype(np.int64)
        if len(labels) != n:
            raise IdxCountMismatchError(f"{len(labels)} labels for {n} images")

    logger.info(f"读取 IDX 数据 {images_path}: n={n}, 图像 {rows}x{cols}")
    X = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(X, 'binary', (rows, cols), Path(images_path).name, labels)


def write_idx(path: PathLike, array: np.ndarray):
    """把 uint8 数组写成 IDX（三维为图像，一维为标签）"""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack('>I', magic) + struct.pack(f'>{array.ndim}I', *array.shape)
    with open(path, 'wb') as handle:
        handle.write(header)
        handle.write(array.tobytes())


def load_matrix(path: PathLike, value_kind: str = 'real',
                image_shape: Optional[Tuple[int, int]] = None) -> Dataset:
    """读取 .npy 或无表头 .csv 原始矩阵（每行一个样本）"""
    path = Path(path)
    if path.suffix == '.npy':
        X = np.load(path, allow_pickle=False)
    elif path.suffix == '.csv':
        X = pd.read_csv(path, header=None, float_precision='round_trip').to_numpy(dtype=np.float64)
    else:
        raise DataFormatError(f"{path}: unsupported matrix format (expected .npy or .csv)")
    if X.ndim != 2:
        raise DataFormatError(f"{path}: expected a 2-D matrix, got shape {X.shape}")
    return Dataset(X, value_kind, image_shape, path.name)


# ---- 合成数据 ----

def mixture_centers(n_clusters: int, side: int) -> np.ndarray:
    """k 个簇中心均匀分布在半径 0.3*side 的圆上，返回 (x, y) 像素坐标"""
    angles = 2.0 * np.pi * np.arange(n_clusters) / n_clusters
    radius = 0.3 * side
    return side / 2.0 + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def synth_mixture(seed: int, n_clusters: int, n: int, side: int = 16,
                  sigma: Optional[float] = None, jitter: Optional[float] = None) -> Dataset:
    """生成每张图含一个高斯斑点的 side x side 图像

    斑点中心取自 k 个固定簇中心之一，再加上 [-jitter, jitter] 内的均匀抖动。

    Args:
        seed: 随机种子
        n_clusters: 簇数 k
        n: 样本数
        side: 图像边长（>= 8）
        sigma: 斑点宽度，默认 side/16
        jitter: 中心抖动幅度，默认 side/(8k)

    Returns:
        Dataset: 带簇标签的 binary 数据集
    """
    if n_clusters < 1:
        raise ConfigError(f"synth_mixture needs at least one cluster, got {n_clusters}")
    if side < 8:
        raise ConfigError(f"synth_mixture image side must be >= 8, got {side}")
    sigma = side / 16.0 if sigma is None else float(sigma)
    jitter = side / (8.0 * n_clusters) if jitter is None else float(jitter)
    if sigma <= 0 or jitter < 0:
        raise ConfigError(f"invalid blob sigma={sigma} or jitter={jitter}")

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_clusters, size=n)
    offsets = rng.uniform(-jitter, jitter, size=(n, 2))
    blob = mixture_centers(n_clusters, side)[labels] + offsets

    coords = np.arange(side, dtype=np.float64) + 0.5
    dx = coords[None, None, :] - blob[:, 0, None, None]
    dy = coords[None, :, None] - blob[:, 1, None, None]
    images = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))

    logger.info(f"生成合成数据: k={n_clusters}, n={n}, {side}x{side}, sigma={sigma}, jitter={jitter}")
    return Dataset(images.reshape(n, side * side), 'binary', (side, side), 'synth_mixture', labels.astype(np.int64))


def split(dataset: Dataset, fraction: float = 0.8, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """确定性的随机划分，fraction 为训练集比例"""
    if dataset.n < 2:
        raise ConfigError(f"cannot split a dataset with {dataset.n} samples")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(dataset.n)
    n_train = min(max(int(round(fraction * dataset.n)), 1), dataset.n - 1)
    return (dataset.subset(order[:n_train], f"{dataset.name}-train"),
            dataset.subset(order[n_train:], f"{dataset.name}-test"))


# ---- 检查点 ----

@dataclass
class Checkpoint:
    """模型状态：若干命名网络、各自的 Adam 状态、配置、epoch 计数和随机数状态"""
    kind: str
    networks: Dict[str, Network]
    optimizers: Dict[str, AdamState] = field(default_factory=dict)
    config: Dict[str, str] = field(default_factory=dict)
    epoch: int = 0
    rng_state: Optional[dict] = None
    version: int = CHECKPOINT_VERSION

    def restore_rng(self) -> Optional[np.random.Generator]:
        if self.rng_state is None:
            return None
        bit_generator = getattr(np.random, self.rng_state['bit_generator'])()
        bit_generator.state = self.rng_state
        return np.random.Generator(bit_generator)


def _rng_state_to_text(state: dict) -> Dict[str, str]:
    if state['bit_generator'] != 'PCG64':
        raise CheckpointFormatError(f"unsupported bit generator {state['bit_generator']}")
    return {
        'rng.bit_generator': state['bit_generator'],
        'rng.state': str(state['state']['state']),
        'rng.inc': str(state['state']['inc']),
        'rng.has_uint32': str(state['has_uint32']),
        'rng.uinteger': str(state['uinteger']),
    }


def _rng_state_from_text(meta: Dict[str, str]) -> Optional[dict]:
    if 'rng.bit_generator' not in meta:
        return None
    return {
        'bit_generator': meta['rng.bit_generator'],
        'state': {'state': int(meta['rng.state']), 'inc': int(meta['rng.inc'])},
        'has_uint32': int(meta['rng.has_uint32']),
        'uinteger': int(meta['rng.uinteger']),
    }


def _encode_record(name: str, payload: Union[str, np.ndarray]) -> bytes:
    encoded_name = name.encode('utf-8')
    if isinstance(payload, str):
        data = payload.encode('utf-8')
        body = _RECORD_BODY.pack(b'T', len(data)) + data
    else:
        values = np.ascontiguousarray(payload, dtype='<f8')
        body = _RECORD_BODY.pack(b'F', values.size) + values.tobytes()
    return _RECORD_HEAD.pack(len(encoded_name)) + encoded_name + body


def _decode_records(body: bytes) -> Dict[str, Union[str, np.ndarray]]:
    records, offset = {}, 0
    try:
        while offset < len(body):
            (name_length,) = _RECORD_HEAD.unpack_from(body, offset)
            offset += _RECORD_HEAD.size
            name = body[offset:offset + name_length].decode('utf-8')
            offset += name_length
            kind, length = _RECORD_BODY.unpack_from(body, offset)
            offset += _RECORD_BODY.size
            if kind == b'T':
                records[name] = body[offset:offset + length].decode('utf-8')
                offset += length
            elif kind == b'F':
                records[name] = np.frombuffer(body, dtype='<f8', count=length, offset=offset).astype(np.float64)
                offset += 8 * length
            else:
                raise CheckpointFormatError(f"unknown record type {kind!r} for {name!r}")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint body: {exc}") from exc
    if offset != len(body):
        raise CheckpointFormatError("checkpoint records overrun the declared body length")
    return records


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    meta = {
        'kind': checkpoint.kind,
        'epoch': str(checkpoint.epoch),
        'networks': ','.join(sorted(checkpoint.networks)),
    }
    for name, state in sorted(checkpoint.optimizers.items()):
        meta.update({
            f'{name}.adam.t': str(state.t),
            f'{name}.adam.lr': repr(float(state.lr)),
            f'{name}.adam.beta1': repr(float(state.beta1)),
            f'{name}.adam.beta2': repr(float(state.beta2)),
            f'{name}.adam.eps': repr(float(state.eps)),
        })
    if checkpoint.rng_state is not None:
        meta.update(_rng_state_to_text(checkpoint.rng_state))

    body = [_encode_record('meta', render_key_value_text(meta)),
            _encode_record('config', render_key_value_text(checkpoint.config))]
    for name in sorted(checkpoint.networks):
        net = checkpoint.networks[name]
        body.append(_encode_record(f'{name}.spec', render_key_value_text(net.spec.to_dict())))
        body.append(_encode_record(f'{name}.params', net.params))
        state = checkpoint.optimizers.get(name)
        if state is not None:
            body.append(_encode_record(f'{name}.adam.m', state.m))
            body.append(_encode_record(f'{name}.adam.v', state.v))
    body = b''.join(body)

    data = _HEADER.pack(CHECKPOINT_MAGIC, checkpoint.version, len(body)) + body
    return data + _CRC.pack(zlib.crc32(data) & 0xFFFFFFFF)


def decode_checkpoint(data: bytes, source: str = '<bytes>') -> Checkpoint:
    if len(data) < len(CHECKPOINT_MAGIC):
        if CHECKPOINT_MAGIC.startswith(data):
            raise CheckpointTruncatedError(f"{source}: truncated before the header")
        raise CheckpointFormatError(f"{source}: not a checkpoint file")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {data[:8]!r}")
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError(f"{source}: truncated header")

    _, version, body_length = _HEADER.unpack_from(data, 0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    total = _HEADER.size + body_length + _CRC.size
    if len(data) < total:
        raise CheckpointTruncatedError(f"{source}: {len(data)} bytes, header declares {total}")
    if len(data) > total:
        raise CheckpointFormatError(f"{source}: {len(data) - total} unexpected trailing bytes")

    (stored_crc,) = _CRC.unpack_from(data, total - _CRC.size)
    if zlib.crc32(data[:total - _CRC.size]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumError(f"{source}: CRC32 mismatch")

    records = _decode_records(data[_HEADER.size:total - _CRC.size])
    try:
        meta = parse_key_value_text(records['meta'])
        config = parse_key_value_text(records['config'])
        networks, optimizers = {}, {}
        for name in filter(None, meta['networks'].split(',')):
            spec = NetworkSpec.from_dict(parse_key_value_text(records[f'{name}.spec']))
            networks[name] = Network(spec, records[f'{name}.params'].copy())
            if f'{name}.adam.t' in meta:
                optimizers[name] = AdamState(
                    lr=float(meta[f'{name}.adam.lr']), beta1=float(meta[f'{name}.adam.beta1']),
                    beta2=float(meta[f'{name}.adam.beta2']), eps=float(meta[f'{name}.adam.eps']),
                    m=records[f'{name}.adam.m'].copy(), v=records[f'{name}.adam.v'].copy(),
                    t=int(meta[f'{name}.adam.t']),
                )
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"{source}: incomplete checkpoint ({exc})") from exc

    return Checkpoint(kind=meta['kind'], networks=networks, optimizers=optimizers, config=config,
                      epoch=int(meta['epoch']), rng_state=_rng_state_from_text(meta), version=version)


def save_checkpoint(path: PathLike, checkpoint: Checkpoint):
    """写检查点；先写临时文件再原子替换，失败时删掉临时文件。并发写由输出目录锁排除"""
    path = Path(path)
    data = encode_checkpoint(checkpoint)
    temporary = path.with_name(path.name + '.partial')
    try:
        with open(temporary, 'wb') as handle:
            handle.write(data)
        os.replace(temporary, path)
    except OSError:
        temporary.unlink(missing_ok=True)
        raise
    logger.info(f"检查点已保存: {path} ({len(data)} 字节, epoch {checkpoint.epoch})")


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    with open(path, 'rb') as handle:
        data = handle.read()
    return decode_checkpoint(data, str(path))
