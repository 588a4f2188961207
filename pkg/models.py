"""
Domain Models for the Dynamic Semantic Mapper
==============================================
This module contains the value types shared by every other module.
The models are organized into:
- Errors (MappingError and its subclasses)
- Label universe (ClassRegistry)
- Measurements (PointSample, TrainingFrame)
- Voxels (VoxelKey, VoxelState, MapConfig, VoxelTable)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from kernels import KernelParams

logger = logging.getLogger(__name__)

# Keys are packed into one int64: 21 bits per axis.
KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_MIN = -KEY_OFFSET
KEY_MAX = KEY_OFFSET - 1
_KEY_MASK = (1 << KEY_BITS) - 1

# Smallest value an alpha component may take after decay.
ALPHA_MIN = np.finfo(np.float64).tiny


# ---------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------
class MappingError(ValueError):
    """Base class for every error raised by the mapping engine."""


class InvalidFrameError(MappingError):
    """A frame violates its own invariants (empty, non-finite, bad shapes)."""


class KeyOverflowError(MappingError, OverflowError):
    """A voxel key falls outside the representable grid."""


class TimeOrderError(MappingError):
    """Frames arrived with a non-increasing time index."""


class RegistryMismatchError(MappingError):
    """Labels or class counts disagree with the attached ClassRegistry."""


class EgoCompensationError(MappingError):
    """Ego-motion compensation is undefined for the frame."""


# ---------------------------------------------------------------------
# Label universe
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class ClassRegistry:
    """
    K semantic classes, the designated free class and the set of moving classes.
    """
    num_classes: int
    free_class: int = 0
    dynamic_classes: frozenset = field(default_factory=frozenset)
    names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'dynamic_classes', frozenset(int(q) for q in self.dynamic_classes))
        if self.num_classes < 2:
            raise RegistryMismatchError(f"need at least 2 classes, got {self.num_classes}")
        if not 0 <= self.free_class < self.num_classes:
            raise RegistryMismatchError(f"free class {self.free_class} outside [0, {self.num_classes})")
        if self.free_class in self.dynamic_classes:
            raise RegistryMismatchError('the free class cannot be dynamic')
        bad = [q for q in self.dynamic_classes if not 0 <= q < self.num_classes]
        if bad:
            raise RegistryMismatchError(f"dynamic classes {sorted(bad)} outside [0, {self.num_classes})")
        if self.names and len(self.names) != self.num_classes:
            raise RegistryMismatchError('class names must match the number of classes')

    @property
    def dynamic_mask(self):
        """Boolean K-vector, True for moving classes."""
        mask = np.zeros(self.num_classes, dtype=bool)
        mask[sorted(self.dynamic_classes)] = True
        return mask

    @property
    def static_mask(self):
        """Boolean K-vector, True for classes that are neither moving nor free."""
        mask = ~self.dynamic_mask
        mask[self.free_class] = False
        return mask

    def is_dynamic(self, label):
        return int(label) in self.dynamic_classes

    def name_of(self, label):
        if self.names:
            return self.names[label]
        return str(label)

    def check_labels(self, labels):
        """Raise RegistryMismatchError when any label is outside [0, K)."""
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise RegistryMismatchError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )


# ---------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------
class PointSample(NamedTuple):
    """One labelled point with its displacement over one scan interval."""
    position: tuple
    label: int
    flow: tuple = (0.0, 0.0, 0.0)


def _as_vec3(value, name):
    vec = np.asarray(value, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(vec)):
        raise InvalidFrameError(f"{name} must be finite")
    return vec


def _readonly(array):
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TrainingFrame:
    """
    One timestamped scan stored column-wise: positions (N,3), labels (N,), flows (N,3).
    """
    time_index: int
    sensor_origin: np.ndarray
    positions: np.ndarray
    labels: np.ndarray
    flows: np.ndarray

    def __post_init__(self):
        if int(self.time_index) < 0:
            raise InvalidFrameError(f"time index must be non-negative, got {self.time_index}")
        object.__setattr__(self, 'time_index', int(self.time_index))
        object.__setattr__(self, 'sensor_origin', _readonly(_as_vec3(self.sensor_origin, 'sensor origin')))
        positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        flows = np.array(self.flows, dtype=np.float64).reshape(-1, 3)
        if not (len(positions) == len(labels) == len(flows)):
            raise InvalidFrameError(
                f"column lengths differ: {len(positions)} positions, {len(labels)} labels, {len(flows)} flows"
            )
        if not np.all(np.isfinite(positions)):
            raise InvalidFrameError('point positions must be finite')
        if not np.all(np.isfinite(flows)):
            raise InvalidFrameError('point flows must be finite')
        object.__setattr__(self, 'positions', _readonly(positions))
        object.__setattr__(self, 'labels', _readonly(labels))
        object.__setattr__(self, 'flows', _readonly(flows))

    @classmethod
    def from_points(cls, time_index, sensor_origin, points: Sequence[PointSample]):
        """Build a frame from a sequence of PointSample."""
        positions = [p.position for p in points]
        labels = [p.label for p in points]
        flows = [p.flow for p in points]
        return cls(time_index, sensor_origin, np.reshape(positions, (-1, 3)), labels, np.reshape(flows, (-1, 3)))

    def __len__(self):
        return len(self.labels)

    @property
    def points(self):
        """The frame as a list of PointSample."""
        return [
            PointSample(tuple(p), int(y), tuple(u))
            for p, y, u in zip(self.positions.tolist(), self.labels.tolist(), self.flows.tolist())
        ]

    def validate(self, registry):
        """Check the invariants of an ingestible frame against ``registry``."""
        if len(self) == 0:
            raise InvalidFrameError(f"frame {self.time_index} has no points")
        registry.check_labels(self.labels)

    def replace(self, **changes):
        """Copy of the frame with some columns replaced."""
        values = {
            'time_index': self.time_index,
            'sensor_origin': self.sensor_origin,
            'positions': self.positions,
            'labels': self.labels,
            'flows': self.flows,
        }
        values.update(changes)
        return TrainingFrame(**values)

    def extended(self, positions, labels, flows):
        """Copy of the frame with extra points appended."""
        return self.replace(
            positions=np.vstack([self.positions, np.reshape(positions, (-1, 3))]),
            labels=np.concatenate([self.labels, np.asarray(labels, dtype=np.int64).reshape(-1)]),
            flows=np.vstack([self.flows, np.reshape(flows, (-1, 3))]),
        )


# ---------------------------------------------------------------------
# Voxels
# ---------------------------------------------------------------------
class VoxelKey(NamedTuple):
    """Integer grid coordinates of a voxel at map resolution."""
    ix: int
    iy: int
    iz: int


@dataclass
class VoxelState:
    """
    Dirichlet concentration vector, stored per-class voxel flow and the
    time index of the last update. Mutated only by the map engine.
    """
    alpha: np.ndarray
    voxel_flow: np.ndarray
    last_time: int = -1

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=np.float64).reshape(-1)
        self.voxel_flow = np.array(self.voxel_flow, dtype=np.float64).reshape(-1)
        if self.alpha.shape != self.voxel_flow.shape:
            raise MappingError('alpha and voxel flow must have the same length')

    @classmethod
    def prior(cls, num_classes, prior_alpha, time=-1):
        """Fresh voxel: uniform prior concentration, zero flow."""
        return cls(np.full(num_classes, prior_alpha), np.zeros(num_classes), time)

    def validate(self):
        if not np.all(self.alpha > 0) or not np.all(np.isfinite(self.alpha)):
            raise MappingError(f"alpha must be positive and finite: {self.alpha}")
        if not np.all(self.voxel_flow >= 0) or not np.all(np.isfinite(self.voxel_flow)):
            raise MappingError(f"voxel flow must be non-negative and finite: {self.voxel_flow}")

    def copy(self):
        return VoxelState(self.alpha.copy(), self.voxel_flow.copy(), self.last_time)


@dataclass(frozen=True)
class MapConfig:
    """
    Map resolution, prior, kernels and flow filter settings.
    """
    resolution: float = 0.05
    prior_alpha: float = 0.001
    kernel_params: KernelParams = field(default_factory=KernelParams)
    filter_lambda: float = 0.5
    flow_floor: float = 1e-3
    free_sample_interval: float = 0.5
    downsample_resolution: float = 0.0

    def __post_init__(self):
        for name in ('resolution', 'prior_alpha', 'free_sample_interval'):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
            object.__setattr__(self, name, value)
        if not 0.0 < self.filter_lambda <= 1.0:
            raise ValueError(f"filter_lambda must lie in (0, 1], got {self.filter_lambda}")
        if self.flow_floor < 0:
            raise ValueError(f"flow_floor must be non-negative, got {self.flow_floor}")
        if self.downsample_resolution < 0:
            raise ValueError(f"downsample_resolution must be non-negative, got {self.downsample_resolution}")


def voxel_key_of(position, resolution):
    """
    Voxel containing ``position``; points on a face belong to the upper voxel.

    Args:
        position: 3-vector in meters
        resolution: voxel edge length in meters

    Returns:
        VoxelKey
    """
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    pos = np.asarray(position, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(pos)):
        raise InvalidFrameError(f"position must be finite, got {pos}")
    ix, iy, iz = (int(v) for v in np.floor(pos / resolution))
    _check_range(np.array([ix, iy, iz]))
    return VoxelKey(ix, iy, iz)


def voxel_center(key, resolution):
    """Centre of voxel ``key`` in meters."""
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    return (np.asarray(key, dtype=np.float64) + 0.5) * resolution


FACE_OFFSETS = np.array([
    [-1, 0, 0], [1, 0, 0],
    [0, -1, 0], [0, 1, 0],
    [0, 0, -1], [0, 0, 1],
], dtype=np.int64)


def neighbor_keys(key):
    """The six face-adjacent keys in the order -x, +x, -y, +y, -z, +z."""
    base = np.asarray(key, dtype=np.int64)
    out = base + FACE_OFFSETS
    _check_range(out)
    return [VoxelKey(*(int(v) for v in row)) for row in out]


def _check_range(keys):
    keys = np.asarray(keys)
    if keys.size and (keys.min() < KEY_MIN or keys.max() > KEY_MAX):
        raise KeyOverflowError(f"voxel key outside [{KEY_MIN}, {KEY_MAX}] on some axis")


def keys_of(positions, resolution):
    """Vectorised voxel_key_of: (N,3) positions to (N,3) int64 keys."""
    keys = np.floor(np.asarray(positions, dtype=np.float64) / resolution)
    if keys.size and (keys.min() < KEY_MIN or keys.max() > KEY_MAX):
        raise KeyOverflowError(f"voxel key outside [{KEY_MIN}, {KEY_MAX}] on some axis")
    return keys.astype(np.int64).reshape(-1, 3)


def centers_of(keys, resolution):
    """Vectorised voxel_center."""
    return (np.asarray(keys, dtype=np.float64) + 0.5) * resolution


def pack_keys(keys):
    """Pack (N,3) keys into int64 codes; code order is lexicographic key order."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    _check_range(keys)
    shifted = keys + KEY_OFFSET
    return (shifted[:, 0] << (2 * KEY_BITS)) | (shifted[:, 1] << KEY_BITS) | shifted[:, 2]


def unpack_keys(codes):
    """Inverse of pack_keys."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    out = np.empty((len(codes), 3), dtype=np.int64)
    out[:, 0] = (codes >> (2 * KEY_BITS)) & _KEY_MASK
    out[:, 1] = (codes >> KEY_BITS) & _KEY_MASK
    out[:, 2] = codes & _KEY_MASK
    return out - KEY_OFFSET


class VoxelTable:
    """
    Sparse voxel table VoxelKey -> VoxelState backed by numpy arrays.

    Rows are stored in insertion order; a sorted copy of the packed keys
    serves vectorised lookups.
    """

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self._codes = np.empty(0, dtype=np.int64)
        self.alpha = np.empty((0, num_classes), dtype=np.float64)
        self.flow = np.empty((0, num_classes), dtype=np.float64)
        self.last_time = np.empty(0, dtype=np.int64)
        self._sorted_codes = self._codes
        self._sorted_rows = np.empty(0, dtype=np.int64)

    def __len__(self):
        return len(self._codes)

    def __contains__(self, key):
        return self.lookup(pack_keys([key]))[0] >= 0

    def __iter__(self) -> Iterator[VoxelKey]:
        return iter(self.keys())

    def _reindex(self):
        order = np.argsort(self._codes, kind='stable')
        self._sorted_rows = order
        self._sorted_codes = self._codes[order]

    def lookup(self, codes):
        """Row index per packed code, -1 where the voxel does not exist."""
        codes = np.asarray(codes, dtype=np.int64).reshape(-1)
        if len(self._sorted_codes) == 0:
            return np.full(len(codes), -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_codes, codes)
        pos = np.minimum(pos, len(self._sorted_codes) - 1)
        found = self._sorted_codes[pos] == codes
        return np.where(found, self._sorted_rows[pos], -1)

    def ensure(self, codes, prior_alpha, time=-1):
        """
        Rows for ``codes`` (unique), creating missing voxels at the prior.

        Returns:
            tuple of (rows, number of voxels created)
        """
        codes = np.asarray(codes, dtype=np.int64).reshape(-1)
        rows = self.lookup(codes)
        missing = rows < 0
        n_new = int(missing.sum())
        if n_new:
            start = len(self._codes)
            self._codes = np.concatenate([self._codes, codes[missing]])
            self.alpha = np.vstack([self.alpha, np.full((n_new, self.num_classes), prior_alpha)])
            self.flow = np.vstack([self.flow, np.zeros((n_new, self.num_classes))])
            self.last_time = np.concatenate([self.last_time, np.full(n_new, time, dtype=np.int64)])
            rows[missing] = np.arange(start, start + n_new)
            self._reindex()
        return rows, n_new

    def get(self, key) -> Optional[VoxelState]:
        """Copy of the state stored at ``key``, or None."""
        row = self.lookup(pack_keys([key]))[0]
        if row < 0:
            return None
        return VoxelState(self.alpha[row].copy(), self.flow[row].copy(), int(self.last_time[row]))

    def __getitem__(self, key):
        state = self.get(key)
        if state is None:
            raise KeyError(key)
        return state

    def set(self, key, state: VoxelState):
        """Store ``state`` at ``key``, creating the voxel when needed."""
        if len(state.alpha) != self.num_classes:
            raise RegistryMismatchError(f"state has {len(state.alpha)} classes, table has {self.num_classes}")
        state.validate()
        rows, _ = self.ensure(pack_keys([key]), 1.0)
        row = rows[0]
        self.alpha[row] = state.alpha
        self.flow[row] = state.voxel_flow
        self.last_time[row] = state.last_time

    def sorted_rows(self):
        """Row indices in lexicographic key order."""
        return self._sorted_rows

    def key_array(self, rows=None):
        """(M,3) keys of ``rows`` (all rows by default)."""
        codes = self._codes if rows is None else self._codes[rows]
        return unpack_keys(codes)

    def keys(self):
        """All keys in lexicographic order."""
        return [VoxelKey(*row) for row in unpack_keys(self._sorted_codes).tolist()]

    def items(self):
        for key in self.keys():
            yield key, self[key]
