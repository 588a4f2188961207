"""
Map Engine
==========
Recursive Bayes filtering over a sparse voxel map: each frame first decays
the Dirichlet concentrations with the stored voxel flow, then adds
kernel-weighted label evidence, then stores fresh voxel flow for the next
frame.

Single-voxel operations (predict, update, map_label) are the reference
definitions; step() runs their vectorised counterparts over the active set.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from kernels import sparse_kernel, spatial_weight
from models import (
    ALPHA_MIN,
    KEY_MAX,
    KEY_MIN,
    InvalidFrameError,
    KeyOverflowError,
    MapConfig,
    MappingError,
    PointSample,
    RegistryMismatchError,
    TimeOrderError,
    VoxelState,
    VoxelTable,
    keys_of,
    pack_keys,
    voxel_center,
    voxel_key_of,
)
from scene_flow import _map_offsets, _offset_rows, _voxel_groups, aggregate_flow_batch, ego_compensate

logger = logging.getLogger(__name__)


@dataclass
class StepStats:
    """Bookkeeping of one step() call."""
    time_index: int
    points: int = 0
    free_samples: int = 0
    active_voxels: int = 0
    new_voxels: int = 0
    decayed_voxels: int = 0


@dataclass
class SemanticMap:
    """
    Sparse voxel map: Dir(alpha) per voxel plus stored voxel flow.
    """
    config: MapConfig
    registry: object
    voxels: VoxelTable = None
    current_time: int = -1
    last_stats: Optional[StepStats] = field(default=None, repr=False)
    last_active_keys: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.voxels is None:
            self.voxels = VoxelTable(self.registry.num_classes)
        elif self.voxels.num_classes != self.registry.num_classes:
            raise RegistryMismatchError('voxel table and registry disagree on the number of classes')

    def __len__(self):
        return len(self.voxels)


class QueryResult(NamedTuple):
    label: int
    theta: np.ndarray
    observed: bool


# ---------------------------------------------------------------------
# Single-voxel operations
# ---------------------------------------------------------------------
def predict(state, registry, flow_floor=1e-3):
    """
    Transition step: alpha^k <- exp(-(v^k)^2) alpha^k.

    Flow components below ``flow_floor`` count as zero. The flow vector is
    left unchanged.
    """
    if len(state.alpha) != registry.num_classes:
        raise RegistryMismatchError(f"state has {len(state.alpha)} classes, registry has {registry.num_classes}")
    return VoxelState(predict_batch(state.alpha, state.voxel_flow, flow_floor), state.voxel_flow.copy(), state.last_time)


def predict_batch(alpha, flow, flow_floor):
    """Vectorised predict over (M,K) arrays; alpha is clamped at the smallest normal double."""
    v = np.where(flow < flow_floor, 0.0, flow)
    return np.maximum(alpha * np.exp(-(v * v)), ALPHA_MIN)


def update(state, key, frame, config, registry):
    """
    Add kernel-weighted label evidence of every frame point to one voxel.
    """
    weights = np.atleast_1d(spatial_weight(frame.positions, voxel_center(key, config.resolution), config.kernel_params))
    alpha = state.alpha + np.bincount(frame.labels, weights=weights, minlength=registry.num_classes)
    return VoxelState(alpha, state.voxel_flow.copy(), frame.time_index)


def map_label(state):
    """
    MAP label of a voxel and its class-probability estimate.

    Uses the Dirichlet mode when every alpha exceeds 1, otherwise the
    normalised mean. Ties go to the lowest class id.

    Returns:
        tuple of (label, theta)
    """
    alpha = np.asarray(state.alpha if isinstance(state, VoxelState) else state, dtype=np.float64)
    theta = _theta(alpha[None, :])[0]
    return int(np.argmax(theta)), theta


def _theta(alpha):
    """Row-wise mode or mean of (M,K) concentrations."""
    k = alpha.shape[1]
    total = alpha.sum(axis=1, keepdims=True)
    mode_ok = alpha.min(axis=1, keepdims=True) > 1.0
    mode = (alpha - 1.0) / np.where(mode_ok, total - k, 1.0)
    mean = alpha / total
    return np.where(mode_ok, mode, mean)


def map_labels(alpha):
    """Vectorised map_label: labels of (M,K) concentrations."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1, alpha.shape[-1])
    return np.argmax(_theta(alpha), axis=1)


# ---------------------------------------------------------------------
# Free space
# ---------------------------------------------------------------------
def free_space_samples(origin, endpoint, interval, registry):
    """
    Free-labelled samples every ``interval`` meters from ``origin`` toward
    ``endpoint``, strictly before the endpoint.
    """
    if interval <= 0:
        raise ValueError(f"free-space interval must be positive, got {interval}")
    origin = np.asarray(origin, dtype=np.float64)
    endpoint = np.asarray(endpoint, dtype=np.float64)
    if np.linalg.norm(endpoint - origin) == 0:
        raise InvalidFrameError('cannot sample free space along a zero-length ray')
    positions, _ = free_space_batch(origin, endpoint[None, :], interval)
    return [PointSample(tuple(p), registry.free_class, (0.0, 0.0, 0.0)) for p in positions.tolist()]


def free_space_batch(origin, endpoints, interval):
    """
    Vectorised free-space sampling along many rays sharing one origin.

    Zero-length rays produce no samples.

    Returns:
        tuple of ((S,3) sample positions, (S,) index of the source ray)
    """
    endpoints = np.asarray(endpoints, dtype=np.float64).reshape(-1, 3)
    delta = endpoints - origin
    ranges = np.linalg.norm(delta, axis=1)
    counts = np.ceil(ranges / interval).astype(np.int64) - 1
    counts = np.maximum(counts, 0)
    # settle rounding at exact multiples: keep k * interval < range strictly
    counts += ((counts + 1) * interval < ranges).astype(np.int64)
    counts -= ((counts > 0) & (counts * interval >= ranges)).astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        return np.empty((0, 3)), np.empty(0, dtype=np.int64)
    ray = np.repeat(np.arange(len(endpoints)), counts)
    starts = np.cumsum(counts) - counts
    step = np.arange(total) - np.repeat(starts, counts) + 1
    direction = delta[ray] / ranges[ray][:, None]
    positions = origin + direction * (step * interval)[:, None]
    return positions, ray


def downsample_frame(frame, resolution):
    """
    Voxel-grid filter: one point per (voxel, label) at the centroid, carrying the mean flow.
    """
    if resolution <= 0:
        return frame
    keys = keys_of(frame.positions, resolution)
    groups, inverse = np.unique(
        np.column_stack([pack_keys(keys), frame.labels]), axis=0, return_inverse=True
    )
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse).astype(np.float64)

    def mean(columns):
        return np.column_stack([
            np.bincount(inverse, weights=columns[:, axis]) / counts for axis in range(3)
        ])

    return frame.replace(positions=mean(frame.positions), labels=groups[:, 1], flows=mean(frame.flows))


def prepare_frame(frame, config, registry, with_free_sampling=True, with_ego_compensation=False):
    """
    Frame exactly as step() ingests it: compensated, downsampled and augmented.

    Returns:
        tuple of (augmented frame, number of free-space samples added)
    """
    frame.validate(registry)
    if with_ego_compensation:
        frame = ego_compensate(frame, registry)
    if config.downsample_resolution > 0:
        frame = downsample_frame(frame, config.downsample_resolution)
    n_free = 0
    if with_free_sampling:
        samples, _ = free_space_batch(frame.sensor_origin, frame.positions, config.free_sample_interval)
        n_free = len(samples)
        if n_free:
            labels = np.full(n_free, registry.free_class, dtype=np.int64)
            frame = frame.extended(samples, labels, np.zeros_like(samples))
    return frame, n_free


# ---------------------------------------------------------------------
# Batch update
# ---------------------------------------------------------------------
def _spatial_offsets(l_s, resolution):
    """Voxel offsets that can hold a centre within l_s of a point in voxel (0,0,0)."""
    reach = int(math.ceil(l_s / resolution + 0.5))
    span = np.arange(-reach, reach + 1)
    grid = np.stack(np.meshgrid(span, span, span, indexing='ij'), axis=-1).reshape(-1, 3)
    gap = np.maximum(np.abs(grid) - 0.5, 0.0) * resolution
    return grid[np.sqrt(np.sum(gap * gap, axis=1)) < l_s].astype(np.int64)


def update_batch(frame, num_voxels, table_lookup, config, registry, executor=None):
    """
    Kernel-weighted label evidence for the active voxels.

    Args:
        frame: augmented TrainingFrame
        num_voxels: size M of the active set
        table_lookup: callable from packed codes to active-set positions (-1 if absent)

    Returns:
        (M,K) increments to alpha
    """
    # per offset: one lookup per distinct point voxel, kernel only for points within l_s
    params = config.kernel_params
    k = registry.num_classes
    res = config.resolution
    voxel_keys, group, local = _voxel_groups(frame.positions, res)

    def accumulate(offset):
        diff = local - offset * res
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        near = np.flatnonzero(dist < params.l_s)
        rows = _offset_rows(voxel_keys, offset, table_lookup)[group[near]]
        hit = rows >= 0
        if not np.any(hit):
            return np.zeros(num_voxels * k)
        picked = near[hit]
        w = sparse_kernel(dist[picked], params.l_s, params.sigma_s)
        return np.bincount(rows[hit] * k + frame.labels[picked], weights=w, minlength=num_voxels * k)

    total = np.zeros(num_voxels * k)
    for part in _map_offsets(executor, accumulate, _spatial_offsets(params.l_s, config.resolution)):
        total += part
    return total.reshape(num_voxels, k)


# ---------------------------------------------------------------------
# Frame step
# ---------------------------------------------------------------------
def step(semantic_map, frame, with_free_sampling=True, with_ego_compensation=False,
         bacc=True, forc=True, static_baseline=False, executor=None):
    """
    Ingest one frame: predict with stored flow, add evidence, store new flow.

    Only voxels containing at least one point of the augmented frame are
    touched. Ablations: ``bacc=False`` zeroes moving-class flow and
    ``forc=False`` zeroes free/static flow before prediction;
    ``static_baseline=True`` skips prediction altogether.

    Args:
        semantic_map: SemanticMap, updated in place
        frame: TrainingFrame with time_index > semantic_map.current_time
        executor: optional executor for the per-offset kernel sums

    Returns:
        the updated SemanticMap
    """
    config = semantic_map.config
    registry = semantic_map.registry
    if frame.time_index <= semantic_map.current_time:
        raise TimeOrderError(
            f"frame time {frame.time_index} does not follow map time {semantic_map.current_time}"
        )
    augmented, n_free = prepare_frame(frame, config, registry, with_free_sampling, with_ego_compensation)

    point_codes = pack_keys(keys_of(augmented.positions, config.resolution))
    active_codes = np.unique(point_codes)
    table = semantic_map.voxels
    rows, n_new = table.ensure(active_codes, config.prior_alpha, frame.time_index)

    def active_lookup(codes):
        pos = np.searchsorted(active_codes, codes)
        pos = np.minimum(pos, len(active_codes) - 1)
        return np.where(active_codes[pos] == codes, pos, -1)

    alpha = table.alpha[rows]
    stored_flow = table.flow[rows]
    decayed = 0
    if not static_baseline:
        flow = stored_flow.copy()
        if not bacc:
            flow[:, registry.dynamic_mask] = 0.0
        if not forc:
            flow[:, ~registry.dynamic_mask] = 0.0
        moving = np.any(flow >= config.flow_floor, axis=1)
        decayed = int(moving.sum())
        if decayed:
            alpha[moving] = predict_batch(alpha[moving], flow[moving], config.flow_floor)

    alpha = alpha + update_batch(augmented, len(active_codes), active_lookup, config, registry, executor)
    new_flow = aggregate_flow_batch(
        augmented, table.key_array(rows), active_lookup, stored_flow, config, registry, executor
    )
    if not np.all(alpha > 0):
        raise MappingError(f"non-positive concentration after frame {frame.time_index}")

    table.alpha[rows] = alpha
    table.flow[rows] = new_flow
    table.last_time[rows] = frame.time_index
    semantic_map.current_time = frame.time_index
    semantic_map.last_active_keys = table.key_array(rows)
    semantic_map.last_stats = StepStats(
        time_index=frame.time_index,
        points=len(frame),
        free_samples=n_free,
        active_voxels=len(active_codes),
        new_voxels=n_new,
        decayed_voxels=decayed,
    )
    logger.debug(
        f"Frame {frame.time_index}: {len(frame)} points, {n_free} free samples, "
        f"{len(active_codes)} active voxels ({n_new} new, {decayed} decayed)"
    )
    return semantic_map


def query(semantic_map, position):
    """
    Label of the voxel containing ``position``.

    Unobserved space, including positions beyond the key range, reports the
    free class with a uniform estimate.
    """
    try:
        key = voxel_key_of(position, semantic_map.config.resolution)
    except KeyOverflowError:
        key = None
    state = None if key is None else semantic_map.voxels.get(key)
    if state is None:
        k = semantic_map.registry.num_classes
        return QueryResult(semantic_map.registry.free_class, np.full(k, 1.0 / k), False)
    label, theta = map_label(state)
    return QueryResult(label, theta, True)


def query_labels(semantic_map, positions):
    """
    Vectorised query.

    Returns:
        tuple of ((N,) labels, (N,) observed flags)
    """
    raw = np.floor(np.asarray(positions, dtype=np.float64).reshape(-1, 3) / semantic_map.config.resolution)
    inside = np.all((raw >= KEY_MIN) & (raw <= KEY_MAX), axis=1)
    labels = np.full(len(raw), semantic_map.registry.free_class, dtype=np.int64)
    observed = np.zeros(len(raw), dtype=bool)
    if np.any(inside):
        rows = semantic_map.voxels.lookup(pack_keys(raw[inside].astype(np.int64)))
        hit = np.flatnonzero(inside)[rows >= 0]
        observed[hit] = True
        labels[hit] = map_labels(semantic_map.voxels.alpha[rows[rows >= 0]])
    return labels, observed
