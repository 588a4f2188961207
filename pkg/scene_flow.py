"""Scene-flow aggregation into per-class voxel flow.

Per-point flow norms are pooled around each voxel centre: a moving class
only feeds its own component (exit correction), while every moving class
feeds the pooled free component, which is then copied to all static classes
(entry correction). A moving-average filter blends each new estimate with the
previous one.
"""

import logging

import numpy as np

from kernels import flow_weight, flow_weight_free, sparse_kernel
from models import (
    FACE_OFFSETS,
    KEY_MAX,
    KEY_MIN,
    EgoCompensationError,
    centers_of,
    keys_of,
    pack_keys,
    unpack_keys,
    voxel_center,
)

logger = logging.getLogger(__name__)

# The voxel itself followed by its six face neighbours.
NEIGHBOURHOOD_OFFSETS = np.vstack([np.zeros((1, 3), dtype=np.int64), FACE_OFFSETS])


def ego_compensate(frame, registry):
    """
    Remove sensor motion from the flow field.

    The mean flow of static-labelled points (not moving, not free) is
    subtracted from every point.

    Args:
        frame: TrainingFrame
        registry: ClassRegistry

    Returns:
        new TrainingFrame whose static points have zero mean flow
    """
    static = registry.static_mask[frame.labels]
    if not np.any(static):
        raise EgoCompensationError(f"frame {frame.time_index} has no static points to compensate against")
    mean_flow = frame.flows[static].mean(axis=0)
    return frame.replace(flows=frame.flows - mean_flow)


def temporal_filter(new_v, prev_v, lam):
    """Moving average: lam * new_v + (1 - lam) * prev_v."""
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"filter lambda must lie in (0, 1], got {lam}")
    new_v = np.asarray(new_v, dtype=np.float64)
    prev_v = np.asarray(prev_v, dtype=np.float64)
    if np.any(new_v < 0) or np.any(prev_v < 0):
        raise ValueError('voxel flow must be non-negative')
    out = lam * new_v + (1.0 - lam) * prev_v
    if out.ndim == 0:
        return float(out)
    return out


def _finish(raw, raw_free, prev_flow, lam, registry):
    """Filter raw sums against the previous flow and copy free to static classes."""
    dynamic = registry.dynamic_mask
    out = np.empty_like(prev_flow)
    out[..., dynamic] = temporal_filter(raw[..., dynamic], prev_flow[..., dynamic], lam)
    free = temporal_filter(raw_free, prev_flow[..., registry.free_class], lam)
    out[..., ~dynamic] = np.expand_dims(free, -1)
    return out


def aggregate_flow(frame, key, prev, config, registry):
    """
    Voxel flow of one voxel from the current frame.

    Only points inside the voxel or its six face neighbours take part, and
    their count N normalises the kernel sums.

    Args:
        frame: TrainingFrame (already augmented with free-space samples if any)
        key: VoxelKey of the query voxel
        prev: VoxelState holding the previous voxel flow
        config: MapConfig
        registry: ClassRegistry

    Returns:
        K-vector of voxel flow
    """
    params = config.kernel_params
    center = voxel_center(key, config.resolution)
    point_keys = keys_of(frame.positions, config.resolution)
    in_neighbourhood = np.abs(point_keys - np.asarray(key, dtype=np.int64)).sum(axis=1) <= 1
    count = int(in_neighbourhood.sum())

    raw = np.zeros(registry.num_classes)
    raw_free = 0.0
    if count:
        moving = in_neighbourhood & registry.dynamic_mask[frame.labels]
        positions = frame.positions[moving]
        norms = np.linalg.norm(frame.flows[moving], axis=1)
        labels = frame.labels[moving]
        if len(labels):
            w = np.atleast_1d(flow_weight(positions, center, params))
            w_free = np.atleast_1d(flow_weight_free(positions, center, params))
            np.add.at(raw, labels, w * norms)
            raw_free = float(np.sum(w_free * norms))
        raw /= count
        raw_free /= count
    return _finish(raw, raw_free, np.asarray(prev.voxel_flow, dtype=np.float64), config.filter_lambda, registry)


def _map_offsets(executor, fn, offsets):
    if executor is None:
        return [fn(o) for o in offsets]
    return list(executor.map(fn, offsets))


def _voxel_groups(positions, resolution):
    """
    Group points by voxel once so per-offset work runs over voxels, not points.

    Returns:
        tuple of ((V,3) distinct keys, (N,) group of each point, (N,3) offset of each point from its voxel centre)
    """
    point_keys = keys_of(positions, resolution)
    codes, inverse = np.unique(pack_keys(point_keys), return_inverse=True)
    local = np.asarray(positions, dtype=np.float64) - centers_of(point_keys, resolution)
    return unpack_keys(codes), inverse.reshape(-1), local


def _offset_rows(keys, offset, table_lookup):
    """Lookup rows of ``keys + offset``; -1 where absent or outside the key range."""
    shifted = keys + offset
    inside = np.all((shifted >= KEY_MIN) & (shifted <= KEY_MAX), axis=1)
    rows = np.full(len(keys), -1, dtype=np.int64)
    if np.any(inside):
        rows[inside] = table_lookup(pack_keys(shifted[inside]))
    return rows


def aggregate_flow_batch(frame, active_keys, table_lookup, prev_flow, config, registry, executor=None):
    """
    Vectorised aggregate_flow over a set of voxels.

    Args:
        frame: TrainingFrame (augmented)
        active_keys: (M,3) keys of the voxels to aggregate
        table_lookup: callable mapping packed codes to positions in ``active_keys`` (-1 if absent)
        prev_flow: (M,K) previous voxel flow of those voxels
        config: MapConfig
        registry: ClassRegistry
        executor: optional concurrent.futures executor; offsets are summed in fixed order

    Returns:
        (M,K) voxel flow
    """
    params = config.kernel_params
    num_voxels = len(active_keys)
    k = registry.num_classes
    res = config.resolution
    voxel_keys, group, local = _voxel_groups(frame.positions, res)
    moving = registry.dynamic_mask[frame.labels]
    norms = np.linalg.norm(frame.flows, axis=1)

    def accumulate(offset):
        # voxel j sees a point in voxel p when p = j + offset
        rows = _offset_rows(voxel_keys, -offset, table_lookup)[group]
        hit = rows >= 0
        counts = np.bincount(rows[hit], minlength=num_voxels).astype(np.float64)
        sel = hit & moving
        raw = np.zeros(num_voxels * k)
        raw_free = np.zeros(num_voxels)
        if np.any(sel):
            diff = local[sel] + offset * res
            dist = np.sqrt(np.sum(diff * diff, axis=1))
            w = sparse_kernel(dist, params.l1, params.sigma1)
            w_free = sparse_kernel(dist, params.l_free, params.sigma_free)
            raw = np.bincount(rows[sel] * k + frame.labels[sel], weights=w * norms[sel], minlength=num_voxels * k)
            raw_free = np.bincount(rows[sel], weights=w_free * norms[sel], minlength=num_voxels)
        return counts, raw, raw_free

    counts = np.zeros(num_voxels)
    raw = np.zeros(num_voxels * k)
    raw_free = np.zeros(num_voxels)
    for c, r, rf in _map_offsets(executor, accumulate, NEIGHBOURHOOD_OFFSETS):
        counts += c
        raw += r
        raw_free += rf

    raw = raw.reshape(num_voxels, k)
    safe = np.where(counts > 0, counts, 1.0)
    raw /= safe[:, None]
    raw_free /= safe
    return _finish(raw, raw_free, np.asarray(prev_flow, dtype=np.float64), config.filter_lambda, registry)
