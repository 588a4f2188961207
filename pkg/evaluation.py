"""
Map Evaluation
==============
Map accuracy (visible voxels against their closest ground truth), map
completeness (ground truth against the map, split into visible and occluded
parts) and point-wise segmentation scoring, all reduced to a confusion matrix.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from mapper import map_labels, prepare_frame, query_labels
from models import (
    MappingError,
    RegistryMismatchError,
    VoxelKey,
    centers_of,
    keys_of,
    pack_keys,
    unpack_keys,
)

logger = logging.getLogger(__name__)

POINT_SET = 'point-set'
VOXEL_GRID = 'voxel-grid'
REPORT_COLUMNS = ['class', 'tp', 'fp', 'fn', 'precision', 'recall', 'iou']


class RepresentationError(MappingError):
    """Ground truth of the wrong representation for the requested metric."""


@dataclass(frozen=True, eq=False)
class GroundTruthModel:
    """
    Labelled points (point-set mode) or labelled voxels (voxel-grid mode).
    """
    mode: str
    labels: np.ndarray
    positions: Optional[np.ndarray] = None
    keys: Optional[np.ndarray] = None
    resolution: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, 'labels', np.asarray(self.labels, dtype=np.int64).reshape(-1))
        if self.mode == POINT_SET:
            positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
            if len(positions) != len(self.labels):
                raise MappingError('ground-truth positions and labels differ in length')
            object.__setattr__(self, 'positions', positions)
        elif self.mode == VOXEL_GRID:
            if self.resolution is None or self.resolution <= 0:
                raise MappingError('voxel-grid ground truth needs a positive resolution')
            keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
            if len(keys) != len(self.labels):
                raise MappingError('ground-truth keys and labels differ in length')
            object.__setattr__(self, 'keys', keys)
        else:
            raise MappingError(f"unknown ground-truth mode {self.mode!r}")

    @classmethod
    def point_set(cls, positions, labels):
        return cls(POINT_SET, labels, positions=positions)

    @classmethod
    def voxel_grid(cls, keys, labels, resolution):
        return cls(VOXEL_GRID, labels, keys=keys, resolution=float(resolution))

    def __len__(self):
        return len(self.labels)

    def element_positions(self):
        """Point positions, or voxel centres in voxel-grid mode."""
        if self.mode == POINT_SET:
            return self.positions
        return centers_of(self.keys, self.resolution)

    def validate(self, registry):
        registry.check_labels(self.labels)


def confusion_matrix(gt_labels, pred_labels, num_classes):
    """Counts with rows = ground truth class and columns = predicted class."""
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    index = num_classes * gt_labels + pred_labels
    return np.bincount(index, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _ratio(num, den):
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


@dataclass
class EvalReport:
    """
    Per-class TP/FP/FN with precision, recall and IoU; undefined ratios are NaN.
    """
    confusion: np.ndarray

    @classmethod
    def empty(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, gt_labels, pred_labels, num_classes):
        return cls(confusion_matrix(gt_labels, pred_labels, num_classes))

    def merge(self, other):
        """Report over the union of both evaluated element sets."""
        return EvalReport(self.confusion + other.confusion)

    @property
    def num_classes(self):
        return self.confusion.shape[0]

    @property
    def tp(self):
        return np.diag(self.confusion).astype(np.int64)

    @property
    def fp(self):
        return self.confusion.sum(axis=0) - self.tp

    @property
    def fn(self):
        return self.confusion.sum(axis=1) - self.tp

    @property
    def evaluated(self):
        return int(self.confusion.sum())

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def iou(self):
        return _ratio(self.tp, self.tp + self.fp + self.fn)

    @property
    def overall_precision(self):
        """Micro-averaged precision: all TP over all TP+FP."""
        return float(_ratio(self.tp.sum(), self.tp.sum() + self.fp.sum()))

    @property
    def overall_recall(self):
        """Micro-averaged recall: all TP over all TP+FN."""
        return float(_ratio(self.tp.sum(), self.tp.sum() + self.fn.sum()))

    @property
    def miou(self):
        """Mean IoU over classes with TP+FP+FN > 0 (NaN when there are none)."""
        iou = self.iou
        defined = ~np.isnan(iou)
        if not np.any(defined):
            return float('nan')
        return float(iou[defined].mean())

    def to_frame(self, registry=None):
        """Report table with a trailing ``__mean__`` row: overall precision and recall, and mIoU."""
        names = [registry.name_of(k) if registry is not None else str(k) for k in range(self.num_classes)]
        table = pd.DataFrame({
            'class': names,
            'tp': self.tp,
            'fp': self.fp,
            'fn': self.fn,
            'precision': self.precision,
            'recall': self.recall,
            'iou': self.iou,
        })
        mean_row = pd.DataFrame([{
            'class': '__mean__',
            'tp': int(self.tp.sum()),
            'fp': int(self.fp.sum()),
            'fn': int(self.fn.sum()),
            'precision': self.overall_precision,
            'recall': self.overall_recall,
            'iou': self.miou,
        }])
        return pd.concat([table, mean_row], ignore_index=True)[REPORT_COLUMNS]


def visible_set(semantic_map, frame, with_free_sampling=True):
    """
    Keys of map voxels holding a return or a free-space sample of ``frame``.

    Flow plays no part, so frames without static returns are fine.
    """
    augmented, _ = prepare_frame(frame, semantic_map.config, semantic_map.registry, with_free_sampling, False)
    codes = np.unique(pack_keys(keys_of(augmented.positions, semantic_map.config.resolution)))
    codes = codes[semantic_map.voxels.lookup(codes) >= 0]
    return {VoxelKey(*row) for row in unpack_keys(codes).tolist()}


def _visible_codes(visible):
    if len(visible) == 0:
        return np.empty(0, dtype=np.int64)
    return np.unique(pack_keys(np.asarray(list(visible), dtype=np.int64)))


def majority_labels(voxel_index, labels, num_voxels, registry):
    """
    Ground-truth label per voxel: majority of occupied labels, free only
    when a voxel holds nothing but free samples. Ties go to the lowest id.

    Returns:
        (num_voxels,) labels, -1 for voxels without samples
    """
    k = registry.num_classes
    counts = np.bincount(voxel_index * k + labels, minlength=num_voxels * k).reshape(num_voxels, k)
    occupied = counts.copy()
    occupied[:, registry.free_class] = 0
    out = np.where(occupied.sum(axis=1) > 0, np.argmax(occupied, axis=1), registry.free_class)
    return np.where(counts.sum(axis=1) > 0, out, -1)


def map_accuracy(semantic_map, visible, gt, registry=None):
    """
    Score every visible voxel against the majority label of the ground-truth points inside it.
    """
    registry = registry or semantic_map.registry
    if gt.mode != POINT_SET:
        raise RepresentationError('map accuracy needs point-set ground truth')
    _check_registry(semantic_map, registry)
    gt.validate(registry)
    report = EvalReport.empty(registry.num_classes)
    vis_codes = _visible_codes(visible)
    if len(vis_codes) == 0 or len(gt) == 0:
        return report

    gt_codes = pack_keys(keys_of(gt.positions, semantic_map.config.resolution))
    pos = np.minimum(np.searchsorted(vis_codes, gt_codes), len(vis_codes) - 1)
    inside = vis_codes[pos] == gt_codes
    gt_label = majority_labels(pos[inside], gt.labels[inside], len(vis_codes), registry)

    rows = semantic_map.voxels.lookup(vis_codes)
    keep = (gt_label >= 0) & (rows >= 0)
    predicted = map_labels(semantic_map.voxels.alpha[rows[keep]])
    return EvalReport.from_labels(gt_label[keep], predicted, registry.num_classes)


def map_completeness(semantic_map, visible, gt, margin=None, registry=None):
    """
    Score ground-truth elements against the map.

    Elements outside every map voxel, or farther than ``margin`` from the
    centre of their voxel, are unexplored and skipped. Static elements are
    scored wherever they fall; moving ones only inside the visible set.

    Returns:
        tuple of (visible EvalReport, occluded EvalReport)
    """
    registry = registry or semantic_map.registry
    if margin is None:
        margin = semantic_map.config.resolution
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    _check_registry(semantic_map, registry)
    gt.validate(registry)
    k = registry.num_classes
    if len(gt) == 0:
        return EvalReport.empty(k), EvalReport.empty(k)

    positions = gt.element_positions()
    keys = keys_of(positions, semantic_map.config.resolution)
    rows = semantic_map.voxels.lookup(pack_keys(keys))
    diff = positions - centers_of(keys, semantic_map.config.resolution)
    explored = (rows >= 0) & (np.sqrt(np.sum(diff * diff, axis=1)) <= margin)

    vis_codes = _visible_codes(visible)
    codes = pack_keys(keys)
    if len(vis_codes):
        pos = np.minimum(np.searchsorted(vis_codes, codes), len(vis_codes) - 1)
        in_view = vis_codes[pos] == codes
    else:
        in_view = np.zeros(len(codes), dtype=bool)

    dynamic = registry.dynamic_mask[gt.labels]
    predicted = np.full(len(gt), -1, dtype=np.int64)
    if np.any(explored):
        predicted[explored] = map_labels(semantic_map.voxels.alpha[rows[explored]])

    visible_sel = explored & in_view
    occluded_sel = explored & ~in_view & ~dynamic
    return (
        EvalReport.from_labels(gt.labels[visible_sel], predicted[visible_sel], k),
        EvalReport.from_labels(gt.labels[occluded_sel], predicted[occluded_sel], k),
    )


def segmentation_eval(semantic_map, frame, gt_labels):
    """
    Score the map's labels at each point of an ingested frame.
    """
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if len(gt_labels) != len(frame):
        raise MappingError(f"{len(gt_labels)} ground-truth labels for {len(frame)} points")
    semantic_map.registry.check_labels(gt_labels)
    predicted, observed = query_labels(semantic_map, frame.positions)
    if not np.all(observed):
        logger.warning(f"{int((~observed).sum())} points fall outside the map and are skipped")
    return EvalReport.from_labels(gt_labels[observed], predicted[observed], semantic_map.registry.num_classes)


def _check_registry(semantic_map, registry):
    if semantic_map.registry.num_classes != registry.num_classes:
        raise RegistryMismatchError(
            f"map has {semantic_map.registry.num_classes} classes, registry has {registry.num_classes}"
        )
