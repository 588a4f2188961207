"""
File Formats
============
Readers and writers for everything the command line moves between steps:

- scans (``dsm-scan v1`` text, ``DSMB1`` binary)
- maps (``dsm-map v1``)
- ground truth (``dsm-gt v1``, point-set or voxel-grid)
- per-point truth labels (``dsm-labels v1``)
- evaluation reports (CSV)

Text bodies are space-separated and written with 17 significant digits, so a
parse followed by a write reproduces the original bytes.
"""

import logging
import os
import struct

import numpy as np
import pandas as pd

from evaluation import POINT_SET, VOXEL_GRID, GroundTruthModel
from mapper import SemanticMap
from models import ClassRegistry, MapConfig, MappingError, TrainingFrame, VoxelTable, pack_keys

logger = logging.getLogger(__name__)

SCAN_MAGIC = 'dsm-scan v1'
MAP_MAGIC = 'dsm-map v1'
GT_MAGIC = 'dsm-gt v1'
LABELS_MAGIC = 'dsm-labels v1'
BINARY_MAGIC = b'DSMB1'
BINARY_HEADER = struct.Struct('<q3dI')
BINARY_POINT = np.dtype([
    ('x', '<f4'), ('y', '<f4'), ('z', '<f4'),
    ('label', '<u2'),
    ('ux', '<f4'), ('uy', '<f4'), ('uz', '<f4'),
])
FLOAT_FMT = '%.17g'
SCAN_SUFFIXES = ('.scan', '.dsmb')


class FormatError(MappingError):
    """Malformed input file; names the file and, when known, the line."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ''
        if path:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(f"{where}{message}")


# ---------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------
def _parse_header(line, magic, path):
    """
    Split ``<magic> key=value key=v1 v2 v3 ...`` into a dict of string lists.
    """
    if not line.startswith(magic):
        raise FormatError(f"expected header starting with {magic!r}", path, 1)
    fields = {}
    current = None
    for token in line[len(magic):].split():
        if '=' in token:
            current, value = token.split('=', 1)
            fields[current] = [value] if value else []
        elif current is None:
            raise FormatError(f"unexpected header token {token!r}", path, 1)
        else:
            fields[current].append(token)
    return fields


def _field(fields, name, convert, path, count=1):
    if name not in fields:
        raise FormatError(f"header lacks '{name}='", path, 1)
    values = fields[name]
    if len(values) != count:
        raise FormatError(f"header field '{name}' needs {count} value(s)", path, 1)
    try:
        out = [convert(v) for v in values]
    except ValueError:
        raise FormatError(f"header field '{name}' is not a valid number", path, 1) from None
    return out[0] if count == 1 else out


def _registry_fields(registry):
    dynamic = ','.join(str(q) for q in sorted(registry.dynamic_classes))
    return f"classes={registry.num_classes} free={registry.free_class} dynamic={dynamic}"


def _registry_from(fields, path):
    dynamic = fields.get('dynamic', [])
    try:
        dynamic_ids = frozenset(int(q) for q in ','.join(dynamic).split(',') if q)
        return ClassRegistry(
            num_classes=_field(fields, 'classes', int, path),
            free_class=_field(fields, 'free', int, path),
            dynamic_classes=dynamic_ids,
        )
    except FormatError:
        raise
    except ValueError as e:
        raise FormatError(f"invalid class registry ({e})", path, 1) from None


def _read_lines(path):
    try:
        with open(path, encoding='utf-8') as fh:
            header = fh.readline().rstrip('\n')
            return header, fh.read()
    except OSError as e:
        raise FormatError(f"cannot read file ({e.strerror})", path) from None
    except UnicodeDecodeError:
        raise FormatError('not a text file', path) from None


def _read_table(path, body, columns, int_columns, expected_rows):
    """
    Parse a space-separated body into an (expected_rows, columns) DataFrame.
    """
    if expected_rows == 0:
        if body.strip():
            raise FormatError('header announces no rows but the file has data', path, 2)
        return pd.DataFrame(columns=range(columns))
    try:
        table = pd.read_csv(
            path, sep=' ', header=None, skiprows=1, names=list(range(columns)),
            float_precision='round_trip', index_col=False, dtype={c: np.int64 for c in int_columns},
        )
    except (ValueError, pd.errors.ParserError) as e:
        raise FormatError(f"malformed body ({str(e).splitlines()[0]})", path) from None
    if len(table) != expected_rows:
        raise FormatError(f"header announces {expected_rows} rows, found {len(table)}", path)
    bad = table.isna().any(axis=1).to_numpy()
    if np.any(bad):
        raise FormatError(f"expected {columns} fields", path, int(np.argmax(bad)) + 2)
    return table


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as e:
        raise FormatError(f"cannot create output directory ({e.strerror})", parent) from None


def _write(path, header, body, fmt):
    _ensure_parent(path)
    try:
        with open(path, 'w', encoding='utf-8', newline='\n') as fh:
            fh.write(header + '\n')
            if len(body):
                np.savetxt(fh, body, fmt=fmt, delimiter=' ')
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise FormatError(f"cannot write file ({e.strerror})", path) from None


# ---------------------------------------------------------------------
# Scans
# ---------------------------------------------------------------------
def write_scan(path, frame, binary=False):
    """
    Write a frame as a scan file (text unless ``binary``).
    """
    if binary:
        return _write_scan_binary(path, frame)
    origin = ' '.join(FLOAT_FMT % v for v in frame.sensor_origin)
    header = f"{SCAN_MAGIC} t={frame.time_index} origin={origin} n={len(frame)}"
    table = np.column_stack([frame.positions, frame.labels, frame.flows]) if len(frame) else np.empty((0, 7))
    _write(path, header, table, [FLOAT_FMT] * 3 + ['%d'] + [FLOAT_FMT] * 3)


def _write_scan_binary(path, frame):
    _ensure_parent(path)
    records = np.empty(len(frame), dtype=BINARY_POINT)
    for axis, name in enumerate(('x', 'y', 'z')):
        records[name] = frame.positions[:, axis]
    for axis, name in enumerate(('ux', 'uy', 'uz')):
        records[name] = frame.flows[:, axis]
    records['label'] = frame.labels
    try:
        with open(path, 'wb') as fh:
            fh.write(BINARY_MAGIC)
            fh.write(BINARY_HEADER.pack(frame.time_index, *frame.sensor_origin, len(frame)))
            fh.write(records.tobytes())
    except OSError as e:
        raise FormatError(f"cannot write file ({e.strerror})", path) from None


def _read_scan_binary(path, data):
    offset = len(BINARY_MAGIC)
    if len(data) < offset + BINARY_HEADER.size:
        raise FormatError('truncated binary header', path)
    t, ox, oy, oz, n = BINARY_HEADER.unpack_from(data, offset)
    offset += BINARY_HEADER.size
    if len(data) != offset + n * BINARY_POINT.itemsize:
        raise FormatError(f"binary body does not hold {n} points", path)
    records = np.frombuffer(data, dtype=BINARY_POINT, count=n, offset=offset)
    positions = np.column_stack([records['x'], records['y'], records['z']]).astype(np.float64)
    flows = np.column_stack([records['ux'], records['uy'], records['uz']]).astype(np.float64)
    try:
        return TrainingFrame(t, (ox, oy, oz), positions, records['label'].astype(np.int64), flows)
    except MappingError as e:
        raise FormatError(str(e), path) from None


def read_scan(path):
    """
    Read a scan file in either text or binary form.

    Returns:
        TrainingFrame
    """
    try:
        with open(path, 'rb') as fh:
            magic = fh.read(len(BINARY_MAGIC))
            if magic == BINARY_MAGIC:
                return _read_scan_binary(path, magic + fh.read())
    except OSError as e:
        raise FormatError(f"cannot read file ({e.strerror})", path) from None

    header, body = _read_lines(path)
    fields = _parse_header(header, SCAN_MAGIC, path)
    t = _field(fields, 't', int, path)
    origin = _field(fields, 'origin', float, path, count=3)
    n = _field(fields, 'n', int, path)
    table = _read_table(path, body, 7, [3], n).to_numpy()
    try:
        return TrainingFrame(t, origin, table[:, 0:3].astype(np.float64), table[:, 3].astype(np.int64),
                             table[:, 4:7].astype(np.float64))
    except MappingError as e:
        raise FormatError(str(e), path) from None


def scan_filename(time_index, binary=False):
    return f"scan_{time_index:06d}{'.dsmb' if binary else '.scan'}"


def list_scans(directory):
    """
    Scan files of a directory ordered by time index.

    Returns:
        list of (time_index, path)
    """
    if not os.path.isdir(directory):
        raise FormatError('scan directory does not exist', directory)
    paths = sorted(
        os.path.join(directory, name) for name in os.listdir(directory)
        if name.endswith(SCAN_SUFFIXES)
    )
    if not paths:
        raise FormatError('no scan files (*.scan, *.dsmb) found', directory)
    entries = []
    seen = {}
    for path in paths:
        t = read_scan(path).time_index
        if t in seen:
            raise FormatError(f"time index {t} also used by {seen[t]}", path)
        seen[t] = path
        entries.append((t, path))
    entries.sort()
    times = [t for t, _ in entries]
    expected = list(range(times[0], times[0] + len(times)))
    if times != expected:
        missing = sorted(set(expected) - set(times))[0]
        raise FormatError(f"missing frame t={missing}", directory)
    return entries


# ---------------------------------------------------------------------
# Maps
# ---------------------------------------------------------------------
def write_map(path, semantic_map):
    """Export the map with voxels in lexicographic key order."""
    table = semantic_map.voxels
    registry = semantic_map.registry
    rows = table.sorted_rows()
    header = (f"{MAP_MAGIC} resolution={FLOAT_FMT % semantic_map.config.resolution} "
              f"{_registry_fields(registry)} time={semantic_map.current_time}")
    body = np.column_stack([table.key_array(rows), table.alpha[rows], table.flow[rows]])
    k = registry.num_classes
    _write(path, header, body, ['%d'] * 3 + [FLOAT_FMT] * (2 * k))
    logger.info(f"Wrote map with {len(table)} voxels to {path}")


def read_map(path, config=None):
    """
    Import a map export.

    Args:
        config: MapConfig to attach; by default one built from the header resolution

    Returns:
        SemanticMap
    """
    header, body = _read_lines(path)
    fields = _parse_header(header, MAP_MAGIC, path)
    resolution = _field(fields, 'resolution', float, path)
    registry = _registry_from(fields, path)
    time = _field(fields, 'time', int, path)
    k = registry.num_classes
    n = sum(1 for line in body.splitlines() if line.strip())
    table = _read_table(path, body, 3 + 2 * k, [0, 1, 2], n)

    if config is None:
        config = MapConfig(resolution=resolution)
    elif config.resolution != resolution:
        raise FormatError(f"map resolution {resolution} differs from config resolution {config.resolution}", path)

    values = table.to_numpy(dtype=np.float64)
    keys = table[[0, 1, 2]].to_numpy(dtype=np.int64)
    alpha = values[:, 3:3 + k]
    flow = values[:, 3 + k:]
    if np.any(alpha <= 0) or np.any(flow < 0):
        raise FormatError('alpha must be positive and voxel flow non-negative', path)

    voxels = VoxelTable(k)
    rows, _ = voxels.ensure(pack_keys(keys), config.prior_alpha)
    if len(np.unique(rows)) != len(rows):
        raise FormatError('duplicate voxel keys', path)
    voxels.alpha[rows] = alpha
    voxels.flow[rows] = flow
    voxels.last_time[rows] = time
    return SemanticMap(config, registry, voxels, current_time=time)


# ---------------------------------------------------------------------
# Ground truth and truth labels
# ---------------------------------------------------------------------
def write_gt(path, gt, registry, time_index):
    if gt.mode == POINT_SET:
        header = f"{GT_MAGIC} mode={POINT_SET} {_registry_fields(registry)} t={time_index} n={len(gt)}"
        body = np.column_stack([gt.positions, gt.labels]) if len(gt) else np.empty((0, 4))
        _write(path, header, body, [FLOAT_FMT] * 3 + ['%d'])
    else:
        header = (f"{GT_MAGIC} mode={VOXEL_GRID} resolution={FLOAT_FMT % gt.resolution} "
                  f"{_registry_fields(registry)} t={time_index} n={len(gt)}")
        body = np.column_stack([gt.keys, gt.labels]) if len(gt) else np.empty((0, 4))
        _write(path, header, body, '%d')


def read_gt(path):
    """
    Returns:
        tuple of (GroundTruthModel, ClassRegistry)
    """
    header, body = _read_lines(path)
    fields = _parse_header(header, GT_MAGIC, path)
    mode = _field(fields, 'mode', str, path)
    registry = _registry_from(fields, path)
    n = _field(fields, 'n', int, path)
    if mode == POINT_SET:
        table = _read_table(path, body, 4, [3], n)
        gt = GroundTruthModel.point_set(table[[0, 1, 2]].to_numpy(dtype=np.float64), table[3].to_numpy())
    elif mode == VOXEL_GRID:
        resolution = _field(fields, 'resolution', float, path)
        table = _read_table(path, body, 4, [0, 1, 2, 3], n)
        gt = GroundTruthModel.voxel_grid(table[[0, 1, 2]].to_numpy(), table[3].to_numpy(), resolution)
    else:
        raise FormatError(f"unknown ground-truth mode {mode!r}", path, 1)
    try:
        gt.validate(registry)
    except MappingError as e:
        raise FormatError(str(e), path) from None
    return gt, registry


def write_labels(path, labels, time_index):
    labels = np.asarray(labels, dtype=np.int64)
    _write(path, f"{LABELS_MAGIC} t={time_index} n={len(labels)}", labels.reshape(-1, 1), '%d')


def read_labels(path):
    """
    Returns:
        tuple of (time_index, (N,) labels)
    """
    header, body = _read_lines(path)
    fields = _parse_header(header, LABELS_MAGIC, path)
    t = _field(fields, 't', int, path)
    n = _field(fields, 'n', int, path)
    table = _read_table(path, body, 1, [0], n)
    return t, table[0].to_numpy(dtype=np.int64)


# ---------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------
def write_report(path, report, registry=None):
    """CSV report; undefined ratios are written as empty fields."""
    _ensure_parent(path)
    try:
        report.to_frame(registry).to_csv(path, index=False, na_rep='', float_format='%.12g', lineterminator='\n')
    except OSError as e:
        raise FormatError(f"cannot write file ({e.strerror})", path) from None
