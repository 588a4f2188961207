"""
Synthetic Dynamic World
=======================
Axis-aligned static boxes plus rigid boxes moving along piecewise-linear
trajectories, observed by a single ray-casting range sensor. Produces labelled
scans with per-point flow, point-set ground truth (noise-free returns plus
free-space samples) and voxel-grid ground truth from sub-voxel sampling.

World files are plain text, one directive per line (see docs/FILE_FORMATS.md).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from evaluation import GroundTruthModel
from mapper import free_space_batch
from models import ClassRegistry, MappingError, TrainingFrame, keys_of, pack_keys

logger = logging.getLogger(__name__)

# Returns are pushed this far past the surface so they land inside the body.
SURFACE_EPSILON = 1e-6


class WorldSpecError(MappingError):
    """Invalid world description; carries the file and line when parsed from disk."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ''
        if path:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo, hi) with a class label."""
    lo: tuple
    hi: tuple
    label: int

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if any(h <= l for l, h in zip(lo, hi)):
            raise WorldSpecError(f"box corners must satisfy lo < hi, got {lo} / {hi}")
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)

    def contains(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((points >= self.lo) & (points < self.hi), axis=1)


@dataclass(frozen=True)
class MovingBody:
    """Rigid box of fixed size whose centre follows time-indexed waypoints."""
    size: tuple
    label: int
    waypoints: tuple  # ((t, (x, y, z)), ...) sorted by t

    def center_at(self, t):
        times = np.array([w[0] for w in self.waypoints], dtype=np.float64)
        centers = np.array([w[1] for w in self.waypoints], dtype=np.float64)
        return np.array([np.interp(t, times, centers[:, axis]) for axis in range(3)])

    def box_at(self, t):
        center = self.center_at(t)
        half = np.asarray(self.size, dtype=np.float64) / 2.0
        return Box(tuple(center - half), tuple(center + half), self.label)

    def displacement(self, t, num_scans):
        """Motion from t to t+1; zero on the last scan."""
        if t >= num_scans - 1:
            return np.zeros(3)
        return self.center_at(t + 1) - self.center_at(t)


@dataclass(frozen=True)
class SensorSpec:
    """
    Range sensor: origin waypoints, azimuth/elevation grids in degrees
    (start, stop, count) and maximum range in meters.
    """
    origins: tuple  # ((t, (x, y, z)), ...)
    azimuth: tuple = (-180.0, 180.0, 360)
    elevation: tuple = (-30.0, 30.0, 31)
    max_range: float = 20.0
    flow_frame: str = 'world'

    def origin_at(self, t):
        times = np.array([w[0] for w in self.origins], dtype=np.float64)
        points = np.array([w[1] for w in self.origins], dtype=np.float64)
        return np.array([np.interp(t, times, points[:, axis]) for axis in range(3)])

    def directions(self):
        """Unit ray directions, azimuth-major order."""
        az = np.radians(np.linspace(self.azimuth[0], self.azimuth[1], int(self.azimuth[2]), endpoint=False))
        el = np.radians(np.linspace(self.elevation[0], self.elevation[1], int(self.elevation[2])))
        az_grid, el_grid = np.meshgrid(az, el, indexing='ij')
        az_grid = az_grid.reshape(-1)
        el_grid = el_grid.reshape(-1)
        return np.column_stack([
            np.cos(el_grid) * np.cos(az_grid),
            np.cos(el_grid) * np.sin(az_grid),
            np.sin(el_grid),
        ])


@dataclass(frozen=True)
class WorldSpec:
    """
    Complete description of a synthetic sequence.
    """
    registry: ClassRegistry
    sensor: SensorSpec
    static_boxes: tuple = ()
    bodies: tuple = ()
    num_scans: int = 1
    label_noise: float = 0.0
    flow_noise: float = 0.0
    seed: int = 0
    free_interval: float = 0.5

    def __post_init__(self):
        registry = self.registry
        for box in self.static_boxes:
            if box.label == registry.free_class or registry.is_dynamic(box.label):
                raise WorldSpecError(f"static box label {box.label} must be a static class")
        for body in self.bodies:
            if not registry.is_dynamic(body.label):
                raise WorldSpecError(f"moving body label {body.label} must be a dynamic class")
            if not body.waypoints:
                raise WorldSpecError('moving body needs at least one waypoint')
            times = [w[0] for w in body.waypoints]
            if times != sorted(times) or times[0] > 0 or times[-1] < self.num_scans - 1:
                raise WorldSpecError(f"trajectory must cover t = 0..{self.num_scans - 1} in order")
        if self.num_scans < 1:
            raise WorldSpecError('a world needs at least one scan')
        if not 0.0 <= self.label_noise <= 1.0:
            raise WorldSpecError(f"label noise must lie in [0, 1], got {self.label_noise}")
        if self.flow_noise < 0:
            raise WorldSpecError(f"flow noise must be non-negative, got {self.flow_noise}")
        if self.sensor.flow_frame not in ('world', 'sensor'):
            raise WorldSpecError(f"flow frame must be 'world' or 'sensor', got {self.sensor.flow_frame!r}")
        if self.free_interval <= 0:
            raise WorldSpecError('free-space interval must be positive')

    def with_changes(self, **changes):
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return WorldSpec(**values)

    def boxes_at(self, t):
        """Static boxes plus moving bodies at time t, with each box's flow."""
        boxes = list(self.static_boxes)
        flows = [np.zeros(3)] * len(boxes)
        for body in self.bodies:
            boxes.append(body.box_at(t))
            flows.append(body.displacement(t, self.num_scans))
        return boxes, flows


def ray_box_distance(origin, directions, box):
    """
    Distance along each ray to the box entry point (inf on a miss).
    """
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    parallel = directions == 0
    safe = np.where(parallel, 1.0, directions)
    t1 = (lo - origin) / safe
    t2 = (hi - origin) / safe
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    inside_slab = (origin >= lo) & (origin < hi)
    near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    hit = (t_near <= t_far) & (t_far > 0)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf)


def _cast(spec, t):
    """Noise-free ray cast: origin, directions, hit distance, labels and flows per ray."""
    if not 0 <= t < spec.num_scans:
        raise WorldSpecError(f"scan index {t} outside [0, {spec.num_scans})")
    origin = spec.sensor.origin_at(t)
    directions = spec.sensor.directions()
    boxes, box_flows = spec.boxes_at(t)
    best = np.full(len(directions), np.inf)
    labels = np.full(len(directions), spec.registry.free_class, dtype=np.int64)
    flows = np.zeros((len(directions), 3))
    for box, box_flow in zip(boxes, box_flows):
        if box.contains(origin)[0]:
            raise WorldSpecError(f"sensor origin {origin.tolist()} lies inside a body at t={t}")
        dist = ray_box_distance(origin, directions, box)
        closer = (dist < best) & (dist <= spec.sensor.max_range)
        best[closer] = dist[closer]
        labels[closer] = box.label
        flows[closer] = box_flow
    if spec.sensor.flow_frame == 'sensor':
        ego = spec.sensor.origin_at(t + 1) - origin if t < spec.num_scans - 1 else np.zeros(3)
        flows = flows - ego
    return origin, directions, best, labels, flows


def _flip_labels(labels, registry, probability, rng):
    """Replace each label with probability p by a uniformly drawn other occupied class."""
    draws = rng.random(len(labels))
    occupied = np.array([k for k in range(registry.num_classes) if k != registry.free_class])
    if probability <= 0 or len(occupied) < 2:
        return labels
    flip = draws < probability
    index = np.searchsorted(occupied, labels)
    pick = rng.integers(0, len(occupied) - 1, size=len(labels))
    pick = np.where(pick >= index, pick + 1, pick)
    return np.where(flip, occupied[pick], labels)


def render_scan(spec, t):
    """
    Labelled scan at time ``t`` with label and flow noise applied.

    Returns:
        TrainingFrame, or None when no ray hits anything
    """
    origin, directions, dist, labels, flows = _cast(spec, t)
    hit = np.isfinite(dist)
    if not np.any(hit):
        logger.warning(f"Scan {t} has no returns")
        return None
    positions = origin + directions[hit] * (dist[hit] + SURFACE_EPSILON)[:, None]
    labels = labels[hit]
    flows = flows[hit]
    rng = np.random.default_rng([spec.seed, t])
    labels = _flip_labels(labels, spec.registry, spec.label_noise, rng)
    if spec.flow_noise > 0:
        flows = flows + rng.normal(0.0, spec.flow_noise, size=flows.shape)
    return TrainingFrame(t, origin, positions, labels, flows)


def render_truth_labels(spec, t):
    """Noise-free labels of the returns of render_scan, in the same order."""
    _, _, dist, labels, _ = _cast(spec, t)
    return labels[np.isfinite(dist)]


def render_gt_points(spec, t, downsample=0.0):
    """
    Point-set ground truth: noise-free returns plus free samples along every
    ray, up to the hit or to max range for rays that hit nothing.

    Args:
        downsample: optional voxel-grid filter (meters) applied to the free samples
    """
    origin, directions, dist, labels, _ = _cast(spec, t)
    hit = np.isfinite(dist)
    returns = origin + directions[hit] * (dist[hit] + SURFACE_EPSILON)[:, None]
    endpoints = origin + directions * np.where(hit, dist, spec.sensor.max_range)[:, None]
    samples, _ = free_space_batch(origin, endpoints, spec.free_interval)
    if downsample > 0 and len(samples):
        _, first = np.unique(pack_keys(keys_of(samples, downsample)), return_index=True)
        samples = samples[np.sort(first)]
    positions = np.vstack([returns, samples])
    gt_labels = np.concatenate([labels[hit], np.full(len(samples), spec.registry.free_class, dtype=np.int64)])
    return GroundTruthModel.point_set(positions, gt_labels)


def render_gt(spec, t, gt_resolution, samples_per_voxel_axis=4):
    """
    Voxel-grid ground truth over the bounding box of all bodies at time ``t``.

    Each voxel is sampled on a regular sub-grid; any occupied sub-sample makes
    the voxel occupied, labelled by the majority occupied class. Overlapping
    boxes count their shared sub-samples once per box.
    """
    if gt_resolution <= 0:
        raise ValueError(f"ground-truth resolution must be positive, got {gt_resolution}")
    registry = spec.registry
    boxes, _ = spec.boxes_at(t)
    if not boxes:
        return GroundTruthModel.voxel_grid(np.empty((0, 3)), np.empty(0), gt_resolution)
    lo = np.min([b.lo for b in boxes], axis=0)
    hi = np.max([b.hi for b in boxes], axis=0)
    key_lo = np.floor(lo / gt_resolution).astype(np.int64)
    key_hi = np.ceil(hi / gt_resolution).astype(np.int64)
    shape = tuple(int(v) for v in key_hi - key_lo)
    offsets = (np.arange(samples_per_voxel_axis) + 0.5) / samples_per_voxel_axis

    counts = np.zeros(shape + (registry.num_classes,), dtype=np.int64)
    for box in boxes:
        per_axis = []
        for axis in range(3):
            index = np.arange(shape[axis]) + key_lo[axis]
            coords = (index[:, None] + offsets[None, :]) * gt_resolution
            per_axis.append(((coords >= box.lo[axis]) & (coords < box.hi[axis])).sum(axis=1))
        counts[..., box.label] += np.einsum('i,j,k->ijk', *per_axis)

    counts[..., registry.free_class] = 0
    occupied = counts.sum(axis=-1) > 0
    labels = np.where(occupied, np.argmax(counts, axis=-1), registry.free_class)
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing='ij'), axis=-1).reshape(-1, 3)
    return GroundTruthModel.voxel_grid(grid + key_lo, labels.reshape(-1), gt_resolution)


# ---------------------------------------------------------------------
# World files
# ---------------------------------------------------------------------
def _floats(parts, count, path, line):
    if len(parts) != count:
        raise WorldSpecError(f"expected {count} numbers, got {len(parts)}", path, line)
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise WorldSpecError(f"not a number in {' '.join(parts)!r}", path, line) from None
    if not all(math.isfinite(v) for v in values):
        raise WorldSpecError('numbers must be finite', path, line)
    return values


def load_world(path):
    """
    Parse a world file.

    Returns:
        WorldSpec
    """
    try:
        with open(path, encoding='utf-8') as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise WorldSpecError(f"cannot read world file ({e.strerror})", path) from None

    class_names = None
    free_name = None
    dynamic_names = []
    settings = {}
    origins = []
    boxes = []
    bodies = []

    def label_of(name, line):
        if class_names is None:
            raise WorldSpecError("'classes' must come before any body", path, line)
        if name not in class_names:
            raise WorldSpecError(f"unknown class {name!r}", path, line)
        return class_names.index(name)

    for number, raw in enumerate(lines, start=1):
        text = raw.split('#', 1)[0].strip()
        if not text:
            continue
        keyword, *parts = text.split()
        if keyword == 'classes':
            class_names = parts
        elif keyword == 'free':
            free_name = parts[0] if parts else None
        elif keyword == 'dynamic_classes':
            dynamic_names = parts
        elif keyword in ('scans', 'seed'):
            try:
                settings[keyword] = int(parts[0])
            except (IndexError, ValueError):
                raise WorldSpecError(f"'{keyword}' needs an integer", path, number) from None
        elif keyword in ('label_noise', 'flow_noise', 'free_interval', 'max_range'):
            settings[keyword] = _floats(parts, 1, path, number)[0]
        elif keyword in ('azimuth', 'elevation'):
            start, stop, count = _floats(parts, 3, path, number)
            settings[keyword] = (start, stop, int(count))
        elif keyword == 'flow_frame':
            settings[keyword] = parts[0] if parts else ''
        elif keyword == 'sensor_origin':
            if len(parts) == 3:
                origins.append((0.0, tuple(_floats(parts, 3, path, number))))
            else:
                values = _floats(parts, 4, path, number)
                origins.append((values[0], tuple(values[1:])))
        elif keyword == 'box':
            if not parts:
                raise WorldSpecError("'box' needs a class and two corners", path, number)
            label = label_of(parts[0], number)
            corners = _floats(parts[1:], 6, path, number)
            try:
                boxes.append(Box(tuple(corners[:3]), tuple(corners[3:]), label))
            except WorldSpecError as e:
                raise WorldSpecError(str(e), path, number) from None
        elif keyword == 'body':
            if not parts:
                raise WorldSpecError("'body' needs a class and a size", path, number)
            bodies.append({'label': label_of(parts[0], number),
                           'size': tuple(_floats(parts[1:], 3, path, number)),
                           'waypoints': [], 'line': number})
        elif keyword == 'waypoint':
            if not bodies:
                raise WorldSpecError("'waypoint' before any 'body'", path, number)
            values = _floats(parts, 4, path, number)
            bodies[-1]['waypoints'].append((values[0], tuple(values[1:])))
        else:
            raise WorldSpecError(f"unknown directive {keyword!r}", path, number)

    if class_names is None:
        raise WorldSpecError("missing 'classes' directive", path)
    if not origins:
        raise WorldSpecError("missing 'sensor_origin' directive", path)
    try:
        registry = ClassRegistry(
            num_classes=len(class_names),
            free_class=class_names.index(free_name) if free_name else 0,
            dynamic_classes=frozenset(class_names.index(n) for n in dynamic_names),
            names=tuple(class_names),
        )
        sensor = SensorSpec(
            origins=tuple(sorted(origins)),
            azimuth=settings.get('azimuth', SensorSpec.azimuth),
            elevation=settings.get('elevation', SensorSpec.elevation),
            max_range=settings.get('max_range', SensorSpec.max_range),
            flow_frame=settings.get('flow_frame', 'world'),
        )
        spec = WorldSpec(
            registry=registry,
            sensor=sensor,
            static_boxes=tuple(boxes),
            bodies=tuple(MovingBody(b['size'], b['label'], tuple(b['waypoints'])) for b in bodies),
            num_scans=settings.get('scans', 1),
            label_noise=settings.get('label_noise', 0.0),
            flow_noise=settings.get('flow_noise', 0.0),
            seed=settings.get('seed', 0),
            free_interval=settings.get('free_interval', 0.5),
        )
    except ValueError as e:
        if isinstance(e, WorldSpecError) and e.path:
            raise
        raise WorldSpecError(str(e), path) from None
    logger.info(f"Loaded world {path}: {len(boxes)} static boxes, {len(bodies)} moving bodies, "
                f"{spec.num_scans} scans")
    return spec


def room_world(num_scans=20, speed=0.25, cube_size=0.5, label_noise=0.0, flow_noise=0.0, seed=0,
               azimuth=(85.0, 135.0, 50), elevation=(-5.0, 5.0, 11), free_interval=0.1, sensor_x=None):
    """
    10 x 10 x 3 m room with one cube crossing it along +x.

    The sensor stands at y = 2, level with the cube centre, and rides along
    with the cube so only the face towards it is seen. The default field of
    view covers that face and the wake behind it. ``sensor_x`` parks the
    sensor at a fixed x instead.

    Classes: 0 free, 1 floor, 2 wall, 3 cube (moving).
    """
    registry = ClassRegistry(4, free_class=0, dynamic_classes=frozenset({3}),
                             names=('free', 'floor', 'wall', 'cube'))
    walls = (
        Box((0.0, 0.0, -0.1), (10.0, 10.0, 0.0), 1),
        Box((-0.1, 0.0, 0.0), (0.0, 10.0, 3.0), 2),
        Box((10.0, 0.0, 0.0), (10.1, 10.0, 3.0), 2),
        Box((0.0, -0.1, 0.0), (10.0, 0.0, 3.0), 2),
        Box((0.0, 10.0, 0.0), (10.0, 10.1, 3.0), 2),
    )
    half = cube_size / 2.0
    last = float(num_scans - 1)
    start = (2.0, 5.0, half)
    end = (2.0 + speed * last, 5.0, half)
    cube = MovingBody((cube_size,) * 3, 3, ((0.0, start), (last, end)))
    if sensor_x is None:
        origins = ((0.0, (start[0], 2.0, half)), (last, (end[0], 2.0, half)))
    else:
        origins = ((0.0, (float(sensor_x), 2.0, half)),)
    sensor = SensorSpec(origins=origins, azimuth=azimuth, elevation=elevation, max_range=15.0)
    return WorldSpec(registry=registry, sensor=sensor, static_boxes=walls, bodies=(cube,),
                     num_scans=num_scans, label_noise=label_noise, flow_noise=flow_noise, seed=seed,
                     free_interval=free_interval)
