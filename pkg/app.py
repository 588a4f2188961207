"""
Dynamic Semantic Mapper - Command Line Entry Point
==================================================
simulate -> map -> eval, plus the BACC/FORC ablation switches.

    python app.py simulate worlds/moving_cube.world out/
    python app.py map out/ out/map.txt --config out/map.env
    python app.py eval out/map.txt out/gt_points_000019.gt out/report.csv \\
        --mode accuracy --scan out/scan_000019.scan --config out/map.env
"""

import dataclasses
import functools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext

import click

from config import ConfigError, default_map_config, load_config_file, write_config_file
from evaluation import map_accuracy, map_completeness, segmentation_eval, visible_set
from map_io import (
    list_scans,
    read_gt,
    read_labels,
    read_map,
    read_scan,
    scan_filename,
    write_gt,
    write_labels,
    write_map,
    write_report,
    write_scan,
)
from mapper import SemanticMap, step
from models import MappingError, RegistryMismatchError, TrainingFrame
from simworld import load_world, render_gt, render_gt_points, render_scan, render_truth_labels

__version__ = '1.0.0'

logger = logging.getLogger(__name__)


def _report_errors(func):
    """Turn library errors into a one-line message and exit status 1."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (MappingError, ConfigError) as e:
            logger.debug('Command failed', exc_info=True)
            raise click.ClickException(str(e)) from None
    return wrapper


def _load_settings(config_path, profile):
    if config_path:
        return load_config_file(config_path)
    return default_map_config(profile)


def _same_registry(a, b):
    return (a.num_classes, a.free_class, a.dynamic_classes) == (b.num_classes, b.free_class, b.dynamic_classes)


config_option = click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                             help='KEY=VALUE config file (see docs/FILE_FORMATS.md).')
profile_option = click.option('--profile', default='default', show_default=True,
                              help='Built-in profile used when no --config is given.')


@click.group()
@click.option('-v', '--verbose', count=True, help='-v for progress, -vv for per-frame statistics.')
def cli(verbose):
    """Dynamic semantic occupancy mapping from labelled scans with scene flow."""
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')


# ---------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------
@cli.command()
@click.argument('world_path', type=click.Path(dir_okay=False))
@click.argument('out_dir', type=click.Path(file_okay=False))
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None, help='Overrides the world seed.')
@click.option('--gt-resolution', type=float, default=None,
              help='Voxel-grid ground-truth resolution in meters [default: map resolution].')
@click.option('--gt-downsample', type=float, default=0.0, show_default=True,
              help='Voxel filter applied to ground-truth free samples (0 disables).')
@click.option('--binary', is_flag=True, help='Write DSMB1 binary scans.')
@config_option
@profile_option
@_report_errors
def simulate(world_path, out_dir, seed, gt_resolution, gt_downsample, binary, config_path, profile):
    """Render scans and ground truth of a world file into OUT_DIR."""
    spec = load_world(world_path)
    if seed is not None:
        spec = spec.with_changes(seed=seed)
    map_config, _ = _load_settings(config_path, profile)
    gt_resolution = gt_resolution or map_config.resolution
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise click.ClickException(f"{out_dir}: cannot create output directory ({e.strerror})")

    for t in range(spec.num_scans):
        frame = render_scan(spec, t)
        if frame is None:
            frame = TrainingFrame(t, spec.sensor.origin_at(t), [], [], [])
        write_scan(os.path.join(out_dir, scan_filename(t, binary)), frame, binary=binary)
        write_labels(os.path.join(out_dir, f"labels_{t:06d}.labels"), render_truth_labels(spec, t), t)
        write_gt(os.path.join(out_dir, f"gt_points_{t:06d}.gt"),
                 render_gt_points(spec, t, downsample=gt_downsample), spec.registry, t)
        write_gt(os.path.join(out_dir, f"gt_voxels_{t:06d}.gt"),
                 render_gt(spec, t, gt_resolution), spec.registry, t)
        logger.info(f"Rendered scan {t} with {len(frame)} returns")

    write_config_file(os.path.join(out_dir, 'map.env'), map_config, spec.registry)
    click.echo(f"Wrote {spec.num_scans} scans to {out_dir}")


# ---------------------------------------------------------------------
# map
# ---------------------------------------------------------------------
@cli.command('map')
@click.argument('scan_dir', type=click.Path(file_okay=False))
@click.argument('map_path', type=click.Path(dir_okay=False))
@config_option
@profile_option
@click.option('--no-bacc', is_flag=True, help='Zero moving-class flow before prediction.')
@click.option('--no-forc', is_flag=True, help='Zero free and static flow before prediction.')
@click.option('--static-baseline', is_flag=True, help='Skip the prediction step entirely.')
@click.option('--no-free-sampling', is_flag=True, help='Do not add free-space samples along rays.')
@click.option('--no-ego-comp', is_flag=True, help='Do not subtract the mean static flow.')
@click.option('--downsample', type=float, default=None, help='Input voxel filter in meters (0 disables).')
@click.option('--threads', type=click.IntRange(1, None), default=1, show_default=True,
              help='Worker threads for the kernel sums within each frame.')
@_report_errors
def map_command(scan_dir, map_path, config_path, profile, no_bacc, no_forc, static_baseline,
                no_free_sampling, no_ego_comp, downsample, threads):
    """Build a map from the scans in SCAN_DIR and export it to MAP_PATH."""
    map_config, registry = _load_settings(config_path, profile)
    if downsample is not None:
        try:
            map_config = dataclasses.replace(map_config, downsample_resolution=downsample)
        except ValueError as e:
            raise click.BadParameter(str(e), param_hint='--downsample')
    semantic_map = SemanticMap(map_config, registry)
    scans = list_scans(scan_dir)
    logger.info(f"Mapping {len(scans)} scans from {scan_dir}")

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else nullcontext()
    with pool as executor:
        for t, path in scans:
            frame = read_scan(path)
            if len(frame) == 0:
                logger.warning(f"Skipping empty scan {path}")
                continue
            try:
                step(
                    semantic_map, frame,
                    with_free_sampling=not no_free_sampling,
                    with_ego_compensation=not no_ego_comp,
                    bacc=not no_bacc,
                    forc=not no_forc,
                    static_baseline=static_baseline,
                    executor=executor,
                )
            except MappingError as e:
                raise click.ClickException(f"{path}: {e}") from None

    write_map(map_path, semantic_map)
    click.echo(f"Mapped {len(scans)} scans into {len(semantic_map)} voxels")


# ---------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------
@cli.command('eval')
@click.argument('map_path', type=click.Path(dir_okay=False))
@click.argument('gt_path', type=click.Path(dir_okay=False))
@click.argument('report_path', type=click.Path(dir_okay=False))
@click.option('--mode', type=click.Choice(['accuracy', 'completeness', 'segmentation']),
              default='accuracy', show_default=True)
@click.option('--scan', 'scan_path', type=click.Path(dir_okay=False), required=True,
              help='Scan that defines the visible set (or the scored points for segmentation).')
@click.option('--margin', type=float, default=None,
              help='Completeness margin in meters [default: map resolution].')
@click.option('--occluded-report', type=click.Path(dir_okay=False), default=None,
              help='Completeness only: where to write the occluded-part report.')
@click.option('--no-free-sampling', is_flag=True, help='Visible set from returns only.')
@config_option
@profile_option
@_report_errors
def eval_command(map_path, gt_path, report_path, mode, scan_path, margin, occluded_report,
                 no_free_sampling, config_path, profile):
    """Score MAP_PATH against GT_PATH and write a CSV report."""
    map_config, registry = _load_settings(config_path, profile)
    semantic_map = read_map(map_path, map_config)
    if not _same_registry(semantic_map.registry, registry):
        raise RegistryMismatchError(f"{map_path}: class registry differs from the configured one")
    frame = read_scan(scan_path)

    if mode == 'segmentation':
        label_time, labels = read_labels(gt_path)
        if label_time != frame.time_index:
            raise click.ClickException(
                f"{gt_path}: labels are for t={label_time}, scan {scan_path} is t={frame.time_index}"
            )
        report = segmentation_eval(semantic_map, frame, labels)
        write_report(report_path, report, registry)
        click.echo(f"segmentation mIoU {report.miou:.6f} over {report.evaluated} points")
        return

    gt, gt_registry = read_gt(gt_path)
    if not _same_registry(gt_registry, semantic_map.registry):
        raise RegistryMismatchError(f"{gt_path}: class registry differs from map {map_path}")
    visible = visible_set(semantic_map, frame, not no_free_sampling)

    if mode == 'accuracy':
        report = map_accuracy(semantic_map, visible, gt)
        write_report(report_path, report, registry)
        click.echo(f"accuracy mIoU {report.miou:.6f} over {report.evaluated} voxels")
    else:
        visible_report, occluded = map_completeness(semantic_map, visible, gt, margin=margin)
        write_report(report_path, visible_report, registry)
        if occluded_report:
            write_report(occluded_report, occluded, registry)
        click.echo(f"completeness mIoU {visible_report.miou:.6f} visible, {occluded.miou:.6f} occluded")


@cli.command()
def version():
    """Print the version."""
    click.echo(__version__)


if __name__ == '__main__':
    cli()
