"""
Configuration Settings for the Dynamic Semantic Mapper
======================================================
This file contains all configuration settings for the mapping engine.
Different profiles can be used for ablation runs, outdoor LiDAR data, the
moving-cube room (the default) and testing.

Every class attribute may be overridden with an environment variable prefixed
with ``DSM_`` (for example ``DSM_RESOLUTION=0.1``). A ``.env`` file in the
working directory is honoured. Config files handed to the CLI use the same
``KEY=VALUE`` syntax.
"""

import logging
import os

from dotenv import dotenv_values, load_dotenv

from kernels import KernelParams
from models import ClassRegistry, MapConfig

logger = logging.getLogger(__name__)

load_dotenv()

ENV_PREFIX = 'DSM_'


class ConfigError(ValueError):
    """Raised when a config file or environment override is invalid."""

    def __init__(self, message, path=None, key=None):
        self.path = path
        self.key = key
        where = f"{path}: " if path else ''
        field = f"{key}: " if key else ''
        super().__init__(f"{where}{field}{message}")


class Config:
    """
    Base configuration: the small-scale ablation profile.
    """

    # Map settings
    RESOLUTION = 0.05
    PRIOR_ALPHA = 0.001
    FILTER_LAMBDA = 0.5
    FLOW_FLOOR = 1e-3
    FREE_SAMPLE_INTERVAL = 0.5
    DOWNSAMPLE_RESOLUTION = 0.0  # 0 disables input downsampling

    # Kernel settings
    L_S = 0.15
    SIGMA_S = 0.2
    L1 = 0.2
    SIGMA1 = 50.0
    L_FREE = None  # None means "same as L1"
    SIGMA_FREE = None

    # Class registry (free, floor, wall, moving object)
    NUM_CLASSES = 4
    FREE_CLASS = 0
    DYNAMIC_CLASSES = (3,)


class KittiConfig(Config):
    """
    Outdoor LiDAR profile with long flow kernels.
    The free-space sampling interval stays at the base value.
    """
    RESOLUTION = 0.1
    L_S = 0.1
    L1 = 2.5
    SIGMA1 = 100.0


class RoomConfig(KittiConfig):
    """
    Moving-cube room profile, the CLI default.
    Free space is sampled once per voxel so every voxel a ray crosses is touched.
    """
    FREE_SAMPLE_INTERVAL = 0.1


class TestingConfig(Config):
    """
    Coarse profile used by the unit tests.
    """
    RESOLUTION = 0.1
    L_S = 0.1
    SIGMA_S = 1.0
    L1 = 0.2
    SIGMA1 = 50.0
    FREE_SAMPLE_INTERVAL = 0.05


# Configuration dictionary for easy access
config = {
    'ablation': Config,
    'kitti': KittiConfig,
    'room': RoomConfig,
    'testing': TestingConfig,
    'default': RoomConfig
}

_FLOAT_KEYS = {
    'RESOLUTION', 'PRIOR_ALPHA', 'FILTER_LAMBDA', 'FLOW_FLOOR', 'FREE_SAMPLE_INTERVAL',
    'DOWNSAMPLE_RESOLUTION', 'L_S', 'SIGMA_S', 'L1', 'SIGMA1', 'L_FREE', 'SIGMA_FREE',
}
_INT_KEYS = {'NUM_CLASSES', 'FREE_CLASS'}
_LIST_KEYS = {'DYNAMIC_CLASSES'}
KNOWN_KEYS = _FLOAT_KEYS | _INT_KEYS | _LIST_KEYS


def _parse_value(key, raw, path=None):
    """Convert one raw string setting to its typed value."""
    if raw is None or str(raw).strip() == '':
        return None
    text = str(raw).strip()
    try:
        if key in _FLOAT_KEYS:
            return float(text)
        if key in _INT_KEYS:
            return int(text)
        return tuple(int(part) for part in text.split(',') if part.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {text!r}", path=path, key=key) from None


def profile_values(name='default'):
    """
    Collect the settings of a named profile, with environment overrides applied.

    Args:
        name: key into the ``config`` dictionary

    Returns:
        dict of upper-case setting name to typed value
    """
    if name not in config:
        raise ConfigError(f"unknown profile {name!r} (choose from {', '.join(sorted(config))})")
    profile = config[name]
    values = {key: getattr(profile, key) for key in KNOWN_KEYS}
    for key in KNOWN_KEYS:
        env_value = os.environ.get(ENV_PREFIX + key)
        if env_value is not None:
            values[key] = _parse_value(key, env_value, path='environment')
    return values


def load_config_file(path):
    """
    Read a ``KEY=VALUE`` config file on top of its base profile.

    The optional ``PROFILE`` key picks the base profile; every other key must
    be a known setting.

    Args:
        path: config file path

    Returns:
        tuple of (MapConfig, ClassRegistry)
    """
    if not os.path.isfile(path):
        raise ConfigError('config file does not exist', path=path)
    raw = dotenv_values(path)
    profile = (raw.pop('PROFILE', None) or 'default').strip()
    values = profile_values(profile)
    for key, text in raw.items():
        key = key.upper()
        if key not in KNOWN_KEYS:
            raise ConfigError('unknown setting', path=path, key=key)
        values[key] = _parse_value(key, text, path=path)
    logger.debug(f"Loaded config {path} on profile {profile}")
    return build_map_config(values, path=path), build_registry(values, path=path)


def build_map_config(values, path=None):
    """
    Build a validated MapConfig from a settings dictionary.
    """
    try:
        params = KernelParams(
            l_s=values['L_S'],
            sigma_s=values['SIGMA_S'],
            l1=values['L1'],
            sigma1=values['SIGMA1'],
            l_free=values.get('L_FREE'),
            sigma_free=values.get('SIGMA_FREE'),
        )
        return MapConfig(
            resolution=values['RESOLUTION'],
            prior_alpha=values['PRIOR_ALPHA'],
            kernel_params=params,
            filter_lambda=values['FILTER_LAMBDA'],
            flow_floor=values['FLOW_FLOOR'],
            free_sample_interval=values['FREE_SAMPLE_INTERVAL'],
            downsample_resolution=values.get('DOWNSAMPLE_RESOLUTION') or 0.0,
        )
    except ValueError as e:
        raise ConfigError(str(e), path=path) from None


def build_registry(values, path=None):
    """
    Build a validated ClassRegistry from a settings dictionary.
    """
    try:
        return ClassRegistry(
            num_classes=values['NUM_CLASSES'],
            free_class=values['FREE_CLASS'],
            dynamic_classes=frozenset(values['DYNAMIC_CLASSES'] or ()),
        )
    except ValueError as e:
        raise ConfigError(str(e), path=path) from None


def write_config_file(path, map_config, registry):
    """Write a config file that ``load_config_file`` reads back unchanged."""
    params = map_config.kernel_params
    lines = [
        f"RESOLUTION={map_config.resolution!r}",
        f"PRIOR_ALPHA={map_config.prior_alpha!r}",
        f"FILTER_LAMBDA={map_config.filter_lambda!r}",
        f"FLOW_FLOOR={map_config.flow_floor!r}",
        f"FREE_SAMPLE_INTERVAL={map_config.free_sample_interval!r}",
        f"DOWNSAMPLE_RESOLUTION={map_config.downsample_resolution!r}",
        f"L_S={params.l_s!r}",
        f"SIGMA_S={params.sigma_s!r}",
        f"L1={params.l1!r}",
        f"SIGMA1={params.sigma1!r}",
        f"L_FREE={params.l_free!r}",
        f"SIGMA_FREE={params.sigma_free!r}",
        f"NUM_CLASSES={registry.num_classes}",
        f"FREE_CLASS={registry.free_class}",
        f"DYNAMIC_CLASSES={','.join(str(q) for q in sorted(registry.dynamic_classes))}",
    ]
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write('\n'.join(lines) + '\n')


def default_map_config(name='default'):
    """MapConfig and ClassRegistry of a named profile."""
    values = profile_values(name)
    return build_map_config(values), build_registry(values)
