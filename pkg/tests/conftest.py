"""
Test configuration and fixtures for the Dynamic Semantic Mapper
"""
import numpy as np
import pytest
from click.testing import CliRunner

from kernels import KernelParams
from mapper import SemanticMap
from models import ClassRegistry, MapConfig, TrainingFrame
from simworld import Box, MovingBody, SensorSpec, WorldSpec


@pytest.fixture
def registry():
    """free, ground, cube (moving)"""
    return ClassRegistry(3, free_class=0, dynamic_classes=frozenset({2}), names=('free', 'ground', 'cube'))


@pytest.fixture
def static_registry():
    """Four classes, none moving"""
    return ClassRegistry(4, free_class=0)


@pytest.fixture
def kernel_params():
    return KernelParams(l_s=0.1, sigma_s=1.0, l1=0.2, sigma1=50.0)


@pytest.fixture
def map_config(kernel_params):
    """Coarse 0.1 m map used across the unit tests"""
    return MapConfig(
        resolution=0.1,
        prior_alpha=0.001,
        kernel_params=kernel_params,
        filter_lambda=0.5,
        flow_floor=1e-3,
        free_sample_interval=0.05,
    )


@pytest.fixture
def make_map(map_config, registry):
    """Factory for empty maps"""
    def _make(config=None, reg=None):
        return SemanticMap(config or map_config, reg or registry)
    return _make


@pytest.fixture
def make_frame():
    """Factory for frames from plain lists"""
    def _make(t, positions, labels, flows=None, origin=(0.0, 0.0, 0.0)):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if flows is None:
            flows = np.zeros_like(positions)
        return TrainingFrame(t, origin, positions, labels, flows)
    return _make


@pytest.fixture
def tiny_world(registry):
    """3-scan world: ground slab and one cube sliding along +x"""
    ground = Box((-2.0, -2.0, -0.1), (2.0, 2.0, 0.0), 1)
    cube = MovingBody((0.4, 0.4, 0.4), 2, ((0.0, (0.5, 0.0, 0.2)), (2.0, (0.9, 0.0, 0.2))))
    sensor = SensorSpec(origins=((0.0, (-1.0, 0.0, 0.5)),), azimuth=(-30.0, 30.0, 24),
                        elevation=(-40.0, 0.0, 9), max_range=5.0)
    return WorldSpec(registry=registry, sensor=sensor, static_boxes=(ground,), bodies=(cube,),
                     num_scans=3, free_interval=0.1)


@pytest.fixture
def runner():
    """Create test CLI runner"""
    return CliRunner()
