"""
Test cases for scene-flow aggregation
Run with: pytest tests/test_scene_flow.py
"""
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from kernels import KernelParams
from models import (
    ClassRegistry,
    EgoCompensationError,
    MapConfig,
    VoxelKey,
    VoxelState,
    keys_of,
    pack_keys,
    unpack_keys,
)
from scene_flow import aggregate_flow, aggregate_flow_batch, ego_compensate, temporal_filter


@pytest.fixture
def unit_config():
    """sigma1 = 1, no filtering memory"""
    return MapConfig(resolution=0.1, kernel_params=KernelParams(l_s=0.1, sigma_s=1.0, l1=0.2, sigma1=1.0),
                     filter_lambda=1.0)


def zero_state(k=3):
    return VoxelState.prior(k, 0.001)


def batch_over_active(frame, config, registry, prev=None):
    """Run the batch aggregation over every voxel holding a point"""
    codes = np.unique(pack_keys(keys_of(frame.positions, config.resolution)))

    def lookup(query):
        pos = np.minimum(np.searchsorted(codes, query), len(codes) - 1)
        return np.where(codes[pos] == query, pos, -1)

    keys = unpack_keys(codes)
    if prev is None:
        prev = np.zeros((len(codes), registry.num_classes))
    return keys, aggregate_flow_batch(frame, keys, lookup, prev, config, registry)


class TestEgoCompensate:
    """Test ego_compensate"""

    def test_single_static_point(self, registry, make_frame):
        """Test flows [(1,0,0) static, (3,0,0) moving] -> [(0,0,0), (2,0,0)]"""
        frame = make_frame(0, [[0, 0, 0], [1, 1, 1]], [1, 2], [[1, 0, 0], [3, 0, 0]])
        out = ego_compensate(frame, registry)
        assert out.flows.tolist() == [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]

    def test_all_static_equal(self, registry, make_frame):
        """Test equal static flows vanish"""
        frame = make_frame(0, np.zeros((3, 3)), [1, 1, 1], [[0.3, -0.2, 0.1]] * 3)
        assert np.allclose(ego_compensate(frame, registry).flows, 0.0, atol=1e-12)

    def test_zero_mean_unchanged(self, registry, make_frame):
        """Test zero-mean static flow leaves flows as they were"""
        flows = [[1, 0, 0], [-1, 0, 0], [5, 0, 0]]
        frame = make_frame(0, np.zeros((3, 3)), [1, 1, 2], flows)
        assert ego_compensate(frame, registry).flows.tolist() == np.asarray(flows, dtype=float).tolist()

    def test_free_points_ignored(self, registry, make_frame):
        """Test free-labelled points do not enter the mean"""
        frame = make_frame(0, np.zeros((2, 3)), [0, 1], [[0, 0, 0], [2, 0, 0]])
        assert ego_compensate(frame, registry).flows[0].tolist() == [-2.0, 0.0, 0.0]

    def test_idempotent(self, registry, make_frame):
        """Test compensating twice equals compensating once"""
        rng = np.random.default_rng(11)
        frame = make_frame(0, rng.random((20, 3)), rng.integers(0, 3, 20), rng.normal(size=(20, 3)))
        if not np.any(frame.labels == 1):
            frame = frame.extended([[0, 0, 0]], [1], [[0.5, 0, 0]])
        once = ego_compensate(frame, registry)
        twice = ego_compensate(once, registry)
        assert np.allclose(once.flows, twice.flows, atol=1e-12)

    def test_no_static_points(self, registry, make_frame):
        """Test compensation is undefined without static points"""
        with pytest.raises(EgoCompensationError):
            ego_compensate(make_frame(0, np.zeros((2, 3)), [0, 2]), registry)


class TestTemporalFilter:
    """Test temporal_filter"""

    def test_examples(self):
        """Test the moving average"""
        assert temporal_filter(2.0, 0.0, 0.5) == 1.0
        assert temporal_filter(0.0, 4.0, 0.25) == 3.0
        for lam in (0.1, 0.5, 1.0):
            assert temporal_filter(1.7, 1.7, lam) == pytest.approx(1.7)

    @pytest.mark.parametrize('lam', [0.0, -0.5, 1.01])
    def test_lambda_range(self, lam):
        """Test lambda outside (0, 1] raises"""
        with pytest.raises(ValueError):
            temporal_filter(1.0, 1.0, lam)

    def test_negative_inputs(self):
        """Test negative flows raise"""
        with pytest.raises(ValueError):
            temporal_filter(-1.0, 0.0, 0.5)


class TestAggregateFlow:
    """Test the single-voxel reference aggregation"""

    def test_single_point_at_center(self, registry, unit_config, make_frame):
        """Test one moving point at the centre with |u| = 1"""
        frame = make_frame(0, [[0.05, 0.05, 0.05]], [2], [[0.6, 0.8, 0.0]])
        flow = aggregate_flow(frame, VoxelKey(0, 0, 0), zero_state(), unit_config, registry)
        assert flow == pytest.approx([1.0, 1.0, 1.0])

    def test_no_moving_points(self, registry, unit_config, make_frame):
        """Test static neighbourhoods give zero flow"""
        frame = make_frame(0, [[0.05, 0.05, 0.05], [0.15, 0.05, 0.05]], [1, 0], [[1, 0, 0], [0, 0, 0]])
        flow = aggregate_flow(frame, VoxelKey(0, 0, 0), zero_state(), unit_config, registry)
        assert flow.tolist() == [0.0, 0.0, 0.0]

    def test_symmetric_pair(self, registry, unit_config, make_frame):
        """Test two points at l1/2 on either side with |u| = 2 give 1/3"""
        frame = make_frame(0, [[-0.05, 0.05, 0.05], [0.15, 0.05, 0.05]], [2, 2], [[2, 0, 0], [0, 0, 2]])
        flow = aggregate_flow(frame, VoxelKey(0, 0, 0), zero_state(), unit_config, registry)
        assert flow[2] == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert flow[0] == flow[1] == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_class_isolation(self, unit_config, make_frame):
        """Test a moving class only feeds its own component"""
        reg = ClassRegistry(4, free_class=0, dynamic_classes={2, 3})
        frame = make_frame(0, [[0.05, 0.05, 0.05]], [3], [[1, 0, 0]])
        flow = aggregate_flow(frame, VoxelKey(0, 0, 0), zero_state(4), unit_config, reg)
        assert flow[2] == 0.0
        assert flow[3] == pytest.approx(1.0)
        assert flow[0] == flow[1] == pytest.approx(1.0)

    def test_homogeneity(self, registry, unit_config, make_frame):
        """Test scaling every flow by c scales the result by c"""
        rng = np.random.default_rng(5)
        positions = rng.uniform(-0.1, 0.2, size=(30, 3))
        labels = rng.integers(0, 3, 30)
        flows = rng.normal(size=(30, 3))
        key = VoxelKey(0, 0, 0)
        base = aggregate_flow(make_frame(0, positions, labels, flows), key, zero_state(), unit_config, registry)
        scaled = aggregate_flow(make_frame(0, positions, labels, 3.0 * flows), key, zero_state(), unit_config, registry)
        assert np.allclose(scaled, 3.0 * base, rtol=1e-12, atol=1e-15)

    def test_far_points_ignored(self, registry, unit_config, make_frame):
        """Test points outside the 7-voxel neighbourhood are not counted"""
        near = make_frame(0, [[0.05, 0.05, 0.05]], [2], [[1, 0, 0]])
        far = near.extended([[0.55, 0.05, 0.05]], [1], [[0, 0, 0]])
        key = VoxelKey(0, 0, 0)
        assert np.array_equal(aggregate_flow(near, key, zero_state(), unit_config, registry),
                              aggregate_flow(far, key, zero_state(), unit_config, registry))

    def test_empty_neighbourhood_decays_previous(self, registry, make_frame):
        """Test N = 0 leaves only the filtered previous flow"""
        config = MapConfig(resolution=0.1, kernel_params=KernelParams(l_s=0.1, l1=0.2), filter_lambda=0.5)
        prev = VoxelState([1.0, 1.0, 1.0], [0.4, 0.4, 2.0])
        frame = make_frame(0, [[5.0, 5.0, 5.0]], [1])
        flow = aggregate_flow(frame, VoxelKey(0, 0, 0), prev, config, registry)
        assert flow.tolist() == pytest.approx([0.2, 0.2, 1.0])

    def test_static_copies_free(self, registry, make_frame):
        """Test static components equal the free component"""
        config = MapConfig(resolution=0.1, kernel_params=KernelParams(l_s=0.1, l1=0.2, l_free=0.3, sigma_free=4.0))
        rng = np.random.default_rng(2)
        frame = make_frame(0, rng.uniform(-0.1, 0.2, (40, 3)), rng.integers(0, 3, 40), rng.normal(size=(40, 3)))
        flow = aggregate_flow(frame, VoxelKey(0, 0, 0), VoxelState([1, 1, 1], [0.1, 0.5, 0.9]), config, registry)
        assert flow[1] == flow[0]


class TestAggregateFlowBatch:
    """Test the vectorised aggregation against the reference"""

    @pytest.mark.parametrize('seed', range(5))
    def test_matches_reference(self, registry, map_config, make_frame, seed):
        """Test batch and single-voxel results agree on random frames"""
        rng = np.random.default_rng(seed)
        n = 60
        frame = make_frame(seed, rng.uniform(-0.2, 0.3, (n, 3)), rng.integers(0, 3, n), rng.normal(size=(n, 3)))
        keys, batch = batch_over_active(frame, map_config, registry)
        for key, row in zip(keys, batch):
            single = aggregate_flow(frame, VoxelKey(*key), zero_state(), map_config, registry)
            assert np.allclose(row, single, rtol=1e-12, atol=1e-14)

    def test_pooling_equals_sum_when_kernels_match(self, make_frame):
        """Test the free component pools every moving class"""
        reg = ClassRegistry(4, free_class=0, dynamic_classes={2, 3})
        config = MapConfig(resolution=0.1, kernel_params=KernelParams(l_s=0.1, l1=0.2, sigma1=3.0), filter_lambda=1.0)
        rng = np.random.default_rng(9)
        frame = make_frame(0, rng.uniform(0.0, 0.3, (50, 3)), rng.integers(0, 4, 50), rng.normal(size=(50, 3)))
        _, flow = batch_over_active(frame, config, reg)
        assert np.allclose(flow[:, 0], flow[:, 2] + flow[:, 3], rtol=1e-12, atol=1e-14)

    def test_executor_gives_identical_result(self, registry, map_config, make_frame):
        """Test threaded accumulation matches the serial one exactly"""
        rng = np.random.default_rng(4)
        frame = make_frame(0, rng.uniform(0.0, 0.5, (200, 3)), rng.integers(0, 3, 200), rng.normal(size=(200, 3)))
        codes = np.unique(pack_keys(keys_of(frame.positions, map_config.resolution)))

        def lookup(query):
            pos = np.minimum(np.searchsorted(codes, query), len(codes) - 1)
            return np.where(codes[pos] == query, pos, -1)

        prev = np.zeros((len(codes), 3))
        serial = aggregate_flow_batch(frame, unpack_keys(codes), lookup, prev, map_config, registry)
        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = aggregate_flow_batch(frame, unpack_keys(codes), lookup, prev, map_config, registry, pool)
        assert np.array_equal(serial, threaded)
