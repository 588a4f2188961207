"""
Test cases for the file formats
Run with: pytest tests/test_map_io.py
"""
import struct

import numpy as np
import pytest

from evaluation import EvalReport, GroundTruthModel
from map_io import (
    FormatError,
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
from mapper import step
from models import MapConfig


@pytest.fixture
def sample_frame(make_frame):
    return make_frame(
        7,
        [[0.1, 0.2, 0.3], [1.0 / 3.0, -2.5, 1e-7]],
        [1, 2],
        [[0.0, 0.0, 0.0], [0.25, -0.125, 1.0 / 7.0]],
        origin=(0.5, -0.25, 1.0),
    )


@pytest.fixture
def built_map(make_map, make_frame):
    semantic_map = make_map()
    rng = np.random.default_rng(0)
    for t in range(3):
        frame = make_frame(t, rng.uniform(0.0, 0.6, (15, 3)), rng.integers(1, 3, 15),
                           rng.normal(scale=0.1, size=(15, 3)), origin=(-0.4, -0.4, -0.4))
        step(semantic_map, frame)
    return semantic_map


class TestScanFiles:
    """Test scan files"""

    def test_text_round_trip(self, tmp_path, sample_frame):
        """Test text scans preserve every double"""
        path = tmp_path / 'scan.scan'
        write_scan(str(path), sample_frame)
        frame = read_scan(str(path))
        assert frame.time_index == 7
        assert np.array_equal(frame.sensor_origin, sample_frame.sensor_origin)
        assert np.array_equal(frame.positions, sample_frame.positions)
        assert np.array_equal(frame.labels, sample_frame.labels)
        assert np.array_equal(frame.flows, sample_frame.flows)

    def test_text_header(self, tmp_path, sample_frame):
        """Test the header line"""
        path = tmp_path / 'scan.scan'
        write_scan(str(path), sample_frame)
        first = path.read_text().splitlines()[0]
        assert first == 'dsm-scan v1 t=7 origin=0.5 -0.25 1 n=2'

    def test_binary_round_trip(self, tmp_path, sample_frame):
        """Test binary scans keep float32 precision"""
        path = tmp_path / 'scan.dsmb'
        write_scan(str(path), sample_frame, binary=True)
        assert path.read_bytes()[:5] == b'DSMB1'
        frame = read_scan(str(path))
        assert frame.time_index == 7
        assert np.allclose(frame.positions, sample_frame.positions, rtol=1e-6, atol=1e-7)
        assert frame.labels.tolist() == [1, 2]
        assert np.allclose(frame.flows, sample_frame.flows, rtol=1e-6)

    def test_binary_layout(self, tmp_path, sample_frame):
        """Test the 64-bit header and 26-byte point records"""
        path = tmp_path / 'scan.dsmb'
        write_scan(str(path), sample_frame, binary=True)
        data = path.read_bytes()
        assert len(data) == 5 + 8 + 3 * 8 + 4 + 2 * 26
        t, ox, oy, oz, n = struct.unpack_from('<q3dI', data, 5)
        assert (t, ox, oy, oz, n) == (7, 0.5, -0.25, 1.0, 2)

    def test_empty_scan(self, tmp_path, make_frame):
        """Test a scan without points"""
        path = tmp_path / 'empty.scan'
        write_scan(str(path), make_frame(0, np.empty((0, 3)), []))
        assert len(read_scan(str(path))) == 0

    def test_bad_magic(self, tmp_path):
        """Test other files are rejected with their name"""
        path = tmp_path / 'x.scan'
        path.write_text('hello\n')
        with pytest.raises(FormatError) as excinfo:
            read_scan(str(path))
        assert 'x.scan' in str(excinfo.value)

    def test_row_count_mismatch(self, tmp_path):
        """Test the announced row count is enforced"""
        path = tmp_path / 'x.scan'
        path.write_text('dsm-scan v1 t=0 origin=0 0 0 n=2\n1 2 3 1 0 0 0\n')
        with pytest.raises(FormatError):
            read_scan(str(path))

    def test_short_row(self, tmp_path):
        """Test missing fields name the line"""
        path = tmp_path / 'x.scan'
        path.write_text('dsm-scan v1 t=0 origin=0 0 0 n=2\n1 2 3 1 0 0 0\n1 2 3 1 0\n')
        with pytest.raises(FormatError) as excinfo:
            read_scan(str(path))
        assert excinfo.value.line == 3

    def test_truncated_binary(self, tmp_path, sample_frame):
        """Test a cut binary body is rejected"""
        path = tmp_path / 'scan.dsmb'
        write_scan(str(path), sample_frame, binary=True)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_scan(str(path))


class TestListScans:
    """Test scan directory listing"""

    def test_sorted_by_time(self, tmp_path, make_frame):
        """Test scans come back in time order"""
        for t in (2, 0, 1):
            write_scan(str(tmp_path / scan_filename(t)), make_frame(t, [[0, 0, 0]], [1]))
        assert [t for t, _ in list_scans(str(tmp_path))] == [0, 1, 2]

    def test_empty_directory(self, tmp_path):
        """Test a directory without scans is an error"""
        with pytest.raises(FormatError):
            list_scans(str(tmp_path))

    def test_missing_frame(self, tmp_path, make_frame):
        """Test gaps in the time indices are reported"""
        for t in (0, 2):
            write_scan(str(tmp_path / scan_filename(t)), make_frame(t, [[0, 0, 0]], [1]))
        with pytest.raises(FormatError) as excinfo:
            list_scans(str(tmp_path))
        assert 't=1' in str(excinfo.value)

    def test_duplicate_time(self, tmp_path, make_frame):
        """Test two files with the same time index"""
        write_scan(str(tmp_path / 'a.scan'), make_frame(0, [[0, 0, 0]], [1]))
        write_scan(str(tmp_path / 'b.scan'), make_frame(0, [[0, 0, 0]], [1]))
        with pytest.raises(FormatError):
            list_scans(str(tmp_path))


class TestMapFiles:
    """Test map export and import"""

    def test_round_trip_is_byte_identical(self, tmp_path, built_map):
        """Test export, import, export gives the same bytes"""
        first = tmp_path / 'a.map'
        second = tmp_path / 'b.map'
        write_map(str(first), built_map)
        write_map(str(second), read_map(str(first), built_map.config))
        assert first.read_bytes() == second.read_bytes()

    def test_header_and_order(self, tmp_path, built_map):
        """Test the header and lexicographic voxel order"""
        path = tmp_path / 'a.map'
        write_map(str(path), built_map)
        lines = path.read_text().splitlines()
        assert lines[0] == 'dsm-map v1 resolution=0.10000000000000001 classes=3 free=0 dynamic=2 time=2'
        keys = [tuple(int(v) for v in line.split()[:3]) for line in lines[1:]]
        assert keys == sorted(keys)
        assert len(keys) == len(built_map)

    def test_import_restores_state(self, tmp_path, built_map):
        """Test alphas, flows and time survive the round trip"""
        path = tmp_path / 'a.map'
        write_map(str(path), built_map)
        loaded = read_map(str(path))
        assert loaded.current_time == 2
        assert loaded.registry.dynamic_classes == frozenset({2})
        for key, state in built_map.voxels.items():
            assert np.array_equal(loaded.voxels[key].alpha, state.alpha)
            assert np.array_equal(loaded.voxels[key].voxel_flow, state.voxel_flow)

    def test_resolution_mismatch(self, tmp_path, built_map):
        """Test a config of another resolution is rejected"""
        path = tmp_path / 'a.map'
        write_map(str(path), built_map)
        with pytest.raises(FormatError):
            read_map(str(path), MapConfig(resolution=0.2))

    def test_empty_map(self, tmp_path, make_map):
        """Test a map without voxels"""
        path = tmp_path / 'empty.map'
        write_map(str(path), make_map())
        assert len(read_map(str(path))) == 0

    def test_non_positive_alpha(self, tmp_path):
        """Test invalid states are rejected"""
        path = tmp_path / 'bad.map'
        path.write_text('dsm-map v1 resolution=0.1 classes=2 free=0 dynamic= time=0\n0 0 0 0 1 0 0\n')
        with pytest.raises(FormatError):
            read_map(str(path))

    def test_bad_registry(self, tmp_path):
        """Test an invalid registry header"""
        path = tmp_path / 'bad.map'
        path.write_text('dsm-map v1 resolution=0.1 classes=2 free=0 dynamic=0 time=0\n')
        with pytest.raises(FormatError):
            read_map(str(path))


class TestGroundTruthFiles:
    """Test ground-truth and label files"""

    def test_point_set_round_trip(self, tmp_path, registry):
        """Test point-set ground truth"""
        gt = GroundTruthModel.point_set([[0.1, 0.2, 0.3], [1.0 / 3.0, 0.0, -1.0]], [0, 2])
        path = tmp_path / 'gt.gt'
        write_gt(str(path), gt, registry, 4)
        loaded, loaded_registry = read_gt(str(path))
        assert np.array_equal(loaded.positions, gt.positions)
        assert loaded.labels.tolist() == [0, 2]
        assert loaded_registry.dynamic_classes == registry.dynamic_classes

    def test_voxel_grid_round_trip(self, tmp_path, registry):
        """Test voxel-grid ground truth"""
        gt = GroundTruthModel.voxel_grid([[0, 0, 0], [-3, 4, 5]], [1, 0], 0.05)
        path = tmp_path / 'gt.gt'
        write_gt(str(path), gt, registry, 0)
        loaded, _ = read_gt(str(path))
        assert loaded.mode == 'voxel-grid'
        assert loaded.resolution == 0.05
        assert loaded.keys.tolist() == [[0, 0, 0], [-3, 4, 5]]

    def test_labels_out_of_range(self, tmp_path):
        """Test labels outside the header registry"""
        path = tmp_path / 'gt.gt'
        path.write_text('dsm-gt v1 mode=point-set classes=2 free=0 dynamic= t=0 n=1\n0 0 0 5\n')
        with pytest.raises(FormatError):
            read_gt(str(path))

    def test_unknown_mode(self, tmp_path):
        """Test an unknown representation"""
        path = tmp_path / 'gt.gt'
        path.write_text('dsm-gt v1 mode=mesh classes=2 free=0 dynamic= t=0 n=0\n')
        with pytest.raises(FormatError):
            read_gt(str(path))

    def test_labels_round_trip(self, tmp_path):
        """Test truth-label files"""
        path = tmp_path / 'x.labels'
        write_labels(str(path), [3, 1, 0], 12)
        t, labels = read_labels(str(path))
        assert t == 12
        assert labels.tolist() == [3, 1, 0]


class TestReportFiles:
    """Test CSV reports"""

    def test_csv_layout(self, tmp_path, registry):
        """Test header, empty fields and mean row"""
        path = tmp_path / 'report.csv'
        write_report(str(path), EvalReport.from_labels([1, 2], [1, 1], 3), registry)
        lines = path.read_text().splitlines()
        assert lines[0] == 'class,tp,fp,fn,precision,recall,iou'
        assert lines[1] == 'free,0,0,0,,,'
        assert lines[2] == 'ground,1,1,0,0.5,1,0.5'
        assert lines[3] == 'cube,0,0,1,,0,0'
        assert lines[4] == '__mean__,1,1,1,0.5,0.5,0.25'
