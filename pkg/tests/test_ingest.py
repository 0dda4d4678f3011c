"""Tests for feeder files, trace CSVs and basis tables"""
import numpy as np
import pytest

from src.errors import FormatError, TopologyError
from src.grid import bundled_feeder_path
from src.ingest import (base_impedance, load_feeder_file, read_basis_table, read_trace_csv, write_basis_table,
                        write_trace_csv)


def test_bundled_ieee33():
    topology = load_feeder_file(bundled_feeder_path())
    assert topology.bus_count == 32
    assert len(topology.lines) == 32
    assert topology.base_power == 100.0
    assert topology.base_voltage == 12.66


def test_ohms_converted_to_per_unit(tmp_path):
    path = tmp_path / 'feeder.txt'
    path.write_text("# two buses\nbuses=2 base_kva=100 base_kv=10\n0 1 2.0 4.0\n1 2 1.0 1.0\n")
    topology = load_feeder_file(path)
    z_base = base_impedance(100, 10)
    assert z_base == pytest.approx(1000.0)
    assert topology.lines[0].r == pytest.approx(0.002)
    assert topology.lines[0].x == pytest.approx(0.004)


def test_duplicate_line_is_a_cycle(tmp_path):
    path = tmp_path / 'feeder.txt'
    path.write_text("buses=2 base_kva=100 base_kv=10\n0 1 1 1\n0 1 1 1\n")
    with pytest.raises(TopologyError):
        load_feeder_file(path)


def test_empty_feeder_file(tmp_path):
    path = tmp_path / 'empty.txt'
    path.write_text("")
    with pytest.raises(FormatError):
        load_feeder_file(path)


def test_bad_row_reports_line(tmp_path):
    path = tmp_path / 'feeder.txt'
    path.write_text("buses=1 base_kva=100 base_kv=10\n0 1 abc 1\n")
    with pytest.raises(FormatError) as excinfo:
        load_feeder_file(path)
    assert excinfo.value.line == 2


def test_missing_header(tmp_path):
    path = tmp_path / 'feeder.txt'
    path.write_text("0 1 1 1\n")
    with pytest.raises(FormatError) as excinfo:
        load_feeder_file(path)
    assert excinfo.value.line == 1


def test_missing_feeder_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_feeder_file(tmp_path / 'nope.txt')


def test_trace_csv_write_then_read(tmp_path):
    p = np.array([[0.5, 1.0], [0.6, 0.9], [0.7, 0.8]])
    path = tmp_path / 'trace.csv'
    write_trace_csv(path, p, header_lines=['seed=4'])
    assert path.read_text().startswith('# seed=4\nbus_1,bus_2\n')
    np.testing.assert_array_equal(read_trace_csv(path), p)


def test_trace_and_basis_files_are_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    p = rng.uniform(0.3, 1.7, (200, 3)) + np.cumsum(rng.normal(scale=1e-3, size=(200, 3)), axis=0)
    write_trace_csv(tmp_path / 'trace.csv', p)
    np.testing.assert_array_equal(read_trace_csv(tmp_path / 'trace.csv'), p)

    phi = np.sin(rng.uniform(0.0, np.pi, (50, 2, 1)) * np.arange(50)[:, None, None])
    write_basis_table(tmp_path / 'basis.csv', phi, (1, 1))
    loaded, dims = read_basis_table(tmp_path / 'basis.csv')
    assert dims == (1, 1)
    np.testing.assert_array_equal(loaded, phi)



def test_ragged_trace(tmp_path):
    path = tmp_path / 'trace.csv'
    path.write_text("bus_1,bus_2\n0.1,0.2\n0.3\n")
    with pytest.raises(FormatError):
        read_trace_csv(path)


def test_short_trace(tmp_path):
    path = tmp_path / 'trace.csv'
    path.write_text("bus_1\n0.1\n")
    with pytest.raises(FormatError):
        read_trace_csv(path)


def test_non_numeric_trace(tmp_path):
    path = tmp_path / 'trace.csv'
    path.write_text("bus_1\n0.1\nhigh\n")
    with pytest.raises(FormatError):
        read_trace_csv(path)


def test_basis_table_dims_and_padding(tmp_path):
    path = tmp_path / 'basis.csv'
    path.write_text("bus_1_0,bus_1_1,bus_2_0\n1,2,3\n4,5,6\n")
    phi, dims = read_basis_table(path, bus_count=2)
    assert dims == (2, 1)
    assert phi.shape == (2, 2, 2)
    np.testing.assert_array_equal(phi[1], [[4, 5], [6, 0]])


def test_basis_table_bad_column(tmp_path):
    path = tmp_path / 'basis.csv'
    path.write_text("bus_1_0,load\n1,2\n")
    with pytest.raises(FormatError):
        read_basis_table(path)


def test_basis_table_missing_bus(tmp_path):
    path = tmp_path / 'basis.csv'
    path.write_text("bus_1_0\n1\n")
    with pytest.raises(FormatError):
        read_basis_table(path, bus_count=2)


def test_written_basis_table_reads_back(tmp_path):
    phi = np.zeros((3, 2, 2))
    phi[:, 0, :] = [[1, 2], [3, 4], [5, 6]]
    phi[:, 1, 0] = [7, 8, 9]
    path = tmp_path / 'basis.csv'
    write_basis_table(path, phi, (2, 1))
    values, dims = read_basis_table(path, bus_count=2)
    assert dims == (2, 1)
    np.testing.assert_array_equal(values, phi)
