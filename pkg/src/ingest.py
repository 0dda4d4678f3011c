"""Read feeder line lists, load traces and tabulated basis files"""
import re
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import FormatError
from .grid import FeederTopology, Line

HEADER_PATTERN = re.compile(r'^buses=(\S+)\s+base_kva=(\S+)\s+base_kv=(\S+)$')
BASIS_COLUMN_PATTERN = re.compile(r'^bus_(\d+)_(\d+)$')


def base_impedance(base_power_kva: float, base_voltage_kv: float) -> float:
    """Impedance base in ohms: kV^2 / MVA"""
    return base_voltage_kv ** 2 / (base_power_kva / 1000.0)


def _parse_number(token: str, line_no: int, what: str, cast=float):
    try:
        return cast(token)
    except ValueError:
        raise FormatError(f"{what} is not a number: {token!r}", line=line_no)


def load_feeder_file(path) -> FeederTopology:
    """
    Load a radial feeder from a plain-text line list.

    Format:
        # comment lines
        buses=<n> base_kva=<v> base_kv=<v>
        <from_bus> <to_bus> <r_ohm> <x_ohm>
        ...

    Ohmic values are converted to p.u. on the declared bases.

    Returns:
        FeederTopology (validated)

    Raises:
        FileNotFoundError: path does not exist
        FormatError: missing header, malformed row (with line number), or empty file
        TopologyError: rows parse but do not form a valid radial feeder
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Feeder file not found: {path}")

    header = None
    rows: List[Tuple[int, int, float, float]] = []

    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text or text.startswith('#'):
                continue

            if header is None:
                match = HEADER_PATTERN.match(text)
                if not match:
                    raise FormatError("expected header 'buses=<n> base_kva=<v> base_kv=<v>'", line=line_no)
                header = (
                    _parse_number(match.group(1), line_no, 'buses', int),
                    _parse_number(match.group(2), line_no, 'base_kva'),
                    _parse_number(match.group(3), line_no, 'base_kv'),
                )
                if header[1] <= 0 or header[2] <= 0:
                    raise FormatError("base_kva and base_kv must be positive", line=line_no)
                continue

            fields = text.split()
            if len(fields) != 4:
                raise FormatError(f"expected 'from_bus to_bus r_ohm x_ohm', got {len(fields)} fields", line=line_no)
            rows.append((
                _parse_number(fields[0], line_no, 'from_bus', int),
                _parse_number(fields[1], line_no, 'to_bus', int),
                _parse_number(fields[2], line_no, 'r_ohm'),
                _parse_number(fields[3], line_no, 'x_ohm'),
            ))

    if header is None:
        raise FormatError(f"feeder file is empty: {path}")
    if not rows:
        raise FormatError(f"feeder file has no lines: {path}")

    bus_count, base_kva, base_kv = header
    z_base = base_impedance(base_kva, base_kv)
    lines = tuple(Line(f, t, r / z_base, x / z_base) for f, t, r, x in rows)
    return FeederTopology(bus_count=bus_count, lines=lines, base_power=base_kva, base_voltage=base_kv)


def _check_rectangular(path: Path):
    """Every data row must have as many fields as the header"""
    width = None
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text or text.startswith('#'):
                continue
            fields = len(text.split(','))
            if width is None:
                width = fields
            elif fields != width:
                raise FormatError(f"expected {width} fields, got {fields} (ragged CSV)", line=line_no)


def _read_numeric_csv(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    _check_rectangular(path)
    try:
        frame = pd.read_csv(path, comment='#', float_precision='round_trip')
    except pd.errors.EmptyDataError:
        raise FormatError(f"CSV file is empty: {path}")
    except pd.errors.ParserError as e:
        raise FormatError(f"ragged CSV {path}: {e}")

    if frame.isna().any().any():
        bad_row = int(np.where(frame.isna().any(axis=1))[0][0])
        raise FormatError(f"data row {bad_row + 1} has missing values")
    try:
        return frame.astype(float)
    except ValueError as e:
        raise FormatError(f"non-numeric value in {path}: {e}")


def read_trace_csv(path) -> np.ndarray:
    """
    Read a net-load trace: header bus_1..bus_n, one row per time step.

    Returns:
        (rows, n) array of p.u. injections

    Raises:
        FormatError: ragged rows, non-numeric values, or fewer than 2 rows
    """
    path = Path(path)
    frame = _read_numeric_csv(path)
    if len(frame) < 2:
        raise FormatError(f"trace needs at least 2 rows, got {len(frame)}: {path}")
    return frame.to_numpy()


def write_trace_csv(path, p: np.ndarray, header_lines: Sequence[str] = ()):
    """Write a (rows, n) injection series in the trace format"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    frame = pd.DataFrame(p, columns=[f"bus_{i + 1}" for i in range(p.shape[1])])
    with open(path, 'w', encoding='utf-8', newline='') as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        frame.to_csv(f, index=False, float_format='%.17g')


def read_basis_table(path, bus_count: Optional[int] = None) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Read tabulated basis values: columns bus_<i>_<k> (bus i from 1, component k from 0).

    Returns:
        (phi, dims) with phi of shape (rows, n, m_max), zero-padded past each dims[i]
    """
    path = Path(path)
    frame = _read_numeric_csv(path)

    components = {}
    for column in frame.columns:
        match = BASIS_COLUMN_PATTERN.match(str(column).strip())
        if not match:
            raise FormatError(f"basis column {column!r} is not of the form bus_<i>_<k>", line=1)
        bus, k = int(match.group(1)), int(match.group(2))
        components.setdefault(bus, []).append((k, column))

    n = bus_count if bus_count is not None else max(components)
    missing = [bus for bus in range(1, n + 1) if bus not in components]
    if missing or max(components) > n:
        raise FormatError(f"basis table must cover buses 1..{n} (missing {missing})", line=1)

    dims = []
    for bus in range(1, n + 1):
        ks = sorted(k for k, _ in components[bus])
        if ks != list(range(len(ks))):
            raise FormatError(f"bus_{bus} components must be numbered 0..m-1, got {ks}", line=1)
        dims.append(len(ks))

    phi = np.zeros((len(frame), n, max(dims)))
    for bus in range(1, n + 1):
        for k, column in components[bus]:
            phi[:, bus - 1, k] = frame[column].to_numpy()
    return phi, tuple(dims)


def write_basis_table(path, phi: np.ndarray, dims: Sequence[int], header_lines: Sequence[str] = ()):
    """Write (rows, n, m_max) basis values as columns bus_<i>_<k>, the format read_basis_table reads"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [(i, k) for i, m in enumerate(dims) for k in range(m)]
    frame = pd.DataFrame(np.stack([phi[:, i, k] for i, k in columns], axis=1),
                         columns=[f"bus_{i + 1}_{k}" for i, k in columns])
    with open(path, 'w', encoding='utf-8', newline='') as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        frame.to_csv(f, index=False, float_format='%.17g')
