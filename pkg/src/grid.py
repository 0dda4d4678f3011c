"""LinDistFlow feeder model: radial topology and the R, X sensitivity matrices"""
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy import linalg

from .errors import ConfigError, DimensionError, ModelError, TopologyError

logger = logging.getLogger(__name__)

SUBSTATION = 0
PD_TOLERANCE = 1e-10
DATA_DIR = Path(__file__).parent / 'data'


@dataclass(frozen=True)
class Line:
    """One branch of the feeder, impedances in p.u."""
    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclass(frozen=True)
class FeederTopology:
    """Radial feeder rooted at the substation (bus 0); buses 1..bus_count carry load"""
    bus_count: int
    lines: Tuple[Line, ...]
    base_power: float = 100.0  # kVA
    base_voltage: float = 12.66  # kV

    def __post_init__(self):
        lines = tuple(line if isinstance(line, Line) else Line(*line) for line in self.lines)
        object.__setattr__(self, 'lines', lines)
        validate_topology(self)

    def graph(self) -> nx.MultiGraph:
        """Undirected multigraph of the feeder (parallel lines stay distinct)"""
        graph = nx.MultiGraph()
        graph.add_nodes_from(range(self.bus_count + 1))
        for index, line in enumerate(self.lines):
            graph.add_edge(line.from_bus, line.to_bus, index=index)
        return graph


def validate_topology(topology: FeederTopology):
    """
    Check the tree and impedance invariants of a topology.

    Raises:
        TopologyError: wrong line count, unknown bus, non-positive impedance, or a
            graph that is not a tree spanning buses 0..n
    """
    n = topology.bus_count
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise TopologyError(f"bus_count must be a positive integer, got {n!r}")
    if len(topology.lines) != n:
        raise TopologyError(f"a radial feeder with {n} buses needs exactly {n} lines, got {len(topology.lines)}")

    for line in topology.lines:
        for bus in (line.from_bus, line.to_bus):
            if not 0 <= bus <= n:
                raise TopologyError(f"line {line.from_bus}->{line.to_bus} references unknown bus {bus}")
        if line.from_bus == line.to_bus:
            raise TopologyError(f"line {line.from_bus}->{line.to_bus} is a self loop")
        if not (np.isfinite(line.r) and line.r > 0):
            raise TopologyError(f"line {line.from_bus}->{line.to_bus}: resistance must be > 0, got {line.r}")
        if not (np.isfinite(line.x) and line.x > 0):
            raise TopologyError(f"line {line.from_bus}->{line.to_bus}: reactance must be > 0, got {line.x}")

    if not nx.is_tree(topology.graph()):
        raise TopologyError("lines do not form a tree rooted at the substation (cycle or disconnected bus)")


def path_matrix(topology: FeederTopology) -> np.ndarray:
    """
    Line-by-bus incidence of substation paths.

    Entry [l, i-1] is 1 when line l lies on the path from the substation to bus i.
    """
    graph = topology.graph()
    line_index = {}
    for u, v, data in graph.edges(data=True):
        line_index[frozenset((u, v))] = data['index']

    n = topology.bus_count
    paths = np.zeros((len(topology.lines), n))
    for bus in range(1, n + 1):
        nodes = nx.shortest_path(graph, SUBSTATION, bus)
        for u, v in zip(nodes[:-1], nodes[1:]):
            paths[line_index[frozenset((u, v))], bus - 1] = 1.0
    return paths


@dataclass(frozen=True, eq=False)
class FeederModel:
    """Immutable LinDistFlow model v = R p + X q + 1"""
    topology: Optional[FeederTopology]
    R: np.ndarray
    X: np.ndarray
    D_e: np.ndarray
    D_o: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @cached_property
    def x_eigen(self) -> Tuple[np.ndarray, np.ndarray]:
        """Symmetric eigendecomposition (ascending eigenvalues, eigenvectors) of X"""
        return linalg.eigh(self.X)

    @cached_property
    def x_sqrt(self) -> np.ndarray:
        """X^{1/2} via the symmetric eigendecomposition"""
        values, vectors = self.x_eigen
        root = (vectors * np.sqrt(values)) @ vectors.T
        return frozen_array(0.5 * (root + root.T))

    @cached_property
    def x_inv(self) -> np.ndarray:
        values, vectors = self.x_eigen
        inverse = (vectors / values) @ vectors.T
        return frozen_array(0.5 * (inverse + inverse.T))

    @property
    def x_lambda_min(self) -> float:
        return float(self.x_eigen[0][0])

    @property
    def x_lambda_max(self) -> float:
        return float(self.x_eigen[0][-1])

    @property
    def x_condition(self) -> float:
        return self.x_lambda_max / self.x_lambda_min


def frozen_array(array) -> np.ndarray:
    """Float copy of array marked read-only"""
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def _check_positive_definite(name: str, matrix: np.ndarray):
    lambda_min = float(linalg.eigvalsh(matrix)[0])
    if lambda_min <= PD_TOLERANCE:
        raise ModelError(f"{name} is not positive definite (lambda_min={lambda_min:.3e})")


def feeder_from_matrices(R, X, topology: Optional[FeederTopology] = None) -> FeederModel:
    """
    Build a FeederModel from explicit sensitivity matrices.

    Both matrices are symmetrized before the positive-definiteness check.

    Raises:
        DimensionError: matrices not square or of different sizes
        ModelError: R or X not positive definite within PD_TOLERANCE
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape != X.shape:
        raise DimensionError(f"R and X must be square and of equal size, got {R.shape} and {X.shape}")
    if topology is not None and topology.bus_count != X.shape[0]:
        raise DimensionError(f"topology has {topology.bus_count} buses but matrices are {X.shape}")

    R = 0.5 * (R + R.T)
    X = 0.5 * (X + X.T)
    _check_positive_definite('R', R)
    _check_positive_definite('X', X)

    try:
        D = linalg.solve(X, R, assume_a='pos')
    except linalg.LinAlgError as e:
        raise ModelError(f"X^-1 R could not be formed: {e}")
    D_e = np.diag(np.diag(D))
    D_o = D - D_e

    return FeederModel(topology=topology, R=frozen_array(R), X=frozen_array(X), D_e=frozen_array(D_e), D_o=frozen_array(D_o))


def build_feeder(topology: FeederTopology, scale_factor: float = 1.0) -> FeederModel:
    """
    Build R and X from common-path impedance sums.

    R[i, j] = scale_factor * sum of r over lines shared by the substation paths of
    buses i and j (likewise X with x). scale_factor=2 gives the squared-voltage
    convention.
    """
    if not (np.isfinite(scale_factor) and scale_factor > 0):
        raise ConfigError(f"scale_factor must be > 0, got {scale_factor}")
    validate_topology(topology)

    paths = path_matrix(topology)
    r = np.array([line.r for line in topology.lines])
    x = np.array([line.x for line in topology.lines])
    R = scale_factor * paths.T @ (r[:, None] * paths)
    X = scale_factor * paths.T @ (x[:, None] * paths)

    model = feeder_from_matrices(R, X, topology)
    logger.debug(f"Built feeder with {model.n} buses (kappa(X)={model.x_condition:.1f})")
    return model


def voltage_from_injections(model: FeederModel, p: Sequence[float], q: Sequence[float]) -> np.ndarray:
    """Per-unit voltages R p + X q + 1"""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (model.n,) or q.shape != (model.n,):
        raise DimensionError(f"expected injections of length {model.n}, got {p.shape} and {q.shape}")
    return model.R @ p + model.X @ q + 1.0


def bundled_feeder_path(name: str = 'ieee33') -> Path:
    """Path of a feeder file shipped with the package"""
    return DATA_DIR / f"{name}.txt"
