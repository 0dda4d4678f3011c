"""Net-load scenarios: basis functions, coefficients, correlation and the lumped disturbance terms"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .errors import ConfigError, DimensionError, FormatError, RangeError
from .grid import FeederModel, frozen_array
from .ingest import read_basis_table, read_trace_csv

logger = logging.getLogger(__name__)

BASIS_KINDS = ('sinusoidal', 'exact', 'tabulated')
CORRELATIONS = ('independent', 'identical')

# Spawn-key codes for per-purpose seed derivation
SEED_PURPOSES = {
    'scenario': 0,
    'init': 1,
    'training': 2,
    'test': 3,
}


def derive_seed(root: int, purpose: str, *indices: int) -> int:
    """
    Split the root seed per purpose (and optional indices) via numpy's SeedSequence.

    derive_seed(7, 'test', 3) is the seed of the fourth test scenario of a run seeded 7.
    """
    if purpose not in SEED_PURPOSES:
        raise ConfigError(f"unknown seed purpose {purpose!r} (expected one of {sorted(SEED_PURPOSES)})")
    if int(root) < 0:
        raise ConfigError(f"seed must be non-negative, got {root}")
    sequence = np.random.SeedSequence(int(root), spawn_key=(SEED_PURPOSES[purpose], *[int(i) for i in indices]))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator, reproducible across platforms"""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class ScenarioConfig:
    """Sampling ranges and basis selection for generated or ingested scenarios"""
    eta_min: float = 0.003 * np.pi
    eta_max: float = 0.008 * np.pi
    c_min: float = 0.05
    c_max: float = 0.25
    p0_min: float = 0.3
    p0_max: float = 1.7
    q0_min: float = 0.3
    q0_max: float = 1.7
    noise_amp: float = 0.0
    horizon: int = 200
    seed: int = 0
    basis_dim: int = 1
    correlation: str = 'independent'
    shared_frequency: bool = False
    # trace ingestion
    trace: Optional[str] = None
    basis_kind: str = 'sinusoidal'
    basis_frequencies: Optional[list] = None
    basis_table: Optional[str] = None
    basis_window: Optional[int] = None  # single fit of c over the last W steps; c stays constant

    def validate(self):
        for name in ('eta', 'c', 'p0', 'q0'):
            low, high = getattr(self, f"{name}_min"), getattr(self, f"{name}_max")
            if not (np.isfinite(low) and np.isfinite(high)) or low > high:
                raise ConfigError(f"empty range for {name}: [{low}, {high}]")
        if not (0 < self.eta_min and self.eta_max < np.pi):
            raise ConfigError(f"frequencies must lie in (0, pi), got [{self.eta_min}, {self.eta_max}]")
        if self.noise_amp < 0:
            raise ConfigError(f"noise_amp must be >= 0, got {self.noise_amp}")
        if self.horizon < 0:
            raise ConfigError(f"horizon must be >= 0, got {self.horizon}")
        if self.basis_dim < 1:
            raise ConfigError(f"basis_dim must be >= 1, got {self.basis_dim}")
        if self.correlation not in CORRELATIONS:
            raise ConfigError(f"correlation must be one of {CORRELATIONS}, got {self.correlation!r}")
        if self.basis_kind not in BASIS_KINDS:
            raise ConfigError(f"basis kind must be one of {BASIS_KINDS}, got {self.basis_kind!r}")
        if self.basis_window is not None and self.basis_window < 1:
            raise ConfigError(f"basis window must be >= 1, got {self.basis_window}")


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Per-bus basis dimensions m_i and the family the values come from"""
    dims: Tuple[int, ...]
    kind: str = 'sinusoidal'
    frequencies: Optional[np.ndarray] = None  # (n, m_max), sinusoidal only

    def __post_init__(self):
        object.__setattr__(self, 'dims', tuple(int(m) for m in self.dims))
        if not self.dims or min(self.dims) < 1:
            raise ConfigError(f"basis dimensions must be >= 1, got {self.dims}")
        if self.kind not in BASIS_KINDS:
            raise ConfigError(f"basis kind must be one of {BASIS_KINDS}, got {self.kind!r}")
        if self.kind == 'sinusoidal':
            if self.frequencies is None:
                raise ConfigError("sinusoidal basis needs frequencies")
            eta = np.asarray(self.frequencies, dtype=float)
            if eta.shape != (self.n, self.m_max):
                raise DimensionError(f"frequencies must be {(self.n, self.m_max)}, got {eta.shape}")
            used = eta[self.mask]
            if np.any(used <= 0) or np.any(used >= np.pi):
                raise ConfigError("sinusoidal frequencies must lie in (0, pi)")
            object.__setattr__(self, 'frequencies', frozen_array(eta * self.mask))

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def m_max(self) -> int:
        return max(self.dims)

    @property
    def mask(self) -> np.ndarray:
        """(n, m_max) boolean mask of the components each bus actually uses"""
        return np.arange(self.m_max)[None, :] < np.array(self.dims)[:, None]


@dataclass(frozen=True, eq=False)
class LoadScenario:
    """
    A net-load realization p(0..T) generated by

        p_i(t+1) = p_i(t) + c_i^T phi_i(t) + delta_p_i(t)

    Per-bus vectors are zero-padded to m_max. theta_cor[i, j] has shape
    (m_j, m_i) so that phi_j(t) = theta_cor[i, j] phi_i(t) + xi_ij(t).
    """
    horizon: int
    p: np.ndarray            # (T+1, n)
    q0: np.ndarray           # (n,)
    c: np.ndarray            # (n, m_max)
    phi: np.ndarray          # (T+1, n, m_max)
    delta_p: np.ndarray      # (T, n)
    theta_cor: np.ndarray    # (n, n, m_max, m_max)
    basis: BasisSpec
    correlation: str = 'independent'
    seed: Optional[int] = None

    def __post_init__(self):
        T, n, m = self.horizon, self.basis.n, self.basis.m_max
        if T < 0:
            raise ConfigError(f"horizon must be >= 0, got {T}")
        expected = {
            'p': (T + 1, n),
            'q0': (n,),
            'c': (n, m),
            'phi': (T + 1, n, m),
            'delta_p': (T, n),
            'theta_cor': (n, n, m, m),
        }
        for name, shape in expected.items():
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != shape:
                raise DimensionError(f"scenario {name} must be {shape}, got {value.shape}")
            object.__setattr__(self, name, frozen_array(value))

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def dims(self) -> Tuple[int, ...]:
        return self.basis.dims

    def increments(self) -> np.ndarray:
        """Measured differences p(t+1) - p(t), t = 0..T-1"""
        return np.diff(self.p, axis=0)

    def prediction(self) -> np.ndarray:
        """Basis prediction c_i^T phi_i(t), t = 0..T-1"""
        return np.einsum('tnm,nm->tn', self.phi[:-1], self.c)

    def xi(self, i: int, j: int) -> np.ndarray:
        """Residual basis process xi_ij(t) = phi_j(t) - theta_cor[i, j] phi_i(t), shape (T+1, m_max)"""
        return self.phi[:, j, :] - self.phi[:, i, :] @ self.theta_cor[i, j].T


@dataclass(frozen=True, eq=False)
class DisturbanceDecomposition:
    """Lumped terms of the decomposed voltage dynamics (padded per bus to m_max)"""
    a: np.ndarray           # (n, m_max), a_i = D_e[i,i] c_i + theta_cor_i
    theta_cor: np.ndarray   # (n, m_max)
    delta_phi: np.ndarray   # (T, n)
    delta_v: np.ndarray     # (T, n), X delta_phi + R delta_p
    dims: Tuple[int, ...]


def sinusoidal_basis(frequencies: np.ndarray, horizon: int) -> np.ndarray:
    """phi_i,k(t) = sin(eta_i,k t) for t = 0..T, shape (T+1, n, m)"""
    t = np.arange(horizon + 1, dtype=float)
    return np.sin(t[:, None, None] * np.asarray(frequencies, dtype=float)[None, :, :])


def correlation_matrices(dims: Sequence[int], correlation: str) -> np.ndarray:
    """Theta_cor preset: zero (independent) or identity between equally sized buses (identical)"""
    n, m = len(dims), max(dims)
    theta = np.zeros((n, n, m, m))
    if correlation == 'independent':
        return theta
    if correlation != 'identical':
        raise ConfigError(f"correlation must be one of {CORRELATIONS}, got {correlation!r}")
    if len(set(dims)) != 1:
        raise ConfigError("the identical correlation preset needs equal basis dimensions on every bus")
    for i in range(n):
        for j in range(n):
            if i != j:
                theta[i, j] = np.eye(m)
    return theta


def build_scenario(phi, c, p0, q0, basis: BasisSpec, delta_p=None, theta_cor=None,
                   correlation: str = 'independent', seed: Optional[int] = None) -> LoadScenario:
    """
    Run the net-load recursion forward from p0 and package the scenario.

    Args:
        phi: (T+1, n, m_max) basis values
        c: (n, m_max) coefficients
        p0, q0: initial active / reactive injections
        delta_p: (T, n) prediction errors (zeros if omitted)
        theta_cor: (n, n, m_max, m_max) correlation matrices (preset from correlation if omitted)
    """
    phi = np.asarray(phi, dtype=float) * basis.mask[None, :, :]
    c = np.asarray(c, dtype=float) * basis.mask
    horizon = phi.shape[0] - 1
    if delta_p is None:
        delta_p = np.zeros((horizon, basis.n))
    delta_p = np.asarray(delta_p, dtype=float)
    if theta_cor is None:
        theta_cor = correlation_matrices(basis.dims, correlation)
    if delta_p.shape != (horizon, basis.n):
        raise DimensionError(f"delta_p must be {(horizon, basis.n)}, got {delta_p.shape}")

    steps = np.einsum('tnm,nm->tn', phi[:-1], c) + delta_p
    p = np.empty((horizon + 1, basis.n))
    p[0] = p0
    for t in range(horizon):
        p[t + 1] = p[t] + steps[t]

    return LoadScenario(horizon=horizon, p=p, q0=q0, c=c, phi=phi, delta_p=delta_p,
                        theta_cor=theta_cor, basis=basis, correlation=correlation, seed=seed)


def gen_sinusoidal(model: FeederModel, T: int, seed: int, cfg: Optional[ScenarioConfig] = None) -> LoadScenario:
    """
    Sample a sinusoidal-basis scenario.

    Draw order (fixed for reproducibility): eta (n, m), c (n, m), p0 (n), q0 (n),
    noise (T, n).

    Raises:
        ConfigError: empty ranges, negative T
    """
    cfg = cfg or ScenarioConfig()
    cfg.validate()
    if T < 0:
        raise ConfigError(f"horizon must be >= 0, got {T}")

    n, m = model.n, cfg.basis_dim
    rng = make_rng(seed)
    eta = rng.uniform(cfg.eta_min, cfg.eta_max, size=(n, m))
    if cfg.shared_frequency:
        eta[:] = eta[0]
    c = rng.uniform(cfg.c_min, cfg.c_max, size=(n, m))
    p0 = rng.uniform(cfg.p0_min, cfg.p0_max, size=n)
    q0 = rng.uniform(cfg.q0_min, cfg.q0_max, size=n)
    noise = cfg.noise_amp * rng.uniform(-1.0, 1.0, size=(T, n))

    basis = BasisSpec(dims=(m,) * n, kind='sinusoidal', frequencies=eta)
    return build_scenario(sinusoidal_basis(eta, T), c, p0, q0, basis, delta_p=noise,
                          correlation=cfg.correlation, seed=seed)


def _trace_frequencies(frequencies, n: int) -> np.ndarray:
    if frequencies is None:
        raise ConfigError("sinusoidal trace basis needs basis frequencies")
    eta = np.asarray(frequencies, dtype=float)
    if eta.ndim == 0:
        eta = eta.reshape(1)
    if eta.ndim == 1:
        eta = np.tile(eta, (n, 1))
    if eta.shape[0] != n:
        raise DimensionError(f"basis frequencies given for {eta.shape[0]} buses, feeder has {n}")
    return eta


def ingest_trace(path, model: FeederModel, basis_cfg: Optional[ScenarioConfig] = None,
                 q0: Optional[Sequence[float]] = None) -> LoadScenario:
    """
    Build a scenario from a measured net-load trace.

    Differences p(t+1) - p(t) are regressed per bus on the configured basis
    in one least-squares fit, over the whole trace by default or over the last
    `basis_window` steps. c is not refit as the window would slide; the
    residual over the whole trace becomes delta_p, so the recursion reproduces
    the measured series.

    Basis kinds:
        sinusoidal: sin(eta t) with configured frequencies
        exact: phi_i(t) = p_i(t+1) - p_i(t) (phi(T) = 0), giving c_i = 1, delta_p = 0
        tabulated: values read from basis_table (at least T+1 rows)

    Raises:
        FormatError: ragged trace or fewer than 2 rows
        DimensionError: trace columns differ from the feeder bus count
    """
    cfg = basis_cfg or ScenarioConfig()
    cfg.validate()
    p = read_trace_csv(path)
    n = model.n
    if p.shape[1] != n:
        raise DimensionError(f"trace has {p.shape[1]} bus columns, feeder has {n} buses")
    T = p.shape[0] - 1
    diffs = np.diff(p, axis=0)

    if cfg.basis_kind == 'sinusoidal':
        eta = _trace_frequencies(cfg.basis_frequencies, n)
        basis = BasisSpec(dims=(eta.shape[1],) * n, kind='sinusoidal', frequencies=eta)
        phi = sinusoidal_basis(eta, T)
    elif cfg.basis_kind == 'exact':
        basis = BasisSpec(dims=(1,) * n, kind='exact')
        phi = np.zeros((T + 1, n, 1))
        phi[:T, :, 0] = diffs
    else:
        if not cfg.basis_table:
            raise ConfigError("tabulated trace basis needs basis_table")
        table, dims = read_basis_table(cfg.basis_table, n)
        if table.shape[0] < T + 1:
            raise FormatError(f"basis table has {table.shape[0]} rows, trace needs {T + 1}")
        basis = BasisSpec(dims=dims, kind='tabulated')
        phi = table[:T + 1]

    c = np.zeros((n, basis.m_max))
    if cfg.basis_kind == 'exact':
        c[:, 0] = 1.0
    else:
        start = 0 if cfg.basis_window is None else max(0, T - cfg.basis_window)
        for i, m in enumerate(basis.dims):
            design = phi[start:T, i, :m]
            target = diffs[start:, i]
            if len(target) == 0:
                continue
            c[i, :m] = linalg.lstsq(design, target)[0]
    delta_p = diffs - np.einsum('tnm,nm->tn', phi[:-1], c)
    if cfg.basis_kind == 'exact':
        delta_p = np.zeros_like(diffs)

    if q0 is None:
        q0 = make_rng(derive_seed(cfg.seed, 'scenario')).uniform(cfg.q0_min, cfg.q0_max, size=n)
    q0 = np.asarray(q0, dtype=float)
    if q0.shape != (n,):
        raise DimensionError(f"q0 must have length {n}, got {q0.shape}")

    logger.info(f"Ingested trace {Path(path).name}: {T} steps, basis={cfg.basis_kind}, "
                f"max |delta_p|={np.abs(delta_p).max() if delta_p.size else 0.0:.3e}")
    return LoadScenario(horizon=T, p=p, q0=q0, c=c, phi=phi, delta_p=delta_p,
                        theta_cor=correlation_matrices(basis.dims, cfg.correlation), basis=basis,
                        correlation=cfg.correlation, seed=cfg.seed)


def decompose(model: FeederModel, sc: LoadScenario) -> DisturbanceDecomposition:
    """
    Split net-load changes into the locally predictable part a and the disturbance delta_v.

        theta_cor_i = sum_{j != i} D_o[i,j] c_j^T Theta_ij
        a_i         = D_e[i,i] c_i + theta_cor_i
        delta_phi_i = sum_{j != i} D_o[i,j] c_j^T xi_ij(t)
        delta_v     = X delta_phi + R delta_p

    Raises:
        DimensionError: scenario and model bus counts differ
    """
    if sc.n != model.n:
        raise DimensionError(f"scenario has {sc.n} buses, model has {model.n}")

    theta = np.einsum('ij,jk,ijkl->il', model.D_o, sc.c, sc.theta_cor) * sc.basis.mask
    a = np.diag(model.D_e)[:, None] * sc.c + theta

    phi = sc.phi[:-1]
    weighted = np.einsum('tnm,nm->tn', phi, sc.c)
    delta_phi = weighted @ model.D_o.T - np.einsum('nm,tnm->tn', theta, phi)
    delta_v = delta_phi @ model.X.T + sc.delta_p @ model.R.T

    return DisturbanceDecomposition(a=frozen_array(a), theta_cor=frozen_array(theta),
                                    delta_phi=frozen_array(delta_phi), delta_v=frozen_array(delta_v),
                                    dims=sc.dims)


def basis_at(sc: LoadScenario, t: int) -> np.ndarray:
    """
    Block-diagonal basis matrix diag(phi_1(t), ..., phi_n(t)) of shape (sum m_i, n).

    Raises:
        RangeError: t outside 0..T
    """
    if not isinstance(t, (int, np.integer)) or not 0 <= t <= sc.horizon:
        raise RangeError(f"t={t} outside scenario horizon 0..{sc.horizon}")
    blocks = [sc.phi[t, i, :m].reshape(m, 1) for i, m in enumerate(sc.dims)]
    return linalg.block_diag(*blocks)


def scaled(sc: LoadScenario, ratio: float) -> LoadScenario:
    """Scale the time-varying part (c, delta_p) of a scenario; p(0), q(0) and the basis stay"""
    if not (np.isfinite(ratio) and ratio >= 0):
        raise ConfigError(f"injection ratio must be >= 0, got {ratio}")
    return build_scenario(sc.phi, ratio * sc.c, sc.p[0], sc.q0, sc.basis, delta_p=ratio * sc.delta_p,
                          theta_cor=sc.theta_cor, correlation=sc.correlation, seed=sc.seed)


def phi_bound(sc: LoadScenario) -> np.ndarray:
    """Per-bus bound b_i on |phi_i,k(t)|: 1 for sinusoidal bases, the observed max otherwise"""
    if sc.basis.kind == 'sinusoidal':
        return np.ones(sc.n)
    return np.abs(sc.phi).max(axis=(0, 2))


@dataclass
class ScenarioSampler:
    """
    Deterministic scenario source for training and evaluation.

    Scenario number k of purpose P is seeded with derive_seed(cfg.seed, P, k), so
    training ('scenario') and evaluation ('test') sets never share seeds. A
    trace-backed sampler replays the trace with freshly drawn q(0).
    """
    model: FeederModel
    cfg: ScenarioConfig = field(default_factory=ScenarioConfig)
    purpose: str = 'scenario'
    horizon: Optional[int] = None
    _trace: Optional[LoadScenario] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.cfg.validate()
        if self.horizon is None:
            self.horizon = self.cfg.horizon
        if self.cfg.trace:
            self._trace = ingest_trace(self.cfg.trace, self.model, self.cfg)
            if self.horizon > self._trace.horizon:
                raise ConfigError(f"horizon {self.horizon} exceeds trace length {self._trace.horizon}")

    def draw(self, index: int) -> LoadScenario:
        seed = derive_seed(self.cfg.seed, self.purpose, index)
        if self._trace is None:
            return gen_sinusoidal(self.model, self.horizon, seed, self.cfg)
        q0 = make_rng(seed).uniform(self.cfg.q0_min, self.cfg.q0_max, size=self.model.n)
        return replace(self._trace, q0=q0, seed=seed)

    def sample(self, epoch: int, batch_size: int) -> List[LoadScenario]:
        return [self.draw(epoch * batch_size + h) for h in range(batch_size)]

    def test_set(self, size: int) -> List[LoadScenario]:
        return [self.draw(k) for k in range(size)]


@dataclass
class FixedSampler:
    """Returns the same scenario batch every epoch"""
    scenarios: List[LoadScenario]

    def sample(self, epoch: int, batch_size: int) -> List[LoadScenario]:
        if batch_size > len(self.scenarios):
            raise ConfigError(f"batch size {batch_size} exceeds the {len(self.scenarios)} fixed scenarios")
        return list(self.scenarios[:batch_size])
