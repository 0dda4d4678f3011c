"""Linear incremental and adaptive reactive-power controllers"""
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError

CONTROLLERS = ('adaptive', 'linear')


@dataclass(frozen=True, eq=False)
class ControllerParams:
    """
    Per-bus gains k_i, adaptation matrices A_i (padded to m_max) and the globals alpha, epsilon.

    Construction only checks shapes; the stability invariants are reported by
    certify so that out-of-range parameter files can still be inspected.
    """
    k: np.ndarray                      # (n,)
    A: np.ndarray                      # (n, m_max, m_max)
    dims: Tuple[int, ...]
    alpha: float
    epsilon: float
    u_max: Optional[np.ndarray] = None  # (n,)
    controller: str = 'adaptive'

    def __post_init__(self):
        k = np.atleast_1d(np.asarray(self.k, dtype=float))
        dims = tuple(int(m) for m in self.dims)
        if k.ndim != 1 or len(dims) != len(k):
            raise DimensionError(f"k has shape {k.shape} but dims describe {len(dims)} buses")
        if min(dims) < 1:
            raise DimensionError(f"basis dimensions must be >= 1, got {dims}")
        m = max(dims)
        A = np.asarray(self.A, dtype=float)
        if A.shape != (len(k), m, m):
            raise DimensionError(f"A must have shape {(len(k), m, m)}, got {A.shape}")
        mask = np.arange(m)[None, :] < np.array(dims)[:, None]
        if np.any(A[~(mask[:, :, None] & mask[:, None, :])] != 0):
            raise DimensionError("A has non-zero entries outside the per-bus basis dimensions")
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")

        object.__setattr__(self, 'k', k)
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'dims', dims)
        object.__setattr__(self, 'alpha', float(self.alpha))
        object.__setattr__(self, 'epsilon', float(self.epsilon))
        if self.u_max is not None:
            u_max = np.atleast_1d(np.asarray(self.u_max, dtype=float))
            if u_max.shape != k.shape:
                raise DimensionError(f"u_max must have shape {k.shape}, got {u_max.shape}")
            object.__setattr__(self, 'u_max', u_max)

    @property
    def n(self) -> int:
        return len(self.k)

    @property
    def m_max(self) -> int:
        return max(self.dims)

    def gram(self, phi_t: np.ndarray) -> np.ndarray:
        """g_i = phi_i^T A_i phi_i, the diagonal of phi_hat^T A_hat phi_hat"""
        phi_t = _check_phi(phi_t, self)
        return np.einsum('nk,nkl,nl->n', phi_t, self.A, phi_t)

    def with_updates(self, **changes) -> 'ControllerParams':
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class AdaptiveState:
    """Adaptation coefficients a_tilde_i(t), padded to (n, m_max)"""
    a_tilde: np.ndarray

    @classmethod
    def zeros(cls, params: ControllerParams) -> 'AdaptiveState':
        return cls(a_tilde=np.zeros((params.n, params.m_max)))


def _check_v(v_tilde, params: ControllerParams) -> np.ndarray:
    v_tilde = np.asarray(v_tilde, dtype=float)
    if v_tilde.shape != (params.n,):
        raise DimensionError(f"voltage deviation must have length {params.n}, got {v_tilde.shape}")
    return v_tilde


def _check_phi(phi_t, params: ControllerParams) -> np.ndarray:
    phi_t = np.asarray(phi_t, dtype=float)
    if phi_t.shape != (params.n, params.m_max):
        raise DimensionError(f"basis values must have shape {(params.n, params.m_max)}, got {phi_t.shape}")
    return phi_t


def clamp_action(u: np.ndarray, u_max: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Clip u to [-u_max, u_max]; returns (clipped, saturated mask)"""
    if u_max is None:
        return u, np.zeros(u.shape, dtype=bool)
    clipped = np.clip(u, -u_max, u_max)
    return clipped, clipped != u


def linear_control(v_tilde: Sequence[float], params: ControllerParams, clamp: bool = True) -> np.ndarray:
    """u_i = k_i v_tilde_i, clipped to u_max when set and clamp is on"""
    v_tilde = _check_v(v_tilde, params)
    u = params.k * v_tilde
    if clamp:
        u = clamp_action(u, params.u_max)[0]
    return u


def adaptive_control(v_tilde: Sequence[float], phi_t: np.ndarray, state: AdaptiveState,
                     params: ControllerParams, clamp: bool = True) -> np.ndarray:
    """u_i = k_i v_tilde_i + phi_i(t)^T a_tilde_i(t); the sum is clipped"""
    v_tilde = _check_v(v_tilde, params)
    phi_t = _check_phi(phi_t, params)
    if state.a_tilde.shape != phi_t.shape:
        raise DimensionError(f"adaptive state has shape {state.a_tilde.shape}, expected {phi_t.shape}")
    u = params.k * v_tilde + np.einsum('nm,nm->n', phi_t, state.a_tilde)
    if clamp:
        u = clamp_action(u, params.u_max)[0]
    return u


def adapt_step(state: AdaptiveState, v_tilde: Sequence[float], phi_t: np.ndarray,
               params: ControllerParams) -> AdaptiveState:
    """a_tilde_i(t+1) = alpha a_tilde_i(t) + v_tilde_i(t) A_i phi_i(t)"""
    v_tilde = _check_v(v_tilde, params)
    phi_t = _check_phi(phi_t, params)
    if state.a_tilde.shape != phi_t.shape:
        raise DimensionError(f"adaptive state has shape {state.a_tilde.shape}, expected {phi_t.shape}")
    excitation = np.einsum('nkl,nl->nk', params.A, phi_t)
    return AdaptiveState(a_tilde=params.alpha * state.a_tilde + v_tilde[:, None] * excitation)
