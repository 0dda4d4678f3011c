"""Closed-loop rollouts of the voltage / reactive-power / adaptation dynamics and their cost"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from .control import (CONTROLLERS, AdaptiveState, ControllerParams, adapt_step, adaptive_control,
                      clamp_action, linear_control)
from .errors import ConfigError, DimensionError, DivergenceError
from .grid import FeederModel
from .scenario import LoadScenario, decompose, scaled

logger = logging.getLogger(__name__)

NORMS = ('L1', 'L2', 'Linf')
P_CONVENTIONS = ('next', 'current')
DIVERGENCE_LIMIT = 10.0


def vector_norm(x: np.ndarray, kind: str) -> np.ndarray:
    """Norm along the last axis"""
    if kind == 'L1':
        return np.abs(x).sum(axis=-1)
    if kind == 'L2':
        return np.sqrt((x * x).sum(axis=-1))
    if kind == 'Linf':
        return np.abs(x).max(axis=-1)
    raise ConfigError(f"unknown norm {kind!r} (expected one of {NORMS})")


@dataclass(frozen=True)
class CostSpec:
    """Per-step cost ||v_tilde(t)|| + gamma ||u(t)||"""
    gamma: float = 0.001
    v_norm: str = 'L1'
    u_norm: str = 'L1'

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.v_norm not in NORMS:
            raise ConfigError(f"v_norm must be one of {NORMS}, got {self.v_norm!r}")
        if self.u_norm not in ('L1', 'L2'):
            raise ConfigError(f"u_norm must be L1 or L2, got {self.u_norm!r}")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Rollout record for t = 0..T.

    u[T] is evaluated (it enters the cost) but never applied, so q has T+1 rows
    ending at q(T).
    """
    v_tilde: np.ndarray     # (T+1, n)
    q: np.ndarray           # (T+1, n)
    u: np.ndarray           # (T+1, n)
    p: np.ndarray           # (T+1, n)
    a_tilde: np.ndarray     # (T+1, n, m_max)
    saturated: np.ndarray   # (T+1, n) bool
    controller: str = 'adaptive'
    clamp: bool = False

    @property
    def horizon(self) -> int:
        return self.v_tilde.shape[0] - 1

    @property
    def n(self) -> int:
        return self.v_tilde.shape[1]

    @property
    def v(self) -> np.ndarray:
        return self.v_tilde + 1.0

    @property
    def saturation_count(self) -> int:
        return int(self.saturated[1:].sum())

    def to_frame(self) -> pd.DataFrame:
        """Long-format rows (t, bus, v, q, u, p, sat) for the controlled steps t = 1..T"""
        T, n = self.horizon, self.n
        t = np.repeat(np.arange(1, T + 1), n)
        bus = np.tile(np.arange(1, n + 1), T)
        return pd.DataFrame({
            't': t,
            'bus': bus,
            'v': self.v[1:].ravel(),
            'q': self.q[1:].ravel(),
            'u': self.u[1:].ravel(),
            'p': self.p[1:].ravel(),
            'sat': self.saturated[1:].ravel().astype(int),
        }, columns=['t', 'bus', 'v', 'q', 'u', 'p', 'sat'])


def _check_inputs(model: FeederModel, scenario: LoadScenario, controller: str, params: ControllerParams,
                  T: Optional[int], q0) -> tuple:
    if controller not in CONTROLLERS:
        raise ConfigError(f"controller must be one of {CONTROLLERS}, got {controller!r}")
    if scenario.n != model.n or params.n != model.n:
        raise DimensionError(f"bus counts differ: model {model.n}, scenario {scenario.n}, params {params.n}")
    if controller == 'adaptive' and tuple(params.dims) != tuple(scenario.dims):
        raise DimensionError(f"params basis dims {params.dims} differ from scenario dims {scenario.dims}")
    T = scenario.horizon if T is None else int(T)
    if not 0 <= T <= scenario.horizon:
        raise ConfigError(f"rollout horizon {T} outside 0..{scenario.horizon}")
    q0 = scenario.q0 if q0 is None else np.asarray(q0, dtype=float)
    if q0.shape != (model.n,):
        raise DimensionError(f"q0 must have length {model.n}, got {q0.shape}")
    return T, q0


def _guard(v_tilde: np.ndarray, step: int, limit: float):
    if not np.all(np.isfinite(v_tilde)) or np.max(np.abs(v_tilde)) > limit:
        raise DivergenceError(f"voltage deviation exceeded {limit} p.u.", step)


def rollout(model: FeederModel, scenario: LoadScenario, controller: str, params: ControllerParams,
            T: Optional[int] = None, q0=None, clamp: bool = False, p_convention: str = 'next',
            divergence_limit: float = DIVERGENCE_LIMIT) -> Trajectory:
    """
    Iterate the closed loop

        u(t)   = controller(v_tilde(t), phi(t), a_tilde(t))
        q(t+1) = q(t) - u(t)
        v(t+1) = R p(t+1) + X q(t+1) + 1     (p_convention='next')
        v(t+1) = R p(t)   + X q(t+1) + 1     (p_convention='current')

    with the adaptation state updated by adapt_step; a_tilde(0) = 0.

    Raises:
        DimensionError: inconsistent model / scenario / params sizes
        DivergenceError: non-finite state or |v_tilde| above divergence_limit
    """
    if p_convention not in P_CONVENTIONS:
        raise ConfigError(f"p_convention must be one of {P_CONVENTIONS}, got {p_convention!r}")
    T, q0 = _check_inputs(model, scenario, controller, params, T, q0)
    n, m = model.n, params.m_max
    R, X = model.R, model.X
    offset = 1 if p_convention == 'next' else 0

    v_tilde = np.zeros((T + 1, n))
    q = np.zeros((T + 1, n))
    u = np.zeros((T + 1, n))
    a_tilde = np.zeros((T + 1, n, m))
    saturated = np.zeros((T + 1, n), dtype=bool)

    q[0] = q0
    v_tilde[0] = R @ scenario.p[0] + X @ q0
    state = AdaptiveState.zeros(params)
    for t in range(T + 1):
        if controller == 'adaptive':
            phi_t = scenario.phi[t]
            raw = adaptive_control(v_tilde[t], phi_t, state, params, clamp=False)
        else:
            raw = linear_control(v_tilde[t], params, clamp=False)
        if clamp:
            u[t], saturated[t] = clamp_action(raw, params.u_max)
        else:
            u[t] = raw
        a_tilde[t] = state.a_tilde
        if t == T:
            break

        q[t + 1] = q[t] - u[t]
        v_tilde[t + 1] = R @ scenario.p[t + offset] + X @ q[t + 1]
        if controller == 'adaptive':
            state = adapt_step(state, v_tilde[t], phi_t, params)
        _guard(v_tilde[t + 1], t + 1, divergence_limit)

    return Trajectory(v_tilde=v_tilde, q=q, u=u, p=scenario.p[:T + 1].copy(), a_tilde=a_tilde,
                      saturated=saturated, controller=controller, clamp=clamp)


def rollout_decomposed(model: FeederModel, scenario: LoadScenario, controller: str, params: ControllerParams,
                       T: Optional[int] = None, q0=None, clamp: bool = False,
                       divergence_limit: float = DIVERGENCE_LIMIT) -> Trajectory:
    """
    Same closed loop driven by the lumped disturbance terms instead of p:

        v_tilde(t+1) = v_tilde(t) - X (u(t) - phi_hat(t)^T a) + delta_v(t)

    Only the p(t+1) convention has this form.
    """
    T, q0 = _check_inputs(model, scenario, controller, params, T, q0)
    parts = decompose(model, scenario)
    n, m = model.n, params.m_max
    X = model.X

    v_tilde = np.zeros((T + 1, n))
    q = np.zeros((T + 1, n))
    u = np.zeros((T + 1, n))
    a_tilde = np.zeros((T + 1, n, m))
    saturated = np.zeros((T + 1, n), dtype=bool)

    q[0] = q0
    v_tilde[0] = model.R @ scenario.p[0] + X @ q0
    state = AdaptiveState.zeros(params)
    for t in range(T + 1):
        phi_t = scenario.phi[t]
        if controller == 'adaptive':
            raw = adaptive_control(v_tilde[t], phi_t, state, params, clamp=False)
        else:
            raw = linear_control(v_tilde[t], params, clamp=False)
        if clamp:
            u[t], saturated[t] = clamp_action(raw, params.u_max)
        else:
            u[t] = raw
        a_tilde[t] = state.a_tilde
        if t == T:
            break

        drift = np.einsum('nm,nm->n', phi_t, parts.a)
        q[t + 1] = q[t] - u[t]
        v_tilde[t + 1] = v_tilde[t] - X @ (u[t] - drift) + parts.delta_v[t]
        if controller == 'adaptive':
            state = adapt_step(state, v_tilde[t], phi_t, params)
        _guard(v_tilde[t + 1], t + 1, divergence_limit)

    return Trajectory(v_tilde=v_tilde, q=q, u=u, p=scenario.p[:T + 1].copy(), a_tilde=a_tilde,
                      saturated=saturated, controller=controller, clamp=clamp)


def cost_breakdown(traj: Trajectory, spec: CostSpec) -> pd.DataFrame:
    """Per-step cost terms for t = 1..T"""
    v_cost = vector_norm(traj.v_tilde[1:], spec.v_norm)
    u_cost = spec.gamma * vector_norm(traj.u[1:], spec.u_norm)
    return pd.DataFrame({
        't': np.arange(1, traj.horizon + 1),
        'v_cost': v_cost,
        'u_cost': u_cost,
        'total': v_cost + u_cost,
    })


def cost(traj: Trajectory, spec: CostSpec) -> float:
    """sum_{t=1}^{T} ||v_tilde(t)|| + gamma ||u(t)||"""
    v_cost = vector_norm(traj.v_tilde[1:], spec.v_norm)
    u_cost = vector_norm(traj.u[1:], spec.u_norm)
    return float(np.sum(v_cost + spec.gamma * u_cost))


def run_batch(task: Callable[[LoadScenario], object], scenarios: Sequence[LoadScenario],
              workers: int = 1) -> list:
    """
    Apply task to every scenario, optionally on a thread pool; results keep submission order.

    DivergenceError is re-raised with the offending scenario index.
    """
    def indexed(item):
        index, scenario = item
        try:
            return task(scenario)
        except DivergenceError as e:
            raise DivergenceError(e.reason, e.step, scenario_index=index)

    items = list(enumerate(scenarios))
    if workers <= 1 or len(items) <= 1:
        return [indexed(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(indexed, items))


@dataclass
class ComparisonReport:
    """Adaptive-vs-linear cost comparison, one block of rows per injection ratio"""
    per_scenario: pd.DataFrame
    summary: pd.DataFrame
    notes: List[str] = field(default_factory=list)

    def improvement(self, ratio: float = 1.0) -> float:
        row = self.summary[np.isclose(self.summary['ratio'], ratio)]
        if row.empty:
            raise ConfigError(f"no comparison rows for ratio {ratio}")
        return float(row['improvement_pct'].iloc[0])


def compare(model: FeederModel, scenario_set: Sequence[LoadScenario], params_adaptive: ControllerParams,
            params_linear: ControllerParams, spec: CostSpec, ratios: Sequence[float] = (1.0,),
            clamp: bool = False, workers: int = 1, p_convention: str = 'next',
            uncertified: Sequence[str] = ()) -> ComparisonReport:
    """
    Mean and standard deviation of the cost of both controllers over a scenario set.

    Each parameter set runs with its own controller type. improvement_pct is
    100 * (linear_mean - adaptive_mean) / linear_mean. Each ratio rescales the
    time-varying injections of every scenario (ratio 1 is the set itself).

    Raises:
        ConfigError: empty scenario set or ratio list
    """
    scenario_set = list(scenario_set)
    if not scenario_set:
        raise ConfigError("scenario set is empty")
    if not ratios:
        raise ConfigError("at least one injection ratio is required")

    def scenario_cost(params: ControllerParams):
        return lambda sc: cost(rollout(model, sc, params.controller, params, clamp=clamp,
                                       p_convention=p_convention), spec)

    rows = []
    for ratio in ratios:
        batch = scenario_set if ratio == 1.0 else [scaled(sc, ratio) for sc in scenario_set]
        adaptive_costs = run_batch(scenario_cost(params_adaptive), batch, workers)
        linear_costs = run_batch(scenario_cost(params_linear), batch, workers)
        for index, (ca, cl) in enumerate(zip(adaptive_costs, linear_costs)):
            winner = 'tie' if ca == cl else ('adaptive' if ca < cl else 'linear')
            rows.append({'ratio': float(ratio), 'scenario': index, 'adaptive_cost': ca,
                         'linear_cost': cl, 'winner': winner})
        logger.info(f"ratio {ratio}: adaptive {np.mean(adaptive_costs):.6g}, linear {np.mean(linear_costs):.6g}")

    per_scenario = pd.DataFrame(rows)
    grouped = per_scenario.groupby('ratio', sort=False)
    summary = pd.DataFrame({
        'adaptive_mean': grouped['adaptive_cost'].mean(),
        'adaptive_std': grouped['adaptive_cost'].std(ddof=0),
        'linear_mean': grouped['linear_cost'].mean(),
        'linear_std': grouped['linear_cost'].std(ddof=0),
        'adaptive_wins': grouped['winner'].apply(lambda w: int((w == 'adaptive').sum())),
        'scenarios': grouped.size(),
    }).reset_index()
    summary['improvement_pct'] = np.where(
        summary['linear_mean'] > 0,
        100.0 * (summary['linear_mean'] - summary['adaptive_mean']) / summary['linear_mean'].where(summary['linear_mean'] > 0, 1.0),
        0.0,
    )

    notes = [f"{name} parameters are not certified" for name in uncertified]
    return ComparisonReport(per_scenario=per_scenario, summary=summary, notes=notes)
