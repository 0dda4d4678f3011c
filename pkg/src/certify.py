"""
Stability analysis of the adaptive closed loop.

Works in the reduced coordinates x(t) = (v_tilde - v*, phi_hat^T (a_tilde - a*)),
whose transition matrix is

    M(t) = [[I - X K, -X], [G(t), alpha I]],   G(t) = diag(phi_i(t)^T A_i phi_i(t)).

Conditions are evaluated on a finite set of basis samples; an analytic worst
case over |phi| <= b is reported alongside when a bound is given.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg

from .control import ControllerParams
from .engine import Trajectory, rollout
from .errors import ConfigError, DimensionError, InfeasibleError, ModelError, NumericalError
from .grid import FeederModel
from .scenario import LoadScenario, decompose

logger = logging.getLogger(__name__)

CONDITION_TOLERANCE = 1e-9
MODES = ('centralized', 'decentralized', 'both')
GAIN_FORM_NOTE = ("disturbance gain is the geometric sum (1-(1-eps)^t)/eps; "
                  "the form (1-eps^t)/(1-eps) does not match that sum")


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    M: np.ndarray
    t: Optional[int] = None

    @property
    def n(self) -> int:
        return self.M.shape[0] // 2

    @property
    def lower_left(self) -> np.ndarray:
        return self.M[self.n:, :self.n]


@dataclass(frozen=True, eq=False)
class EquilibriumPoint:
    v_star: np.ndarray   # (n,)
    a_star: np.ndarray   # (n, m_max)
    t: Optional[int] = None


@dataclass(frozen=True)
class ConditionResult:
    """Outcome of one inequality; margin is the signed slack (negative when violated)"""
    passed: bool
    margin: float
    detail: str = ''

    @classmethod
    def from_margin(cls, margin: float, detail: str = '') -> 'ConditionResult':
        margin = float(margin)
        return cls(passed=bool(margin >= -CONDITION_TOLERANCE), margin=margin, detail=detail)

    def to_dict(self) -> dict:
        return {'passed': self.passed, 'margin': self.margin, 'detail': self.detail}


@dataclass(frozen=True)
class GainBounds:
    """Decentralized gain interval and the eigenvalue range of X^-1 behind the matrix condition"""
    epsilon: float
    k_lower: float
    k_upper: float
    x_inv_min: float
    x_inv_max: float

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.k_lower + self.k_upper)


@dataclass
class StabilityReport:
    mode: str
    epsilon: float
    alpha: float
    conditions: Dict[str, ConditionResult] = field(default_factory=dict)
    spectral_radii: List[float] = field(default_factory=list)
    spectral_radius_max: float = 0.0
    contraction_bound: float = float('inf')
    operator_norm_max: float = 0.0
    sample_count: int = 0
    implication_holds: Optional[bool] = None
    iss: dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def _all(self, names: Sequence[str]) -> bool:
        return all(self.conditions[name].passed for name in names if name in self.conditions)

    @property
    def theorem2_passed(self) -> bool:
        return self._all(['parameters', 'condition_a', 'condition_b', 'condition_c'])

    @property
    def corollary1_passed(self) -> bool:
        return self._all(['parameters', 'decentralized_a', 'decentralized_b', 'decentralized_c'])

    @property
    def passed(self) -> bool:
        if self.mode == 'centralized':
            return self.theorem2_passed
        if self.mode == 'decentralized':
            return self.corollary1_passed
        return self.theorem2_passed and self.corollary1_passed

    def failed_conditions(self) -> List[str]:
        return [name for name, result in self.conditions.items() if not result.passed]

    def to_dict(self) -> dict:
        return {
            'mode': self.mode,
            'passed': self.passed,
            'epsilon': self.epsilon,
            'alpha': self.alpha,
            'theorem2_passed': self.theorem2_passed,
            'corollary1_passed': self.corollary1_passed,
            'implication_holds': self.implication_holds,
            'conditions': {name: result.to_dict() for name, result in self.conditions.items()},
            'spectral_radius_max': self.spectral_radius_max,
            'contraction_bound': self.contraction_bound,
            'operator_norm_max': self.operator_norm_max,
            'sample_count': self.sample_count,
            'iss': dict(self.iss),
            'warnings': list(self.warnings),
        }


def _phi_samples(phi_samples, params: ControllerParams) -> np.ndarray:
    samples = np.asarray(phi_samples, dtype=float)
    if samples.ndim == 2:
        samples = samples[None]
    if samples.shape[0] == 0:
        raise ConfigError("at least one basis sample is required")
    if samples.shape[1:] != (params.n, params.m_max):
        raise DimensionError(f"basis samples must be (S, {params.n}, {params.m_max}), got {samples.shape}")
    return samples


def transition_matrix(model: FeederModel, params: ControllerParams, phi_t, t: Optional[int] = None) -> TransitionMatrix:
    """[[I - X K, -X], [phi_hat^T A_hat phi_hat, alpha I]] at one time step"""
    if params.n != model.n:
        raise DimensionError(f"params have {params.n} buses, model has {model.n}")
    n = model.n
    g = params.gram(phi_t)
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = np.eye(n) - model.X * params.k[None, :]
    M[:n, n:] = -model.X
    M[n:, :n] = np.diag(g)
    M[n:, n:] = params.alpha * np.eye(n)
    return TransitionMatrix(M=M, t=t)


def spectral_radius(M) -> float:
    """max |lambda_j(M)| from a general eigenvalue solve"""
    M = np.asarray(M.M if isinstance(M, TransitionMatrix) else M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"spectral radius needs a square matrix, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericalError("matrix has non-finite entries")
    try:
        return float(np.max(np.abs(linalg.eigvals(M))))
    except linalg.LinAlgError as e:
        raise NumericalError(f"eigenvalue solver did not converge: {e}")


def gain_bounds(model: FeederModel, epsilon: float) -> GainBounds:
    """
    Decentralized interval eps * lambda_max(X^-1) <= k_i <= (2 - eps) * lambda_min(X^-1),
    which implies eps X^-1 <= K <= (2 - eps) X^-1.

    Raises:
        ConfigError: epsilon outside (0, 2)
        InfeasibleError: interval empty for this X
    """
    if not 0 < epsilon < 2:
        raise ConfigError(f"epsilon must lie in (0, 2), got {epsilon}")
    x_inv_min = 1.0 / model.x_lambda_max
    x_inv_max = 1.0 / model.x_lambda_min
    lower, upper = epsilon * x_inv_max, (2.0 - epsilon) * x_inv_min
    if lower > upper * (1 + 1e-12):
        raise InfeasibleError(
            f"decentralized gain interval is empty for eps={epsilon} (kappa(X)={model.x_condition:.1f}; "
            f"largest feasible eps is {max_decentralized_epsilon(model):.4g})")
    return GainBounds(epsilon=float(epsilon), k_lower=lower, k_upper=max(lower, upper),
                      x_inv_min=x_inv_min, x_inv_max=x_inv_max)


def max_decentralized_epsilon(model: FeederModel) -> float:
    """Largest epsilon with a non-empty decentralized gain interval: 2 / (kappa(X) + 1)"""
    return 2.0 / (model.x_condition + 1.0)


def resolve_epsilon(model: FeederModel, value) -> float:
    """'auto' picks min(0.01, 1/(kappa(X)+1)), inside the decentralized feasible range"""
    if isinstance(value, str):
        if value != 'auto':
            raise ConfigError(f"epsilon must be a number or 'auto', got {value!r}")
        return min(0.01, 1.0 / (model.x_condition + 1.0))
    value = float(value)
    if not 0 < value < 1:
        raise ConfigError(f"epsilon must lie in (0, 1), got {value}")
    return value


def _parameter_check(params: ControllerParams) -> ConditionResult:
    margins = [float(np.min(params.k))]
    problems = []
    if margins[0] <= 0:
        problems.append('k_i must be > 0')
    if params.controller == 'adaptive':
        for i, m in enumerate(params.dims):
            block = params.A[i, :m, :m]
            if not np.allclose(block, block.T, rtol=0, atol=1e-12):
                problems.append(f'A_{i + 1} is not symmetric')
            margins.append(float(linalg.eigvalsh(0.5 * (block + block.T))[0]))
        if min(margins[1:]) <= 0:
            problems.append('A_i must be positive definite')
    if params.u_max is not None and np.any(params.u_max <= 0):
        problems.append('u_max must be > 0')
    return ConditionResult(passed=not problems, margin=min(margins), detail="; ".join(problems))


def _theorem2_conditions(model: FeederModel, params: ControllerParams, samples: np.ndarray,
                         worst_case_bound: Optional[np.ndarray]) -> Dict[str, object]:
    eps, alpha = params.epsilon, params.alpha
    x_sqrt = model.x_sqrt
    s_eig = linalg.eigvalsh(x_sqrt @ (params.k[:, None] * x_sqrt))
    margin_a = min(s_eig[0] - eps, (2.0 - eps) - s_eig[-1])
    margin_b = min(alpha, (1.0 - eps) - alpha)
    damping = alpha * (1.0 - s_eig[0])  # alpha * lambda_max(I - X^1/2 K X^1/2)

    lhs = np.array([
        linalg.eigvalsh(x_sqrt @ (params.gram(phi)[:, None] * x_sqrt))[-1] + damping
        for phi in samples
    ])
    results = {
        'condition_a': ConditionResult.from_margin(
            margin_a, f"eig(X^1/2 K X^1/2) in [{s_eig[0]:.6g}, {s_eig[-1]:.6g}], required [eps, 2-eps]"),
        'condition_b': ConditionResult.from_margin(margin_b, f"alpha={alpha:.6g}, required (0, {1 - eps:.6g}]"),
        'condition_c': ConditionResult.from_margin(
            (1.0 - eps) - lhs.max(), f"max left side {lhs.max():.6g} over {len(samples)} samples, required <= 1-eps"),
        'condition_c_strict': ConditionResult.from_margin(
            (1.0 - eps) ** 2 - lhs.max(), "left side <= (1-eps)^2 bounds the spectral radius by 1-eps"),
    }
    if worst_case_bound is not None:
        g_worst = _worst_case_gram(params, worst_case_bound)
        lhs_worst = linalg.eigvalsh(x_sqrt @ (g_worst[:, None] * x_sqrt))[-1] + damping
        results['condition_c_worst_case'] = ConditionResult.from_margin(
            (1.0 - eps) - lhs_worst, f"worst case over |phi| <= b: left side {lhs_worst:.6g}")
    return {'results': results, 'lhs_max': float(lhs.max())}


def _worst_case_gram(params: ControllerParams, bound) -> np.ndarray:
    """lambda_max(A_i) * m_i * b_i^2 >= phi_i^T A_i phi_i whenever |phi_i,k| <= b_i"""
    bound = np.broadcast_to(np.asarray(bound, dtype=float), (params.n,))
    lam = np.array([linalg.eigvalsh(0.5 * (params.A[i, :m, :m] + params.A[i, :m, :m].T))[-1]
                    for i, m in enumerate(params.dims)])
    return np.maximum(lam, 0.0) * np.array(params.dims) * bound ** 2


def condition_c_cap(model: FeederModel, epsilon: float, alpha: float) -> float:
    """Per-bus ceiling on phi_i^T A_i phi_i in the decentralized condition (c)"""
    return (1.0 - epsilon) * (1.0 - alpha) / model.x_lambda_max


def _corollary1_conditions(model: FeederModel, params: ControllerParams, samples: np.ndarray,
                           worst_case_bound: Optional[np.ndarray]) -> Dict[str, ConditionResult]:
    eps, alpha = params.epsilon, params.alpha
    lower = eps / model.x_lambda_min
    upper = (2.0 - eps) / model.x_lambda_max
    margin_a = float(np.min(np.minimum(params.k - lower, upper - params.k)))
    cap = condition_c_cap(model, eps, alpha)
    g_max = max(float(params.gram(phi).max()) for phi in samples)
    results = {
        'decentralized_a': ConditionResult.from_margin(
            margin_a, f"k_i in [{lower:.6g}, {upper:.6g}] required, k in [{params.k.min():.6g}, {params.k.max():.6g}]"),
        'decentralized_b': ConditionResult.from_margin(
            min(alpha, (1.0 - eps) - alpha), f"alpha={alpha:.6g}, required (0, {1 - eps:.6g}]"),
        'decentralized_c': ConditionResult.from_margin(
            cap - g_max, f"max phi_i^T A_i phi_i = {g_max:.6g}, cap (1-eps)(1-alpha)/lambda_max(X) = {cap:.6g}"),
    }
    if worst_case_bound is not None:
        g_worst = float(_worst_case_gram(params, worst_case_bound).max())
        results['decentralized_c_worst_case'] = ConditionResult.from_margin(
            cap - g_worst, f"worst case lambda_max(A_i) m_i b_i^2 = {g_worst:.6g}")
    return results


def _spectral_summary(model: FeederModel, params: ControllerParams, samples: np.ndarray, report: StabilityReport):
    radii, norms = [], []
    for index, phi in enumerate(samples):
        M = transition_matrix(model, params, phi, t=index).M
        radii.append(spectral_radius(M))
        norms.append(float(linalg.norm(M, 2)))
    report.spectral_radii = radii
    report.spectral_radius_max = float(max(radii))
    report.operator_norm_max = float(max(norms))
    report.sample_count = len(samples)


def _finish(report: StabilityReport, lhs_max: Optional[float]):
    eps = report.epsilon
    if lhs_max is not None and report.conditions['condition_a'].passed and report.conditions['condition_b'].passed:
        report.contraction_bound = float(max(1.0 - eps, np.sqrt(max(lhs_max, 0.0))))
    report.iss = {
        'decay_rate': 1.0 - eps,
        'disturbance_gain_limit': 1.0 / eps,
        'euclidean_certificate': bool(report.operator_norm_max <= 1.0 - eps + CONDITION_TOLERANCE),
        'rho_bar': None,
        'note': GAIN_FORM_NOTE,
    }
    if report.theorem2_passed and report.contraction_bound > 1.0 - eps + CONDITION_TOLERANCE:
        message = (f"conditions (a)-(c) hold but only bound the spectral radius by {report.contraction_bound:.6g} "
                   f"> 1-eps; condition_c_strict gives 1-eps")
        report.warnings.append(message)
        logger.warning(message)
    if not report.iss['euclidean_certificate']:
        report.warnings.append(f"max ||M(t)||_2 = {report.operator_norm_max:.6g} > 1-eps: the ISS envelope is not "
                               f"guaranteed in the Euclidean norm")


def _certify(model: FeederModel, params: ControllerParams, phi_samples, worst_case_bound, mode: str) -> StabilityReport:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if params.n != model.n:
        raise DimensionError(f"params have {params.n} buses, model has {model.n}")
    if not model.x_lambda_min > 0:
        raise ModelError("X is not positive definite")
    samples = _phi_samples(phi_samples, params)

    report = StabilityReport(mode=mode, epsilon=params.epsilon, alpha=params.alpha)
    report.conditions['parameters'] = _parameter_check(params)
    theorem2 = _theorem2_conditions(model, params, samples, worst_case_bound)
    report.conditions.update(theorem2['results'])
    if mode in ('decentralized', 'both'):
        report.conditions.update(_corollary1_conditions(model, params, samples, worst_case_bound))
        report.implication_holds = (not report.corollary1_passed) or report.theorem2_passed
        if not report.implication_holds:
            logger.error("decentralized conditions hold while the centralized ones fail")
    _spectral_summary(model, params, samples, report)
    _finish(report, theorem2['lhs_max'])
    logger.debug(f"certify[{mode}]: passed={report.passed}, rho_max={report.spectral_radius_max:.6g}")
    return report


def check_theorem2(model: FeederModel, params: ControllerParams, phi_samples,
                   worst_case_bound=None) -> StabilityReport:
    """
    Centralized conditions on every basis sample:

        (a) eig(X^1/2 K X^1/2) in [eps, 2 - eps]
        (b) 0 < alpha <= 1 - eps
        (c) lambda_max(X^1/2 G X^1/2) + alpha lambda_max(I - X^1/2 K X^1/2) <= 1 - eps

    Raises:
        ModelError: X not positive definite
        ConfigError: no basis samples
    """
    return _certify(model, params, phi_samples, worst_case_bound, 'centralized')


def check_corollary1(model: FeederModel, params: ControllerParams, phi_samples,
                     worst_case_bound=None) -> StabilityReport:
    """
    Per-bus conditions (plus the centralized ones, to verify the implication):

        (a) eps lambda_max(X^-1) <= k_i <= (2 - eps) lambda_min(X^-1)
        (b) 0 < alpha <= 1 - eps
        (c) phi_i^T A_i phi_i <= (1 - eps)(1 - alpha) / lambda_max(X)
    """
    return _certify(model, params, phi_samples, worst_case_bound, 'decentralized')


def certify_params(model: FeederModel, params: ControllerParams, phi_samples, worst_case_bound=None,
                   mode: str = 'centralized') -> StabilityReport:
    return _certify(model, params, phi_samples, worst_case_bound, mode)


def equilibrium(model: FeederModel, params: ControllerParams, phi_t, a, delta_v_t,
                t: Optional[int] = None) -> EquilibriumPoint:
    """
    Fixed point of the closed loop with phi and delta_v frozen at time t:

        v* = (K + G / (1 - alpha))^-1 (phi_hat^T a + X^-1 delta_v)
        a*_i = A_i phi_i v*_i / (1 - alpha)

    K and G are diagonal, so the solve is elementwise.

    Raises:
        NumericalError: alpha = 1 or a singular diagonal entry
    """
    phi_t = np.asarray(phi_t, dtype=float)
    a = np.asarray(a, dtype=float)
    delta_v_t = np.asarray(delta_v_t, dtype=float)
    if a.shape != (params.n, params.m_max) or delta_v_t.shape != (params.n,):
        raise DimensionError(f"a must be {(params.n, params.m_max)} and delta_v {(params.n,)}, "
                             f"got {a.shape} and {delta_v_t.shape}")
    if params.alpha >= 1.0:
        raise NumericalError(f"equilibrium undefined for alpha={params.alpha}", t=t)

    g = params.gram(phi_t)
    diagonal = params.k + g / (1.0 - params.alpha)
    if np.any(np.abs(diagonal) < 1e-300):
        raise NumericalError("equilibrium system is singular", t=t)
    rhs = np.einsum('nm,nm->n', phi_t, a) + model.x_inv @ delta_v_t
    v_star = rhs / diagonal
    a_star = np.einsum('nkl,nl->nk', params.A, phi_t) * v_star[:, None] / (1.0 - params.alpha)
    if not (np.all(np.isfinite(v_star)) and np.all(np.isfinite(a_star))):
        raise NumericalError("equilibrium is not finite", t=t)
    return EquilibriumPoint(v_star=v_star, a_star=a_star, t=t)


def closed_loop_step(model: FeederModel, params: ControllerParams, phi_t, a, delta_v_t,
                     v_tilde, a_tilde):
    """One unclamped step of the decomposed closed loop with frozen phi and delta_v"""
    phi_t = np.asarray(phi_t, dtype=float)
    u = params.k * v_tilde + np.einsum('nm,nm->n', phi_t, a_tilde)
    v_next = v_tilde - model.X @ (u - np.einsum('nm,nm->n', phi_t, a)) + delta_v_t
    a_next = params.alpha * a_tilde + v_tilde[:, None] * np.einsum('nkl,nl->nk', params.A, phi_t)
    return v_next, a_next


def fixed_point_residual(model: FeederModel, params: ControllerParams, phi_t, a, delta_v_t,
                         point: EquilibriumPoint) -> float:
    v_next, a_next = closed_loop_step(model, params, phi_t, a, delta_v_t, point.v_star, point.a_star)
    return float(max(np.max(np.abs(v_next - point.v_star)), np.max(np.abs(a_next - point.a_star))))


def iss_envelope(x0_norm: float, epsilon: float, rho_bar: float, t: int) -> float:
    """
    (1-eps)^t ||x(0)|| + (1 - (1-eps)^t) / eps * rho_bar

    Raises:
        ConfigError: eps outside (0, 1), negative norm, rho_bar or t
    """
    if not 0 < epsilon < 1:
        raise ConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    if x0_norm < 0 or rho_bar < 0 or t < 0:
        raise ConfigError(f"x0_norm, rho_bar and t must be >= 0, got {x0_norm}, {rho_bar}, {t}")
    decay = (1.0 - epsilon) ** t
    return float(decay * x0_norm + (1.0 - decay) / epsilon * rho_bar)


def alternate_iss_gain(epsilon: float, t: int) -> float:
    """The (1-eps^t)/(1-eps) gain form, kept to report its gap to the geometric sum"""
    return (1.0 - epsilon ** t) / (1.0 - epsilon)


def _equilibrium_path(model: FeederModel, params: ControllerParams, scenario: LoadScenario, steps: int):
    parts = decompose(model, scenario)
    return [equilibrium(model, params, scenario.phi[t], parts.a, parts.delta_v[t], t=t) for t in range(steps)]


def _adaptive_trajectory(model, params, scenario, trajectory: Optional[Trajectory]) -> Trajectory:
    if trajectory is None:
        trajectory = rollout(model, scenario, params.controller, params, clamp=False)
    if trajectory.clamp and trajectory.saturation_count:
        logger.warning("disturbance bound evaluated on a saturated trajectory; the ISS analysis ignores saturation")
    return trajectory


def rho_series(model: FeederModel, params: ControllerParams, scenario: LoadScenario,
               trajectory: Optional[Trajectory] = None) -> np.ndarray:
    """
    Disturbance terms rho(t) = (rho_v(t), rho_a(t)), t = 0..T-2, shape (T-1, 2n):

        rho_v(t) = v*(t+1) - v*(t)
        rho_a(t) = phi_hat(t)^T (a(t+1) - a*(t)) - phi_hat(t+1)^T (a(t+1) - a*(t+1))

    rho_a depends on the adaptation state a(t+1), taken from the trajectory (an
    unclamped rollout of the given params when none is passed).

    Raises:
        ConfigError: horizon below 2
        NumericalError: singular equilibrium (with t)
    """
    trajectory = _adaptive_trajectory(model, params, scenario, trajectory)
    T = trajectory.horizon
    if T < 2:
        raise ConfigError(f"rho needs a horizon of at least 2, got {T}")
    points = _equilibrium_path(model, params, scenario, T)
    phi, a_tilde = scenario.phi, trajectory.a_tilde

    rho = np.zeros((T - 1, 2 * model.n))
    for t in range(T - 1):
        rho[t, :model.n] = points[t + 1].v_star - points[t].v_star
        now = np.einsum('nm,nm->n', phi[t], a_tilde[t + 1] - points[t].a_star)
        later = np.einsum('nm,nm->n', phi[t + 1], a_tilde[t + 1] - points[t + 1].a_star)
        rho[t, model.n:] = now - later
    return rho


def rho_bar(model: FeederModel, params: ControllerParams, scenario: LoadScenario,
            trajectory: Optional[Trajectory] = None) -> float:
    """max_t sqrt(||rho_v(t)||^2 + ||rho_a(t)||^2)"""
    rho = rho_series(model, params, scenario, trajectory)
    return float(np.max(np.linalg.norm(rho, axis=1)))


def iss_deviation(model: FeederModel, params: ControllerParams, scenario: LoadScenario,
                  trajectory: Optional[Trajectory] = None) -> np.ndarray:
    """
    Deviation x(t) = (v_tilde(t) - v*(t), phi_hat(t)^T (a(t) - a*(t))) for t = 0..T-1, shape (T, 2n).

    Along the trajectory, x(t+1) = M(t) x(t) - rho(t) holds exactly.
    """
    trajectory = _adaptive_trajectory(model, params, scenario, trajectory)
    T = trajectory.horizon
    points = _equilibrium_path(model, params, scenario, T)
    x = np.zeros((T, 2 * model.n))
    for t in range(T):
        x[t, :model.n] = trajectory.v_tilde[t] - points[t].v_star
        x[t, model.n:] = np.einsum('nm,nm->n', scenario.phi[t], trajectory.a_tilde[t] - points[t].a_star)
    return x
