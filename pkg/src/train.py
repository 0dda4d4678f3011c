"""Gradient training of controller parameters through unrolled closed-loop rollouts"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from .certify import CONDITION_TOLERANCE, condition_c_cap, gain_bounds
from .control import CONTROLLERS, ControllerParams
from .engine import CostSpec, cost, rollout, run_batch
from .errors import ConfigError, InfeasibleError, NumericalError
from .grid import FeederModel
from .scenario import LoadScenario, derive_seed, make_rng, phi_bound

logger = logging.getLogger(__name__)

GRADIENT_MODES = ('analytic', 'finite-difference')
FD_STEP = 1e-5
FACTOR_JITTER = 1e-8  # A_i = L_i L_i^T + FACTOR_JITTER * I
INIT_CAP_FRACTION = 0.1


@dataclass
class TrainConfig:
    """Training hyperparameters (learning_rate is the optimizer step, alpha the adaptation decay)"""
    learning_rate: float = 0.05
    batch_size: int = 8
    horizon: int = 200
    epochs: int = 100
    epsilon: float = 0.01
    alpha: Optional[float] = None
    gradient_mode: str = 'analytic'
    seed: int = 0
    cost: CostSpec = field(default_factory=CostSpec)
    controller: str = 'adaptive'
    clamp: bool = False
    p_convention: str = 'next'
    u_max_min: float = 0.01
    u_max_max: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = 1.0 - self.epsilon

    def validate(self):
        if self.batch_size < 1 or self.horizon < 1 or self.epochs < 0:
            raise ConfigError(f"need batch_size >= 1, horizon >= 1, epochs >= 0; got "
                              f"{self.batch_size}, {self.horizon}, {self.epochs}")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(f"gradient_mode must be one of {GRADIENT_MODES}, got {self.gradient_mode!r}")
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if not 0 < self.u_max_min <= self.u_max_max:
            raise ConfigError(f"empty action-bound range [{self.u_max_min}, {self.u_max_max}]")


@dataclass
class TrainLog:
    """
    Per-epoch record: batch loss, gradient norm, certification margins, params hash.

    min_margin is the smaller of gain_margin and adaptation_margin (NaN for a
    linear controller), or a violated alpha margin.
    """
    rows: List[dict] = field(default_factory=list)

    COLUMNS = ('epoch', 'loss', 'grad_norm', 'min_margin', 'gain_margin', 'adaptation_margin', 'params_hash')

    def record(self, epoch: int, loss: float, grad_norm: float, min_margin: float, params_hash: str,
               gain_margin: float = float('nan'), adaptation_margin: float = float('nan')):
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite batch loss at epoch {epoch}")
        self.rows.append({'epoch': epoch, 'loss': float(loss), 'grad_norm': float(grad_norm),
                          'min_margin': float(min_margin), 'gain_margin': float(gain_margin),
                          'adaptation_margin': float(adaptation_margin), 'params_hash': params_hash})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.COLUMNS))

    @property
    def losses(self) -> np.ndarray:
        return np.array([row['loss'] for row in self.rows])

    def hashes(self) -> List[str]:
        return [row['params_hash'] for row in self.rows]


@dataclass(frozen=True, eq=False)
class Gradient:
    """Loss gradient with respect to k, A (entrywise) and the Cholesky-style factors L"""
    k: np.ndarray
    A: np.ndarray
    L: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.k ** 2) + np.sum(self.L ** 2)))


class Adam:
    """
    Adam optimizer over a dict of arrays.

    Args:
        learning_rate: step size
        beta1, beta2: decay rates of the first and second moment estimates
        epsilon: denominator offset
    """

    def __init__(self, learning_rate=0.05, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def update(self, params: dict, grads: dict) -> dict:
        self.t += 1
        updated = {}
        for key in params:
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * grads[key]
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * grads[key] ** 2
            m_hat = self.m[key] / (1 - self.beta1 ** self.t)
            v_hat = self.v[key] / (1 - self.beta2 ** self.t)
            updated[key] = params[key] - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
        return updated


def params_hash(params: ControllerParams) -> str:
    digest = hashlib.sha256()
    for array in (params.k, params.A, np.array([params.alpha, params.epsilon])):
        digest.update(np.ascontiguousarray(array, dtype=float).tobytes())
    return digest.hexdigest()


def _factor_mask(dims: Sequence[int]) -> np.ndarray:
    """(n, m, m) mask of the lower-triangular entries inside each bus block"""
    m = max(dims)
    inside = np.arange(m)[None, :] < np.array(dims)[:, None]
    return np.tril(np.ones((m, m), dtype=bool))[None] & inside[:, :, None] & inside[:, None, :]


def matrices_from_factors(L: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """A_i = L_i L_i^T + FACTOR_JITTER * I on each bus block"""
    L = np.asarray(L, dtype=float) * _factor_mask(dims)
    A = np.einsum('nik,njk->nij', L, L)
    for i, m in enumerate(dims):
        A[i, :m, :m] += FACTOR_JITTER * np.eye(m)
    return A


def factors_from_matrices(A: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Lower factors with L L^T + FACTOR_JITTER I = A (plain Cholesky of A if A - jitter is not PD)"""
    L = np.zeros_like(A, dtype=float)
    for i, m in enumerate(dims):
        block = 0.5 * (A[i, :m, :m] + A[i, :m, :m].T)
        try:
            L[i, :m, :m] = linalg.cholesky(block - FACTOR_JITTER * np.eye(m), lower=True)
        except linalg.LinAlgError:
            try:
                L[i, :m, :m] = linalg.cholesky(block, lower=True)
            except linalg.LinAlgError:
                raise NumericalError(f"A_{i + 1} is not positive definite")
    return L


def params_from_factors(k, L, dims, alpha, epsilon, u_max=None, controller='adaptive') -> ControllerParams:
    dims = tuple(dims)
    A = matrices_from_factors(L, dims) if controller == 'adaptive' else np.zeros((len(dims), max(dims), max(dims)))
    return ControllerParams(k=np.asarray(k, dtype=float), A=A, dims=dims, alpha=alpha, epsilon=epsilon,
                            u_max=u_max, controller=controller)


def _batch_horizon(scenarios: Sequence[LoadScenario], T: Optional[int]) -> int:
    if not scenarios:
        raise ConfigError("batch is empty")
    if T is None:
        horizons = {sc.horizon for sc in scenarios}
        if len(horizons) != 1:
            raise ConfigError(f"scenarios in a batch must share a horizon, got {sorted(horizons)}")
        return horizons.pop()
    if any(sc.horizon < T for sc in scenarios):
        raise ConfigError(f"horizon {T} exceeds a scenario in the batch")
    return T


def batch_loss(model: FeederModel, params: ControllerParams, scenarios: Sequence[LoadScenario], spec: CostSpec,
               T: Optional[int] = None, clamp: bool = False, p_convention: str = 'next', workers: int = 1) -> float:
    """
    Sum of rollout costs over the batch (each rollout starts from the scenario's q(0)).

    Raises:
        DivergenceError: with the index of the offending scenario
    """
    T = _batch_horizon(scenarios, T)
    costs = run_batch(lambda sc: cost(rollout(model, sc, params.controller, params, T=T, clamp=clamp,
                                              p_convention=p_convention), spec),
                      scenarios, workers)
    return float(sum(costs))


def _norm_gradient(x: np.ndarray, kind: str) -> np.ndarray:
    """Subgradient of a vector norm; 0 at the kinks"""
    if kind == 'L1':
        return np.sign(x)
    if kind == 'L2':
        size = np.sqrt(np.sum(x * x))
        return x / size if size > 0 else np.zeros_like(x)
    grad = np.zeros_like(x)
    j = int(np.argmax(np.abs(x)))
    grad[j] = np.sign(x[j])
    return grad


def _scenario_gradient(model: FeederModel, params: ControllerParams, scenario: LoadScenario, spec: CostSpec,
                       T: int, clamp: bool, p_convention: str) -> Tuple[float, np.ndarray, np.ndarray]:
    """Reverse accumulation through one rollout; returns (cost, dJ/dk, dJ/dA)"""
    traj = rollout(model, scenario, params.controller, params, T=T, clamp=clamp, p_convention=p_convention)
    v, u, sat = traj.v_tilde, traj.u, traj.saturated
    phi = scenario.phi
    X, k, alpha = model.X, params.k, params.alpha
    adaptive = params.controller == 'adaptive'
    n, m = params.n, params.m_max
    a_phi = np.einsum('nkl,tnl->tnk', params.A, phi[:T + 1]) if adaptive else None

    grad_k = np.zeros(n)
    grad_A = np.zeros((n, m, m))
    lam_v_next = np.zeros(n)
    lam_a_next = np.zeros((n, m))
    for t in range(T, -1, -1):
        mu = np.zeros(n)
        if t >= 1:
            mu += spec.gamma * _norm_gradient(u[t], spec.u_norm)
        if t < T:
            mu -= X @ lam_v_next
        if clamp:
            mu[sat[t]] = 0.0

        lam_v = k * mu
        if t >= 1:
            lam_v += _norm_gradient(v[t], spec.v_norm)
        if t < T:
            lam_v += lam_v_next
            if adaptive:
                lam_v += np.einsum('nk,nk->n', lam_a_next, a_phi[t])
                grad_A += v[t][:, None, None] * lam_a_next[:, :, None] * phi[t][:, None, :]
        grad_k += mu * v[t]

        if adaptive:
            lam_a = mu[:, None] * phi[t]
            if t < T:
                lam_a += alpha * lam_a_next
            lam_a_next = lam_a
        lam_v_next = lam_v

    return cost(traj, spec), grad_k, grad_A


def _factor_gradient(grad_A: np.ndarray, L: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    return np.einsum('nij,njk->nik', grad_A + np.transpose(grad_A, (0, 2, 1)), L) * _factor_mask(dims)


def value_and_gradient(model: FeederModel, params: ControllerParams, scenarios: Sequence[LoadScenario],
                       spec: CostSpec, factors: Optional[np.ndarray] = None, T: Optional[int] = None,
                       clamp: bool = False, p_convention: str = 'next', workers: int = 1) -> Tuple[float, Gradient]:
    """Batch loss and its analytic gradient from one forward/backward sweep per scenario"""
    T = _batch_horizon(scenarios, T)
    if factors is None:
        factors = (factors_from_matrices(params.A, params.dims) if params.controller == 'adaptive'
                   else np.zeros_like(params.A))
    parts = run_batch(lambda sc: _scenario_gradient(model, params, sc, spec, T, clamp, p_convention),
                      scenarios, workers)
    loss = float(sum(part[0] for part in parts))
    grad_k = np.sum([part[1] for part in parts], axis=0)
    grad_A = np.sum([part[2] for part in parts], axis=0)
    grad = Gradient(k=grad_k, A=grad_A, L=_factor_gradient(grad_A, factors, params.dims))
    if not (np.all(np.isfinite(grad.k)) and np.all(np.isfinite(grad.L))):
        raise NumericalError("gradient is not finite")
    return loss, grad


def _finite_difference(model: FeederModel, params: ControllerParams, scenarios, spec: CostSpec,
                       factors: np.ndarray, T: int, clamp: bool, p_convention: str, workers: int) -> Gradient:
    def loss_at(k, L):
        trial = params_from_factors(k, L, params.dims, params.alpha, params.epsilon, params.u_max,
                                    params.controller)
        return batch_loss(model, trial, scenarios, spec, T=T, clamp=clamp, p_convention=p_convention,
                          workers=workers)

    grad_k = np.zeros(params.n)
    for i in range(params.n):
        up, down = params.k.copy(), params.k.copy()
        up[i] += FD_STEP
        down[i] -= FD_STEP
        grad_k[i] = (loss_at(up, factors) - loss_at(down, factors)) / (2 * FD_STEP)

    grad_L = np.zeros_like(factors)
    if params.controller == 'adaptive':
        for index in zip(*np.nonzero(_factor_mask(params.dims))):
            up, down = factors.copy(), factors.copy()
            up[index] += FD_STEP
            down[index] -= FD_STEP
            grad_L[index] = (loss_at(params.k, up) - loss_at(params.k, down)) / (2 * FD_STEP)
    return Gradient(k=grad_k, A=np.full_like(params.A, np.nan), L=grad_L)


def gradient(model: FeederModel, params: ControllerParams, scenarios: Sequence[LoadScenario], spec: CostSpec,
             mode: str = 'analytic', factors: Optional[np.ndarray] = None, T: Optional[int] = None,
             clamp: bool = False, p_convention: str = 'next', workers: int = 1) -> Gradient:
    """
    Gradient of batch_loss over k and the factors L (A = L L^T + jitter I).

    analytic: reverse accumulation through the unrolled rollouts, sign
    subgradients for L1 terms (0 at zero), zero derivative through saturated
    actions when clamping.
    finite-difference: central differences with step 1e-5 on every k_i and
    every free entry of L (gradient.A is not available in this mode).

    Raises:
        NumericalError: non-finite gradient
    """
    if mode not in GRADIENT_MODES:
        raise ConfigError(f"gradient mode must be one of {GRADIENT_MODES}, got {mode!r}")
    if mode == 'analytic':
        return value_and_gradient(model, params, scenarios, spec, factors, T, clamp, p_convention, workers)[1]

    T = _batch_horizon(scenarios, T)
    if factors is None:
        factors = (factors_from_matrices(params.A, params.dims) if params.controller == 'adaptive'
                   else np.zeros_like(params.A))
        if params.controller == 'adaptive':
            params = params.with_updates(A=matrices_from_factors(factors, params.dims))
    grad = _finite_difference(model, params, scenarios, spec, factors, T, clamp, p_convention, workers)
    if not (np.all(np.isfinite(grad.k)) and np.all(np.isfinite(grad.L))):
        raise NumericalError("finite-difference gradient is not finite")
    return grad


def _worst_case_scale(bound, dims) -> np.ndarray:
    """m_i * b_i^2; buses with an all-zero basis (b_i = 0) use b_i = 1"""
    bound = np.broadcast_to(np.asarray(bound, dtype=float), (len(dims),))
    bound = np.where(bound > 0, bound, 1.0)
    return np.array(dims) * bound ** 2


def project(params: ControllerParams, model: FeederModel, epsilon: Optional[float] = None,
            phi_bound=1.0) -> ControllerParams:
    """
    Map params into the decentralized stability set: clip each k_i to the gain
    interval and shrink each A_i so lambda_max(A_i) m_i b_i^2 <= (1-eps)(1-alpha)/lambda_max(X).
    alpha and epsilon are untouched; feasible params come back unchanged.

    Raises:
        InfeasibleError: empty gain interval, or alpha >= 1 for an adaptive controller
    """
    eps = params.epsilon if epsilon is None else epsilon
    bounds = gain_bounds(model, eps)
    k = np.clip(params.k, bounds.k_lower, bounds.k_upper)
    A = params.A
    if params.controller == 'adaptive':
        cap = condition_c_cap(model, eps, params.alpha)
        if cap <= 0:
            raise InfeasibleError(f"condition (c) cap is {cap:.3g} for alpha={params.alpha}")
        scale = _worst_case_scale(phi_bound, params.dims)
        A = params.A.copy()
        for i, m in enumerate(params.dims):
            block = A[i, :m, :m]
            worst = float(linalg.eigvalsh(0.5 * (block + block.T))[-1]) * scale[i]
            if worst > cap:
                A[i, :m, :m] = block * (cap / worst)
    if np.array_equal(k, params.k) and np.array_equal(A, params.A):
        return params
    return params.with_updates(k=k, A=A)


def project_factors(L: np.ndarray, dims: Sequence[int], model: FeederModel, epsilon: float, alpha: float,
                    phi_bound=1.0) -> np.ndarray:
    """Shrink factors so L L^T + jitter I meets the per-bus condition (c) cap in the worst case"""
    cap = condition_c_cap(model, epsilon, alpha)
    scale = _worst_case_scale(phi_bound, dims)
    L = np.array(L, dtype=float)
    for i, m in enumerate(dims):
        limit = cap / scale[i] - FACTOR_JITTER
        if limit <= 0:
            raise InfeasibleError(f"condition (c) cap {cap:.3g} leaves no room for A_{i + 1}")
        top = float(linalg.eigvalsh(L[i, :m, :m] @ L[i, :m, :m].T)[-1])
        if top > limit:
            L[i, :m, :m] *= np.sqrt(limit / top)
    return L


def decentralized_margins(model: FeederModel, params: ControllerParams, phi_bound=1.0) -> Dict[str, float]:
    """
    Worst-case slack of each decentralized condition (no eigen-solves of M):

        gain:        distance of the closest k_i to the gain interval edge
        alpha:       min(alpha, 1 - eps - alpha)
        adaptation:  condition (c) cap minus the largest worst-case phi^T A_i phi (NaN for linear)

    Negative values mark a violated condition.
    """
    bounds = gain_bounds(model, params.epsilon)
    margins = {
        'gain': float(np.min(np.minimum(params.k - bounds.k_lower, bounds.k_upper - params.k))),
        'alpha': float(min(params.alpha, 1.0 - params.epsilon - params.alpha)),
        'adaptation': float('nan'),
    }
    if params.controller == 'adaptive':
        cap = condition_c_cap(model, params.epsilon, params.alpha)
        scale = _worst_case_scale(phi_bound, params.dims)
        worst = max(float(linalg.eigvalsh(params.A[i, :m, :m])[-1]) * scale[i] for i, m in enumerate(params.dims))
        margins['adaptation'] = cap - worst
    return margins


def decentralized_margin(model: FeederModel, params: ControllerParams, phi_bound=1.0) -> float:
    """
    Smallest slack over the gain and adaptation conditions. alpha = 1 - eps sits on
    its bound by default, so the alpha term only enters once it is violated.
    """
    margins = decentralized_margins(model, params, phi_bound)
    values = [margins['gain']]
    if not np.isnan(margins['adaptation']):
        values.append(margins['adaptation'])
    if margins['alpha'] < -CONDITION_TOLERANCE:
        values.append(margins['alpha'])
    return min(values)


def initial_params(model: FeederModel, config: TrainConfig, dims: Sequence[int], phi_bound=1.0,
                   rng: Optional[np.random.Generator] = None) -> Tuple[ControllerParams, np.ndarray]:
    """
    k_i at the gain-interval midpoint; small random factors scaled so the worst-case
    phi^T A phi is 10% of the condition (c) cap; u_max_i ~ U[u_max_min, u_max_max].

    Returns:
        (params, factors)
    """
    rng = rng or make_rng(derive_seed(config.seed, 'init'))
    dims = tuple(dims)
    n, m = len(dims), max(dims)
    bounds = gain_bounds(model, config.epsilon)
    k = np.full(n, bounds.midpoint)

    L = rng.standard_normal((n, m, m)) * _factor_mask(dims)
    u_max = rng.uniform(config.u_max_min, config.u_max_max, size=n)
    if config.controller == 'adaptive':
        cap = condition_c_cap(model, config.epsilon, config.alpha)
        scale = _worst_case_scale(phi_bound, dims)
        for i, mi in enumerate(dims):
            target = INIT_CAP_FRACTION * cap / scale[i] - FACTOR_JITTER
            if target <= 0:
                raise InfeasibleError(f"condition (c) cap {cap:.3g} leaves no room for A_{i + 1}")
            top = float(linalg.eigvalsh(L[i, :mi, :mi] @ L[i, :mi, :mi].T)[-1])
            L[i, :mi, :mi] *= np.sqrt(target / top) if top > 0 else 0.0
    else:
        L = np.zeros((n, m, m))

    params = params_from_factors(k, L, dims, config.alpha, config.epsilon, u_max, config.controller)
    return params, L


def fit(model: FeederModel, config: TrainConfig, scenario_sampler) -> Tuple[ControllerParams, TrainLog]:
    """
    Projected Adam descent on the batch loss.

    Each epoch draws H scenarios from scenario_sampler.sample(epoch, H), takes
    the gradient at the current params, applies one Adam step and projects back
    onto the decentralized stability set. Adam runs on k and L divided by their
    initial scales (gain midpoint, condition (c) cap), so one learning rate fits
    feeders of any impedance level. Returns the best-loss snapshot.

    Raises:
        InfeasibleError: empty gain interval for config.epsilon
        DivergenceError: a rollout exploded (a bug once projection is in place)
    """
    config.validate()
    first_batch = scenario_sampler.sample(0, config.batch_size)
    dims = first_batch[0].dims
    bound = np.max([phi_bound(sc) for sc in first_batch], axis=0)

    params, L = initial_params(model, config, dims, bound)
    log = TrainLog()
    logger.info(f"Training {config.controller} controller: {config.epochs} epochs, batch {config.batch_size}, "
                f"horizon {config.horizon}, eps={config.epsilon:.4g}, alpha={config.alpha:.4g}")
    if config.epochs == 0:
        return params, log

    k_scale = gain_bounds(model, config.epsilon).midpoint
    cap = condition_c_cap(model, config.epsilon, config.alpha)
    L_scale = np.sqrt(cap / _worst_case_scale(bound, dims))[:, None, None]
    optimizer = Adam(learning_rate=config.learning_rate)
    adaptive = config.controller == 'adaptive'
    run = dict(T=config.horizon, clamp=config.clamp, p_convention=config.p_convention, workers=config.workers)

    best_params, best_loss = params, np.inf
    for epoch in range(config.epochs):
        batch = first_batch if epoch == 0 else scenario_sampler.sample(epoch, config.batch_size)
        if config.gradient_mode == 'analytic':
            loss, grad = value_and_gradient(model, params, batch, config.cost, factors=L, **run)
        else:
            loss = batch_loss(model, params, batch, config.cost, **run)
            grad = gradient(model, params, batch, config.cost, mode='finite-difference', factors=L, **run)

        margins = decentralized_margins(model, params, bound)
        margin = decentralized_margin(model, params, bound)
        log.record(epoch + 1, loss, grad.norm(), margin, params_hash(params),
                   gain_margin=margins['gain'], adaptation_margin=margins['adaptation'])
        logger.info(f"epoch {epoch + 1}/{config.epochs}: loss={loss:.6g} grad_norm={grad.norm():.3g} "
                    f"margin={margin:.3g}")
        if loss < best_loss:
            best_params, best_loss = params, loss

        scaled_params = {'k': params.k / k_scale}
        scaled_grads = {'k': grad.k * k_scale}
        if adaptive:
            scaled_params['L'] = L / L_scale
            scaled_grads['L'] = grad.L * L_scale
        step = optimizer.update(scaled_params, scaled_grads)

        k = step['k'] * k_scale
        if adaptive:
            L = project_factors(step['L'] * L_scale, dims, model, config.epsilon, config.alpha, bound)
        candidate = params_from_factors(k, L, dims, config.alpha, config.epsilon, params.u_max, config.controller)
        params = project(candidate, model, config.epsilon, bound)

    logger.info(f"Best batch loss {best_loss:.6g} (first epoch {log.losses[0]:.6g})")
    return best_params, log
