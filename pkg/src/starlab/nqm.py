"""Noisy quadratic model: dynamics, closed-form loss, Monte Carlo rollouts.

The model trains a parameter vector phi against a quadratic loss whose
minimizer is resampled every step: at step t a fresh target xi_t ~ N(0,
noise_cov) is drawn, the gradient is H (phi_t - xi_t), and a linear optimizer
with nominal step alpha and preconditioner P applies

    phi_{t+1} = phi_t - (alpha I + P) H (phi_t - xi_t)
              = A phi_t + (I - A) xi_t.

Everything about the expected training loss is then computable in closed form
from the transition matrix A, which is what makes this model useful as an
oracle for stochastic meta-gradient estimators.

Per-step losses are recorded as the full quadratic form
(phi - xi)' H (phi - xi), without the conventional one-half factor, so that
trajectory means estimate exactly the closed-form objective returned by
``expected_loss``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng

__all__ = [
    "DIVERGENCE_LIMIT",
    "QuadraticTask",
    "LinearOptimizerSpec",
    "DynamicsMatrix",
    "Trajectory",
    "FdGradient",
    "GradientVarianceEstimate",
    "McLossEstimate",
    "build_dynamics",
    "state_covariance",
    "expected_loss",
    "rollout_mc",
    "mc_expected_loss",
    "meta_gradient_fd",
    "empirical_gradient_variance",
    "gradient_variance_profile",
    "minimize_expected_loss",
]

# Any per-step loss above this (or non-finite) marks a run as diverged.
DIVERGENCE_LIMIT = 1e30

# Eigenvalues of the Hessian below this floor make H^{-1/2} meaningless.
EIGENVALUE_FLOOR = 1e-12

_FD_STEP = 1e-5


def _as_matrix(value, dim: int, name: str) -> np.ndarray:
    out = np.array(value, dtype=float)
    if out.shape != (dim, dim):
        raise ValueError(f"{name} must have shape ({dim}, {dim}), got {out.shape}")
    return out

def _check_symmetric(mat: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > 1e-12 * scale:
        raise ValueError(f"{name} must be symmetric")


@dataclass(frozen=True)
class QuadraticTask:
    """A noisy quadratic training problem.

    hessian must be symmetric positive definite; noise_cov and init_cov are
    symmetric positive semidefinite covariances of the per-step targets and of
    the initial iterate.
    """

    dim: int
    hessian: np.ndarray
    noise_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be positive")
        hessian = _as_matrix(self.hessian, self.dim, "hessian")
        noise_cov = _as_matrix(self.noise_cov, self.dim, "noise_cov")
        init_cov = _as_matrix(self.init_cov, self.dim, "init_cov")
        init_mean = np.array(self.init_mean, dtype=float)
        if init_mean.shape != (self.dim,):
            raise ValueError("init_mean must be a vector of length dim")
        _check_symmetric(hessian, "hessian")
        _check_symmetric(noise_cov, "noise_cov")
        _check_symmetric(init_cov, "init_cov")
        if np.linalg.eigvalsh(hessian).min() <= 0:
            raise ValueError("hessian must be positive definite")
        for name, mat in (("noise_cov", noise_cov), ("init_cov", init_cov)):
            if np.linalg.eigvalsh(mat).min() < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
        object.__setattr__(self, "hessian", hessian)
        object.__setattr__(self, "noise_cov", noise_cov)
        object.__setattr__(self, "init_cov", init_cov)
        object.__setattr__(self, "init_mean", init_mean)


@dataclass(frozen=True)
class LinearOptimizerSpec:
    """Nominal step size alpha plus a learned preconditioner matrix.

    With preconditioned=False the update is phi - (alpha I + P) grad; with
    preconditioned=True the step is routed through H^{-1/2} first.
    """

    alpha: float
    precond_matrix: np.ndarray
    preconditioned: bool = False

    def __post_init__(self) -> None:
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError("alpha must be finite and nonnegative")
        precond = np.array(self.precond_matrix, dtype=float)
        if precond.ndim != 2 or precond.shape[0] != precond.shape[1]:
            raise ValueError("precond_matrix must be square")
        if not np.isfinite(precond).all():
            raise ValueError("precond_matrix must be finite")
        object.__setattr__(self, "precond_matrix", precond)


@dataclass(frozen=True)
class DynamicsMatrix:
    """Affine per-step dynamics phi' = transition phi + noise_gain xi."""

    transition: np.ndarray
    noise_gain: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """One sampled rollout: states has horizon+1 rows, per_step_loss has horizon."""

    states: np.ndarray
    per_step_loss: np.ndarray
    seed: int

    @property
    def diverged(self) -> bool:
        bad = ~np.isfinite(self.per_step_loss) | (self.per_step_loss > DIVERGENCE_LIMIT)
        return bool(bad.any())


@dataclass(frozen=True)
class FdGradient:
    """Central-difference meta-gradient of the closed-form loss."""

    d_alpha: float
    d_precond: np.ndarray


@dataclass(frozen=True)
class GradientVarianceEstimate:
    """Trace of the covariance of sampled meta-gradients across seeds."""

    trace: float
    divergence_fraction: float
    n_seeds: int
    n_used: int


@dataclass(frozen=True)
class McLossEstimate:
    """Monte Carlo mean of trajectory-average losses across seeds."""

    mean: float
    stderr: float
    divergence_fraction: float
    n_used: int


def inverse_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Inverse matrix square root via symmetric eigendecomposition."""
    eigvals, eigvecs = np.linalg.eigh(matrix)
    if eigvals.min() < EIGENVALUE_FLOOR:
        raise ValueError(
            f"matrix eigenvalue {eigvals.min():.3e} below floor {EIGENVALUE_FLOOR:.0e}; "
            "inverse square root is ill-defined"
        )
    return (eigvecs / np.sqrt(eigvals)) @ eigvecs.T


def psd_factor(matrix: np.ndarray) -> np.ndarray:
    """Symmetric factor F with F F' = matrix, valid for singular covariances."""
    eigvals, eigvecs = np.linalg.eigh(matrix)
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def _transition_from_raw(
    hessian: np.ndarray, alpha: float, precond: np.ndarray, preconditioned: bool
) -> np.ndarray:
    dim = hessian.shape[0]
    step = (alpha * np.eye(dim) + precond) @ hessian
    if preconditioned:
        step = inverse_sqrt(hessian) @ step
    return np.eye(dim) - step


def build_dynamics(task: QuadraticTask, spec: LinearOptimizerSpec) -> DynamicsMatrix:
    """Assemble the per-step transition matrix and its noise gain.

    Unpreconditioned: A = I - (alpha I + P) H. Preconditioned: the update is
    routed through H^{-1/2}, giving A = I - H^{-1/2} (alpha I + P) H. In both
    cases the noise enters with gain I - A.
    """
    if spec.precond_matrix.shape != (task.dim, task.dim):
        raise ValueError("precond_matrix dimension does not match task")
    transition = _transition_from_raw(
        task.hessian, spec.alpha, spec.precond_matrix, spec.preconditioned
    )
    return DynamicsMatrix(transition=transition, noise_gain=np.eye(task.dim) - transition)


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return (mat + mat.T) / 2.0


def state_covariance(task: QuadraticTask, spec: LinearOptimizerSpec, t: int) -> np.ndarray:
    """Covariance of phi_t accumulated from the per-step target noise.

    Runs the recursion Sigma_t = A Sigma_{t-1} A' + (I - A) noise_cov (I - A)'
    from Sigma_0 = 0, symmetrizing at every step. The initial iterate is held
    fixed here; expected_loss folds init_cov in separately when asked to.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    dyn = build_dynamics(task, spec)
    cov = np.zeros((task.dim, task.dim))
    inject = _symmetrize(dyn.noise_gain @ task.noise_cov @ dyn.noise_gain.T)
    for _ in range(t):
        cov = _symmetrize(dyn.transition @ cov @ dyn.transition.T) + inject
    return cov


def _expected_loss_raw(
    task: QuadraticTask,
    alpha: float,
    precond: np.ndarray,
    preconditioned: bool,
    horizon: int,
    phi0: np.ndarray | None,
) -> float:
    # Internal evaluator; tolerates any finite alpha so finite-difference
    # probes can step below zero.
    transition = _transition_from_raw(task.hessian, alpha, precond, preconditioned)
    gain = np.eye(task.dim) - transition
    hessian = task.hessian
    if phi0 is None:
        mean = task.init_mean.copy()
        cov = task.init_cov.copy()
    else:
        mean = np.array(phi0, dtype=float)
        cov = np.zeros((task.dim, task.dim))
    inject = _symmetrize(gain @ task.noise_cov @ gain.T)
    noise_floor = float(np.trace(hessian @ task.noise_cov))
    total = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(horizon):
            mean = transition @ mean
            cov = _symmetrize(transition @ cov @ transition.T) + inject
            term = float(mean @ hessian @ mean) + float(np.trace(hessian @ cov)) + noise_floor
            if not np.isfinite(term) or term > DIVERGENCE_LIMIT:
                return float("inf")
            total += term
    return total / horizon


def expected_loss(
    task: QuadraticTask,
    spec: LinearOptimizerSpec,
    horizon: int,
    phi0: np.ndarray | None = None,
) -> float:
    """Closed-form mean training loss over the horizon.

    Returns (1/T) sum_{t=1..T} [ m_t' H m_t + tr(H (Sigma_t + noise_cov)) ]
    where m_t = A^t m_0. With phi0 given, the initial iterate is deterministic
    (m_0 = phi0, Sigma_0 = 0); with phi0=None the task's init distribution is
    used (m_0 = init_mean, Sigma_0 = init_cov), which matches what Monte Carlo
    rollouts sample. Divergence is reported as an infinite loss, not an error.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if phi0 is not None:
        phi0 = np.asarray(phi0, dtype=float)
        if phi0.shape != (task.dim,):
            raise ValueError("phi0 must be a vector of length dim")
    if spec.precond_matrix.shape != (task.dim, task.dim):
        raise ValueError("precond_matrix dimension does not match task")
    return _expected_loss_raw(
        task, spec.alpha, spec.precond_matrix, spec.preconditioned, horizon, phi0
    )


def _init_draw(task: QuadraticTask, seed: int, init_factor: np.ndarray) -> np.ndarray:
    return task.init_mean + init_factor @ rng.stream(seed, "init").standard_normal(task.dim)


def _noise_block(
    task: QuadraticTask, seed: int, horizon: int, noise_factor: np.ndarray
) -> np.ndarray:
    draws = rng.stream(seed, "noise").standard_normal((horizon + 1, task.dim))
    return draws @ noise_factor.T


def rollout_mc(
    task: QuadraticTask, spec: LinearOptimizerSpec, horizon: int, seed: int
) -> Trajectory:
    """Sample one trajectory of the linear optimizer on the noisy quadratic.

    The first update consumes target xi_0 without recording a loss; each later
    step t records the quadratic loss at phi_t against the same xi_t that the
    update consumes, so per-step losses line up with the t = 1..T terms of the
    closed-form objective. Identical seeds give bitwise-identical output.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    dyn = build_dynamics(task, spec)
    hessian = task.hessian
    step_mat = dyn.noise_gain  # (alpha I + P) H, possibly preconditioned
    phi = _init_draw(task, seed, psd_factor(task.init_cov))
    noise = _noise_block(task, seed, horizon, psd_factor(task.noise_cov))
    states = np.empty((horizon + 1, task.dim))
    losses = np.empty(horizon)
    states[0] = phi
    with np.errstate(over="ignore", invalid="ignore"):
        phi = phi - step_mat @ (phi - noise[0])
        states[1] = phi
        for t in range(1, horizon + 1):
            diff = phi - noise[t]
            losses[t - 1] = diff @ hessian @ diff
            if t < horizon:
                phi = phi - step_mat @ diff
                states[t + 1] = phi
    return Trajectory(states=states, per_step_loss=losses, seed=seed)


def _mc_seed(base_seed: int, index: int) -> int:
    return rng.derive_seed(base_seed, "mc", index)


def mc_expected_loss(
    task: QuadraticTask,
    spec: LinearOptimizerSpec,
    horizon: int,
    n_seeds: int,
    seed: int = 0,
) -> McLossEstimate:
    """Mean and standard error of trajectory-average losses over many seeds.

    Row i reproduces rollout_mc with seed _mc_seed(seed, i) exactly; diverged
    seeds are excluded from the mean and reported in divergence_fraction.
    """
    if n_seeds < 2:
        raise ValueError("n_seeds must be at least 2")
    dyn = build_dynamics(task, spec)
    hessian = task.hessian
    step_mat = dyn.noise_gain
    init_factor = psd_factor(task.init_cov)
    noise_factor = psd_factor(task.noise_cov)
    seeds = [_mc_seed(seed, i) for i in range(n_seeds)]
    phi = np.stack([_init_draw(task, s, init_factor) for s in seeds])
    noise = np.stack([_noise_block(task, s, horizon, noise_factor) for s in seeds])
    total = np.zeros(n_seeds)
    ok = np.ones(n_seeds, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        phi = phi - (phi - noise[:, 0]) @ step_mat.T
        for t in range(1, horizon + 1):
            diff = phi - noise[:, t]
            losses = np.einsum("ni,ij,nj->n", diff, hessian, diff)
            ok &= np.isfinite(losses) & (losses <= DIVERGENCE_LIMIT)
            total = total + losses
            if t < horizon:
                phi = phi - diff @ step_mat.T
    per_seed = total[ok] / horizon
    n_used = int(ok.sum())
    if n_used < 2:
        return McLossEstimate(float("inf"), float("inf"), 1.0 - n_used / n_seeds, n_used)
    return McLossEstimate(
        mean=float(per_seed.mean()),
        stderr=float(per_seed.std(ddof=1) / np.sqrt(n_used)),
        divergence_fraction=1.0 - n_used / n_seeds,
        n_used=n_used,
    )


def meta_gradient_fd(
    task: QuadraticTask,
    spec: LinearOptimizerSpec,
    horizon: int,
    phi0: np.ndarray | None = None,
    fd_step: float = _FD_STEP,
) -> FdGradient:
    """Central-difference gradient of expected_loss in alpha and every P entry.

    The default probe step is 1e-5; pass fd_step to override. Alpha probes may
    dip below zero, which the closed form tolerates.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    precond = spec.precond_matrix
    pre = spec.preconditioned

    def at(alpha: float, p: np.ndarray) -> float:
        return _expected_loss_raw(task, alpha, p, pre, horizon, phi0)

    d_alpha = (at(spec.alpha + fd_step, precond) - at(spec.alpha - fd_step, precond)) / (
        2 * fd_step
    )
    d_precond = np.zeros_like(precond)
    for j in range(task.dim):
        for k in range(task.dim):
            probe = np.zeros_like(precond)
            probe[j, k] = fd_step
            d_precond[j, k] = (at(spec.alpha, precond + probe) - at(spec.alpha, precond - probe)) / (
                2 * fd_step
            )
    return FdGradient(d_alpha=float(d_alpha), d_precond=d_precond)


def _realized_losses(
    task: QuadraticTask,
    alpha: float,
    probes: np.ndarray,
    horizons: list[int],
    n_seeds: int,
    seed: int,
    preconditioned: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Realized mean losses for several preconditioner probes under shared noise.

    probes has shape (k, dim, dim). Returns (losses, diverged), both of shape
    (k, len(horizons), n_seeds). All probes see identical initial iterates and
    target draws, which is what makes finite differences across probes use
    common random numbers.
    """
    if len(set(horizons)) != len(horizons) or min(horizons) < 1:
        raise ValueError("horizons must be distinct positive integers")
    horizons = sorted(horizons)
    max_t = horizons[-1]
    dim = task.dim
    init_factor = psd_factor(task.init_cov)
    noise_factor = psd_factor(task.noise_cov)
    seeds = [_mc_seed(seed, i) for i in range(n_seeds)]
    phi0 = np.stack([_init_draw(task, s, init_factor) for s in seeds])
    noise = np.stack([_noise_block(task, s, max_t, noise_factor) for s in seeds])

    hessian = task.hessian
    pre_factor = inverse_sqrt(hessian) if preconditioned else np.eye(dim)
    n_probes = probes.shape[0]
    losses = np.empty((n_probes, len(horizons), n_seeds))
    diverged = np.zeros((n_probes, len(horizons), n_seeds), dtype=bool)
    marks = {t: i for i, t in enumerate(horizons)}
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n_probes):
            step_mat = pre_factor @ (alpha * np.eye(dim) + probes[j]) @ hessian
            phi = phi0 - (phi0 - noise[:, 0]) @ step_mat.T
            total = np.zeros(n_seeds)
            bad = np.zeros(n_seeds, dtype=bool)
            for t in range(1, max_t + 1):
                diff = phi - noise[:, t]
                step_loss = np.einsum("ni,ij,nj->n", diff, hessian, diff)
                bad |= ~np.isfinite(step_loss) | (step_loss > DIVERGENCE_LIMIT)
                total = total + step_loss
                if t in marks:
                    idx = marks[t]
                    losses[j, idx] = total / t
                    diverged[j, idx] = bad
                if t < max_t:
                    phi = phi - diff @ step_mat.T
    return losses, diverged


def gradient_variance_profile(
    task: QuadraticTask,
    spec: LinearOptimizerSpec,
    horizons: list[int],
    n_seeds: int,
    seed: int = 0,
    fd_step: float = _FD_STEP,
) -> list[GradientVarianceEstimate]:
    """empirical_gradient_variance evaluated at several horizons in one pass."""
    if n_seeds < 2:
        raise ValueError("n_seeds must be at least 2")
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    dim = task.dim
    base = spec.precond_matrix
    probes = []
    for j in range(dim):
        for k in range(dim):
            bump = np.zeros((dim, dim))
            bump[j, k] = fd_step
            probes.append(base + bump)
            probes.append(base - bump)
    losses, diverged = _realized_losses(
        task,
        spec.alpha,
        np.stack(probes),
        horizons,
        n_seeds,
        seed,
        preconditioned=spec.preconditioned,
    )
    order = np.argsort(horizons)
    results: list[GradientVarianceEstimate] = [None] * len(horizons)  # type: ignore[list-item]
    sorted_h = sorted(horizons)
    for pos, _t in enumerate(sorted_h):
        grads = (losses[0::2, pos] - losses[1::2, pos]) / (2 * fd_step)  # (dim*dim, n_seeds)
        ok = ~diverged[:, pos].any(axis=0)
        n_used = int(ok.sum())
        if n_used >= 2:
            used = grads[:, ok]
            trace = float(used.var(axis=1, ddof=0).sum())
        else:
            trace = float("nan")
        est = GradientVarianceEstimate(
            trace=trace,
            divergence_fraction=1.0 - n_used / n_seeds,
            n_seeds=n_seeds,
            n_used=n_used,
        )
        results[int(order[pos])] = est
    return results


def empirical_gradient_variance(
    task: QuadraticTask,
    spec: LinearOptimizerSpec,
    horizon: int,
    n_seeds: int,
    seed: int = 0,
    fd_step: float = _FD_STEP,
) -> GradientVarianceEstimate:
    """Variance across seeds of sampled-trajectory meta-gradients.

    Each seed produces one realized mean loss per finite-difference probe of P
    under common random numbers; the per-seed gradient is the central
    difference, and the returned trace is tr of the (1/n)-normalized sample
    covariance over non-diverged seeds.
    """
    return gradient_variance_profile(task, spec, [horizon], n_seeds, seed, fd_step)[0]


def minimize_expected_loss(
    task: QuadraticTask,
    alpha: float,
    horizon: int,
    iters: int = 2000,
    lr: float = 0.05,
    fd_step: float = _FD_STEP,
    p0: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Finite-difference descent oracle for the closed-form meta-loss.

    Runs deterministic Adam on central-difference gradients of expected_loss
    with alpha held fixed, starting from P = 0 unless p0 is given. Returns the
    best preconditioner found and its loss. Used as an independent reference
    for what stochastic meta-training should approach.
    """
    dim = task.dim
    p = np.zeros((dim, dim)) if p0 is None else np.array(p0, dtype=float)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    best_p = p.copy()
    best_loss = _expected_loss_raw(task, alpha, p, False, horizon, None)
    for step in range(1, iters + 1):
        grad = np.zeros_like(p)
        for j in range(dim):
            for k in range(dim):
                bump = np.zeros_like(p)
                bump[j, k] = fd_step
                hi = _expected_loss_raw(task, alpha, p + bump, False, horizon, None)
                lo = _expected_loss_raw(task, alpha, p - bump, False, horizon, None)
                grad[j, k] = (hi - lo) / (2 * fd_step)
        if not np.isfinite(grad).all():
            break
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        loss = _expected_loss_raw(task, alpha, p, False, horizon, None)
        if loss < best_loss:
            best_loss = loss
            best_p = p.copy()
    return best_p, float(best_loss)
