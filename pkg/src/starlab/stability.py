"""Spectral stability certificates for linear optimizer dynamics.

Each certificate checks two eigenvalue interval bounds on the preconditioner
and, when they hold, guarantees that the per-step transition matrix has
spectral radius at most one. Reports always carry the brute-force spectrum
alongside the certificate verdict so that soundness is checkable, and the
bounds are sufficient only: stable systems that violate them exist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nqm import DynamicsMatrix, LinearOptimizerSpec, QuadraticTask, build_dynamics

__all__ = [
    "CertificateAssumptionError",
    "BoundCheck",
    "StabilityReport",
    "RobustBoundSpec",
    "spectral_radius",
    "certify_nominal",
    "certify_preconditioned",
    "certify_robust",
    "cancellation_dynamics",
]

# Radius this close to one counts as marginal rather than stable or unstable.
MARGINAL_TOL = 1e-9


class CertificateAssumptionError(ValueError):
    """The input violates a structural assumption of the certificate."""


@dataclass(frozen=True)
class BoundCheck:
    """One inequality lhs <= rhs with its evaluated verdict."""

    name: str
    lhs: float
    rhs: float
    satisfied: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "satisfied": self.satisfied,
        }


@dataclass(frozen=True)
class StabilityReport:
    """Certificate verdict plus the brute-force spectrum it must agree with."""

    certificate: str
    certified: bool
    bound_checks: tuple[BoundCheck, ...]
    eigenvalues: tuple[complex, ...]
    spectral_radius: float
    empirical_verdict: str
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "certificate": self.certificate,
            "certified": self.certified,
            "bound_checks": [check.to_dict() for check in self.bound_checks],
            "eigenvalues": [[ev.real, ev.imag] for ev in self.eigenvalues],
            "spectral_radius": self.spectral_radius,
            "empirical_verdict": self.empirical_verdict,
            "notes": dict(self.notes),
        }


@dataclass(frozen=True)
class RobustBoundSpec:
    """Base preconditioner with per-coordinate multiplicative gain caps.

    The realized preconditioner is diag(d) @ base_precond for an unknown
    diagonal gain 0 < d_i <= upper_gains_i.
    """

    base_precond: np.ndarray
    upper_gains: np.ndarray

    def __post_init__(self) -> None:
        base = np.array(self.base_precond, dtype=float)
        gains = np.array(self.upper_gains, dtype=float)
        if base.ndim != 2 or base.shape[0] != base.shape[1]:
            raise ValueError("base_precond must be square")
        if gains.shape != (base.shape[0],):
            raise ValueError("upper_gains must be a vector matching base_precond")
        if not (np.isfinite(gains).all() and (gains > 0).all()):
            raise ValueError("upper_gains must be finite and positive")
        object.__setattr__(self, "base_precond", base)
        object.__setattr__(self, "upper_gains", gains)


def spectral_radius(matrix: np.ndarray) -> float:
    """Largest eigenvalue magnitude, via the dense nonsymmetric eigensolver."""
    return float(np.abs(np.linalg.eigvals(matrix)).max())


def _empirical_verdict(radius: float) -> str:
    if radius < 1.0 - MARGINAL_TOL:
        return "stable"
    if radius <= 1.0 + MARGINAL_TOL:
        return "marginal"
    return "unstable"


def _real_eigenvalues(matrix: np.ndarray, name: str) -> np.ndarray:
    """Eigenvalues of a matrix required to be real-diagonalizable.

    Symmetric inputs use the symmetric solver; otherwise the general spectrum
    must have imaginary parts below 1e-9 or the certificate does not apply.
    """
    scale = max(1.0, float(np.abs(matrix).max()))
    if np.abs(matrix - matrix.T).max() <= 1e-12 * scale:
        return np.linalg.eigvalsh(matrix)
    eigvals = np.linalg.eigvals(matrix)
    if np.abs(eigvals.imag).max() >= 1e-9:
        raise CertificateAssumptionError(
            f"{name} has eigenvalues with imaginary part "
            f"{np.abs(eigvals.imag).max():.3e}; certificate needs real spectra"
        )
    return np.sort(eigvals.real)


def _spectrum_report(
    certificate: str,
    transition: np.ndarray,
    checks: list[BoundCheck],
    notes: dict,
) -> StabilityReport:
    eigvals = np.linalg.eigvals(transition)
    radius = float(np.abs(eigvals).max())
    return StabilityReport(
        certificate=certificate,
        certified=all(check.satisfied for check in checks),
        bound_checks=tuple(checks),
        eigenvalues=tuple(complex(ev) for ev in eigvals),
        spectral_radius=radius,
        empirical_verdict=_empirical_verdict(radius),
        notes=notes,
    )


def certify_nominal(task: QuadraticTask, spec: LinearOptimizerSpec) -> StabilityReport:
    """Interval certificate for A = I - (alpha I + P) H.

    Certifies spectral radius at most one when -alpha <= lambda_min(P) and
    lambda_max(P) <= 2 / lambda_max(H) - alpha.
    """
    if spec.preconditioned:
        raise CertificateAssumptionError(
            "preconditioned spec passed to certify_nominal; use certify_preconditioned"
        )
    p_eigs = _real_eigenvalues(spec.precond_matrix, "precond_matrix")
    h_max = float(np.linalg.eigvalsh(task.hessian).max())
    checks = [
        BoundCheck(
            name="lower_gain",
            lhs=-spec.alpha,
            rhs=float(p_eigs.min()),
            satisfied=bool(-spec.alpha <= p_eigs.min()),
        ),
        BoundCheck(
            name="upper_gain",
            lhs=float(p_eigs.max()),
            rhs=2.0 / h_max - spec.alpha,
            satisfied=bool(p_eigs.max() <= 2.0 / h_max - spec.alpha),
        ),
    ]
    dyn = build_dynamics(task, spec)
    return _spectrum_report("nominal", dyn.transition, checks, {"hessian_eig_max": h_max})


def certify_preconditioned(task: QuadraticTask, spec: LinearOptimizerSpec) -> StabilityReport:
    """Interval certificate for the update routed through H^{-1/2}.

    The upper bound relaxes to 2 / sqrt(lambda_max(H)) - alpha, which is
    looser than the nominal bound exactly when lambda_max(H) > 1. The report
    notes both bounds for comparison.
    """
    if not spec.preconditioned:
        raise CertificateAssumptionError(
            "unpreconditioned spec passed to certify_preconditioned; use certify_nominal"
        )
    p_eigs = _real_eigenvalues(spec.precond_matrix, "precond_matrix")
    h_max = float(np.linalg.eigvalsh(task.hessian).max())
    upper_nominal = 2.0 / h_max - spec.alpha
    upper_preconditioned = 2.0 / np.sqrt(h_max) - spec.alpha
    checks = [
        BoundCheck(
            name="lower_gain",
            lhs=-spec.alpha,
            rhs=float(p_eigs.min()),
            satisfied=bool(-spec.alpha <= p_eigs.min()),
        ),
        BoundCheck(
            name="upper_gain",
            lhs=float(p_eigs.max()),
            rhs=float(upper_preconditioned),
            satisfied=bool(p_eigs.max() <= upper_preconditioned),
        ),
    ]
    dyn = build_dynamics(task, spec)
    notes = {
        "hessian_eig_max": h_max,
        "upper_bound_nominal": float(upper_nominal),
        "upper_bound_preconditioned": float(upper_preconditioned),
        "looser_than_nominal": bool(upper_preconditioned > upper_nominal),
    }
    return _spectrum_report("preconditioned", dyn.transition, checks, notes)


def certify_robust(
    task: QuadraticTask, robust_spec: RobustBoundSpec, alpha: float
) -> StabilityReport:
    """Certificate covering every diagonal gain 0 < d_i <= upper_gains_i.

    Requires a symmetric base preconditioner and 0 < alpha < 2/lambda_max(H).
    When -alpha / max(d) <= lambda_min(base) and lambda_max(base) <=
    (2/lambda_max(H) - alpha) / max(d), every realized diag(d) @ base stays
    inside the nominal certificate. The reported spectrum is evaluated at the
    full gains d = upper_gains as a worst-scale witness.
    """
    base = robust_spec.base_precond
    if base.shape != (task.dim, task.dim):
        raise ValueError("base_precond dimension does not match task")
    scale = max(1.0, float(np.abs(base).max()))
    if np.abs(base - base.T).max() > 1e-12 * scale:
        raise CertificateAssumptionError("robust certificate needs a symmetric base_precond")
    h_max = float(np.linalg.eigvalsh(task.hessian).max())
    if not (0.0 < alpha < 2.0 / h_max):
        raise CertificateAssumptionError(
            f"robust certificate needs 0 < alpha < 2/lambda_max(H) = {2.0 / h_max:.6f}"
        )
    gain_cap = float(robust_spec.upper_gains.max())
    base_eigs = np.linalg.eigvalsh(base)
    checks = [
        BoundCheck(
            name="lower_gain",
            lhs=-alpha / gain_cap,
            rhs=float(base_eigs.min()),
            satisfied=bool(-alpha / gain_cap <= base_eigs.min()),
        ),
        BoundCheck(
            name="upper_gain",
            lhs=float(base_eigs.max()),
            rhs=(2.0 / h_max - alpha) / gain_cap,
            satisfied=bool(base_eigs.max() <= (2.0 / h_max - alpha) / gain_cap),
        ),
    ]
    realized = np.diag(robust_spec.upper_gains) @ base
    transition = np.eye(task.dim) - (alpha * np.eye(task.dim) + realized) @ task.hessian
    notes = {
        "hessian_eig_max": h_max,
        "gain_cap": gain_cap,
        "spectrum_at": "full gains diag(upper_gains)",
    }
    return _spectrum_report("robust", transition, checks, notes)


def cancellation_dynamics(
    task: QuadraticTask, p_star: np.ndarray, alpha: float, eps: float
) -> DynamicsMatrix:
    """Dynamics when a learned term P* - alpha I is scaled down by 1 - eps.

    A learned optimizer can null out its nominal term by absorbing -alpha I
    into the learned preconditioner. If outer training then under-delivers the
    learned part by a factor 1 - eps, the realized transition is
    A = I - alpha eps H - (1 - eps) P* H: at eps = 0 cancellation is perfect
    and A = I - P* H, while at eps = 1 only the nominal term A = I - alpha H
    survives, with the residual alpha eps H as excess relative to directly
    learning P* with no nominal term.
    """
    p_star = np.asarray(p_star, dtype=float)
    if p_star.shape != (task.dim, task.dim):
        raise ValueError("p_star dimension does not match task")
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    eye = np.eye(task.dim)
    transition = eye - alpha * eps * task.hessian - (1.0 - eps) * p_star @ task.hessian
    return DynamicsMatrix(transition=transition, noise_gain=eye - transition)
