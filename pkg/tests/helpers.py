"""Shared numeric helpers and independent oracles for the test suite.

Everything here is deliberately written from first principles (matrix powers,
hand-rolled Adam, quadratic formulas) rather than by calling the package, so
tests compare two genuinely different derivations of the same quantity.
"""

from __future__ import annotations

import numpy as np

BENCH_HESSIAN = np.array([[1.11, 0.596], [0.596, 0.486]])


def eig2x2_symmetric(mat: np.ndarray) -> tuple[float, float]:
    """Closed-form eigenvalues of a symmetric 2x2 matrix, (min, max)."""
    a, b, c = mat[0, 0], mat[0, 1], mat[1, 1]
    mean = (a + c) / 2.0
    radius = np.sqrt(((a - c) / 2.0) ** 2 + b * b)
    return mean - radius, mean + radius


def random_spd(gen: np.random.Generator, dim: int, lo: float = 0.1, hi: float = 10.0) -> np.ndarray:
    """Random SPD matrix with eigenvalues log-uniform in [lo, hi]."""
    q, _ = np.linalg.qr(gen.standard_normal((dim, dim)))
    eigs = np.exp(gen.uniform(np.log(lo), np.log(hi), size=dim))
    return (q * eigs) @ q.T


def random_stable_gain(gen: np.random.Generator, hessian: np.ndarray) -> np.ndarray:
    """Symmetric K with spectral radius of I - K H strictly below one.

    K = H^{-1/2} M H^{-1/2} makes K H similar to M, so choosing M symmetric
    with eigenvalues inside (0.1, 1.9) pins the transition spectrum to
    (-0.9, 0.9) regardless of H.
    """
    dim = hessian.shape[0]
    q, _ = np.linalg.qr(gen.standard_normal((dim, dim)))
    m = (q * gen.uniform(0.1, 1.9, size=dim)) @ q.T
    eigvals, eigvecs = np.linalg.eigh(hessian)
    h_inv_sqrt = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
    return h_inv_sqrt @ m @ h_inv_sqrt


def expected_loss_by_powers(
    hessian: np.ndarray,
    transition: np.ndarray,
    noise_cov: np.ndarray,
    init_mean: np.ndarray,
    init_cov: np.ndarray,
    horizon: int,
) -> float:
    """Closed-form mean loss computed with explicit matrix-power sums.

    E[loss_t] = m_t' H m_t + tr(H Var(phi_t)) + tr(H noise_cov) where
    m_t = A^t m_0 and Var(phi_t) = A^t Sigma_0 A'^t
    + sum_{k=0}^{t-1} A^k G noise_cov G' A'^k with G = I - A. No recursion is
    shared with the implementation under test.
    """
    dim = hessian.shape[0]
    gain = np.eye(dim) - transition
    inject = gain @ noise_cov @ gain.T
    total = 0.0
    for t in range(1, horizon + 1):
        a_t = np.linalg.matrix_power(transition, t)
        mean = a_t @ init_mean
        var = a_t @ init_cov @ a_t.T
        for k in range(t):
            a_k = np.linalg.matrix_power(transition, k)
            var = var + a_k @ inject @ a_k.T
        total += float(mean @ hessian @ mean) + float(np.trace(hessian @ (var + noise_cov)))
    return total / horizon


def reference_adam(
    grads: list[np.ndarray],
    x0: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Textbook AdamW applied to a fixed gradient sequence."""
    x = np.array(x0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for step, grad in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        decayed = x if decay_mask is None else decay_mask * x
        x = x - update - lr * weight_decay * decayed
    return x


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        bump = np.zeros_like(x)
        bump[i] = h
        grad[i] = (f(x + bump) - f(x - bump)) / (2 * h)
    return grad


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    scale = max(1.0, float(np.abs(exact).max()))
    return float(np.abs(approx - exact).max()) / scale
