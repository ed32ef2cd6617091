"""Rigid kernel-point layouts and the linear correlation function."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelLayout:
    """Kernel points in the unit ball (``dim=3``) or unit disk (``dim=2``).

    Point 0 sits at the origin. ``converged`` is False when the energy
    descent hit its iteration cap and the best iterate was returned.
    """

    points: np.ndarray
    energy: float = float("nan")
    converged: bool = True
    seed: int = 0
    iterations: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def K(self) -> int:
        return self.points.shape[0]

    def scaled(self, radius: float) -> np.ndarray:
        return self.points * radius


def layout_energy(x: np.ndarray) -> float:
    """Pairwise repulsion plus a quadratic pull toward the origin."""
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt((diff ** 2).sum(-1))
    iu = np.triu_indices(len(x), 1)
    return float((1.0 / d[iu]).sum() + (x ** 2).sum())


def _energy_gradient(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    d2 = (diff ** 2).sum(-1)
    np.fill_diagonal(d2, 1.0)
    inv3 = d2 ** -1.5
    np.fill_diagonal(inv3, 0.0)
    return -(diff * inv3[:, :, None]).sum(axis=1) + 2.0 * x


def _project(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.where(norms > 1.0, x / np.maximum(norms, 1e-300), x)
    x[0] = 0.0
    return x


def _descend(x: np.ndarray, max_iter: int, tol: float) -> tuple[np.ndarray, float, bool, int]:
    energy = layout_energy(x)
    step = 0.1
    it = 0
    for it in range(1, max_iter + 1):
        grad = _energy_gradient(x)
        grad[0] = 0.0
        while True:
            candidate = _project(x - step * grad)
            e = layout_energy(candidate)
            if e <= energy or step < 1e-14:
                break
            step *= 0.5
        moved = np.abs(candidate - x).max()
        if e > energy:
            return x, energy, moved < tol, it
        x, energy = candidate, e
        if moved < tol:
            return x, energy, True, it
        step = min(step * 1.5, 1.0)
    return x, energy, False, it


def init_kernel_points(K: int, dim: int = 3, seed: int = 0, max_iter: int = 10_000,
                       tol: float = 1e-6, restarts: int = 16) -> KernelLayout:
    """Spread ``K`` kernel points inside the unit ball/disk by energy descent.

    Projected gradient descent on ``sum_{i<j} 1/|x_i - x_j| + sum_i |x_i|^2``
    with point 0 pinned at the origin and the rest projected back into the
    unit ball after every step. The step size is chosen by backtracking so
    the energy never increases. A run stops once no point moves more than
    ``tol``. Disk layouts have several local minima, so ``restarts`` random
    starts are descended and the lowest-energy result is kept.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    if K == 1:
        return KernelLayout(np.zeros((1, dim)), energy=0.0, converged=True, seed=seed)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        x = rng.standard_normal((K, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        x *= rng.uniform(0.3, 1.0, size=(K, 1)) ** (1.0 / dim)
        x[0] = 0.0
        result = _descend(x, max_iter, tol)
        if best is None or result[1] < best[1]:
            best = result
    x, energy, converged, it = best
    if not converged:
        logger.warning("kernel layout K=%d dim=%d did not converge in %d iterations",
                       K, dim, max_iter)
    return KernelLayout(x, energy=energy, converged=converged, seed=seed, iterations=it)


def correlation(offsets: np.ndarray, kernel_points: np.ndarray, sigma: float) -> np.ndarray:
    """Linear influence ``max(0, 1 - |x - p_k| / sigma)``.

    ``offsets`` has shape (..., d) and ``kernel_points`` (K, d); the result
    has shape (..., K).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    offsets = np.asarray(offsets)
    kernel_points = np.asarray(kernel_points)
    sq = np.zeros(offsets.shape[:-1] + (len(kernel_points),))
    for d in range(kernel_points.shape[1]):
        sq += (offsets[..., d, None] - kernel_points[:, d]) ** 2
    return np.maximum(0.0, 1.0 - np.sqrt(sq) / sigma)
