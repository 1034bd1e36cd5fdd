"""
Quadrature rules on the unit sphere.

Product rule: Gauss-Legendre in the polar cosine (split at cosine 0) times a
uniform azimuthal rule, refined by doubling until successive values agree.
"""

import logging
from functools import lru_cache
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import roots_legendre

from backend.shared.exceptions import QuadratureError


logger = logging.getLogger(__name__)

SphereIntegrand = Callable[[np.ndarray], np.ndarray]


@lru_cache(maxsize=32)
def split_legendre(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gauss-Legendre nodes on [-1, 0] and [0, 1], n nodes on each half.

    Returned arrays are read-only so the cache can be shared across threads.
    """
    x, w = roots_legendre(n)
    nodes = np.concatenate([(x - 1.0) / 2.0, (x + 1.0) / 2.0])
    weights = np.concatenate([w / 2.0, w / 2.0])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def orthonormal_frame(axis: np.ndarray, hint: Optional[np.ndarray] = None) -> np.ndarray:
    """Rows e1, e2, e3 with e3 = axis; e1 along the part of hint orthogonal to axis."""
    e3 = axis / np.linalg.norm(axis)
    candidate = None
    if hint is not None:
        perp = hint - np.dot(hint, e3) * e3
        if np.linalg.norm(perp) > 1e-300:
            candidate = perp
    if candidate is None:
        trial = np.array([1.0, 0.0, 0.0]) if abs(e3[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        candidate = trial - np.dot(trial, e3) * e3
    e1 = candidate / np.linalg.norm(candidate)
    e2 = np.cross(e3, e1)
    return np.stack([e1, e2, e3])


def sphere_average(
    integrand: SphereIntegrand,
    frame: np.ndarray,
    n_polar: int,
    n_azimuth: int,
) -> float:
    """
    (1/4pi) times the integral of integrand over the unit sphere.

    Args:
        integrand: Maps an (..., 3) array of unit vectors to values
        frame: Orthonormal rows; the polar angle is measured from frame[2]
        n_polar: Legendre nodes per polar half
        n_azimuth: Azimuthal nodes (1 when the integrand depends only on frame[2])
    """
    cos_t, weights = split_legendre(n_polar)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    phi = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth

    # (polar, azimuth, 3)
    local = np.stack(
        [
            sin_t[:, None] * np.cos(phi)[None, :],
            sin_t[:, None] * np.sin(phi)[None, :],
            np.broadcast_to(cos_t[:, None], (cos_t.size, n_azimuth)),
        ],
        axis=-1,
    )
    directions = local @ frame
    values = integrand(directions)
    return float(0.5 * np.dot(weights, values.mean(axis=1)))


def adaptive_sphere_average(
    integrand: SphereIntegrand,
    frame: np.ndarray,
    axisymmetric: bool,
    rel_tol: float,
    min_nodes: int = 16,
    max_nodes: int = 1024,
) -> Tuple[float, float]:
    """
    Refine the product rule by doubling until two levels agree.

    Returns:
        (value, error estimate)
    """
    def evaluate(n: int) -> float:
        n_azimuth = 1 if axisymmetric else 2 * n
        return sphere_average(integrand, frame, n, n_azimuth)

    n = min_nodes
    previous = evaluate(n)
    while True:
        n *= 2
        current = evaluate(n)
        error = abs(current - previous)
        if error <= rel_tol * abs(current) or error == 0.0:
            return current, error
        if n >= max_nodes:
            raise QuadratureError(
                f"Sphere quadrature did not converge with {n} polar nodes", error
            )
        previous = current
