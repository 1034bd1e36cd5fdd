"""
Inelastic Povzner kernel for hard spheres.

Computes lambda(mu), the kernels g_beta and its symmetrization, the constants
gamma_p, and the sphere average A^+ of |v'|^{2p} + |w'|^{2p} in both the sigma
and the omega parametrizations of the collision.
"""

import logging
from typing import Optional, Union

import numpy as np
from scipy import integrate

from backend.kernel_service.quadrature import (
    SphereIntegrand,
    adaptive_sphere_average,
    orthonormal_frame,
)
from backend.shared.config import settings
from backend.shared.exceptions import DomainError, QuadratureError
from backend.shared.models import GammaP, KernelEval, RestitutionParams


logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Rounding slack accepted on |mu| <= 1
_MU_SLACK = 1e-14


def _check_mu(mu: ArrayLike) -> np.ndarray:
    arr = np.asarray(mu, dtype=float)
    if np.any(np.abs(arr) > 1.0 + _MU_SLACK) or np.any(~np.isfinite(arr)):
        raise DomainError("Cosine argument mu must lie in [-1, 1]")
    return np.clip(arr, -1.0, 1.0)


def _check_beta(beta: float) -> float:
    if not 0.5 <= beta <= 1.0:
        raise DomainError(f"beta must lie in [1/2, 1], got {beta}")
    return beta


def _lambda(beta: float, mu: np.ndarray) -> np.ndarray:
    return (1.0 - beta) * mu + np.sqrt((1.0 - beta) ** 2 * mu**2 + 2.0 * beta - 1.0)


def _g_raw(beta: float, mu: np.ndarray) -> np.ndarray:
    root = np.sqrt((1.0 - beta) ** 2 * mu**2 + 2.0 * beta - 1.0)
    lam = (1.0 - beta) * mu + root
    safe = np.where(root > 0.0, root, 1.0)
    # root vanishes only at beta = 1/2, mu = 0, where the limit is 0
    return np.where(root > 0.0, lam**2 / (beta * safe), 0.0)


def _g_bar(beta: float, mu: np.ndarray) -> np.ndarray:
    return 0.5 * (_g_raw(beta, mu) + _g_raw(beta, -mu))


def _unwrap(value: np.ndarray, like: ArrayLike) -> ArrayLike:
    return float(value) if np.ndim(like) == 0 else value


def lambda_of_mu(params: RestitutionParams, mu: ArrayLike) -> ArrayLike:
    """
    Radius lambda(mu) of the omega-parametrized post-collisional sphere.

    Args:
        params: Restitution parameters
        mu: Cosine(s) in [-1, 1]

    Returns:
        (1-beta) mu + sqrt((1-beta)^2 mu^2 + 2 beta - 1), in [2 beta - 1, 1]
    """
    beta = _check_beta(params.beta)
    return _unwrap(_lambda(beta, _check_mu(mu)), mu)


def g_raw(params: RestitutionParams, mu: ArrayLike) -> ArrayLike:
    """Jacobian weight g_beta(mu) of the sigma -> omega change of variables."""
    beta = _check_beta(params.beta)
    return _unwrap(_g_raw(beta, _check_mu(mu)), mu)


def g_bar(params: RestitutionParams, mu: ArrayLike) -> ArrayLike:
    """Symmetrized kernel (g_beta(mu) + g_beta(-mu)) / 2."""
    beta = _check_beta(params.beta)
    return _unwrap(_g_bar(beta, _check_mu(mu)), mu)


def kernel_eval(params: RestitutionParams, mu: float) -> KernelEval:
    """All kernel values at one cosine."""
    beta = _check_beta(params.beta)
    arr = _check_mu(mu)
    return KernelEval(
        mu=float(arr),
        lambda_val=float(_lambda(beta, arr)),
        g_raw=float(_g_raw(beta, arr)),
        g_sym=float(_g_bar(beta, arr)),
    )


def gamma_closed_form(beta: float, p: float) -> Optional[float]:
    """Exact gamma_p at beta = 1 or beta = 1/2, None otherwise."""
    if beta == 1.0:
        return 2.0 / (p + 1.0)
    if beta == 0.5:
        return (p * 2.0**p + 1.0) / (2.0 ** (p - 2.0) * (p + 1.0) * (p + 2.0))
    return None


def gamma_p(
    params: RestitutionParams,
    p: float,
    use_closed_form: bool = True,
    abs_tol: Optional[float] = None,
) -> GammaP:
    """
    Povzner constant gamma_p = 2 * int_0^1 gbar(2z - 1) z^p dz.

    Args:
        params: Restitution parameters
        p: Moment order (p >= 1 in the theory; 0 < p < 1 is accepted)
        use_closed_form: Substitute the exact value when beta is exactly 1 or 1/2
        abs_tol: Absolute quadrature tolerance (defaults to settings)

    Returns:
        GammaP with the value and the quadrature error estimate
    """
    beta = _check_beta(params.beta)
    if p <= 0:
        raise DomainError(f"gamma_p needs p > 0, got {p}")

    if use_closed_form:
        exact = gamma_closed_form(beta, p)
        if exact is not None:
            return GammaP(p=p, beta=beta, value=exact, method='closed_form')

    tol = settings.GAMMA_ABS_TOL if abs_tol is None else abs_tol

    def integrand(z: float) -> float:
        return 2.0 * float(_g_bar(beta, np.asarray(2.0 * z - 1.0))) * z**p

    result = integrate.quad(
        integrand,
        0.0,
        1.0,
        points=[0.5],
        epsabs=tol,
        epsrel=0.0,
        limit=settings.QUAD_LIMIT,
        full_output=1,
    )
    value, abserr = result[0], result[1]
    if len(result) > 3 and abserr > tol:
        raise QuadratureError(f"gamma_p quadrature failed at beta={beta}, p={p}", abserr)

    return GammaP(p=p, beta=beta, value=value, err_estimate=abserr, method='quadrature')


def _power_sum(x: np.ndarray, y: np.ndarray, p: float) -> np.ndarray:
    return np.power(x, p) + np.power(y, p)


def a_plus_moment(
    v: np.ndarray,
    w: np.ndarray,
    params: RestitutionParams,
    p: float,
    rel_tol: Optional[float] = None,
) -> float:
    """
    Sphere average of |v'|^{2p} + |w'|^{2p} over uniform sigma.

    Args:
        v, w: Pre-collisional velocities
        params: Restitution parameters
        p: Moment order >= 0
        rel_tol: Relative tolerance (defaults to settings)

    Returns:
        A^+_beta[|.|^{2p}](v, w)
    """
    beta = _check_beta(params.beta)
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if p < 0:
        raise DomainError(f"Moment order must be nonnegative, got {p}")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
        raise DomainError("Velocities must be finite")

    center = 0.5 * (v + w)
    u = v - w
    speed = float(np.linalg.norm(u))
    if speed == 0.0:
        return float(_power_sum(np.dot(v, v), np.dot(w, w), p))

    axis = u / speed

    def integrand(sigma: np.ndarray) -> np.ndarray:
        u_post = (1.0 - beta) * u + beta * speed * sigma
        v_post = center + 0.5 * u_post
        w_post = center - 0.5 * u_post
        return _power_sum(
            np.einsum('...i,...i->...', v_post, v_post),
            np.einsum('...i,...i->...', w_post, w_post),
            p,
        )

    return _sphere(integrand, axis, center, rel_tol)


def a_plus_via_omega(
    v: np.ndarray,
    w: np.ndarray,
    params: RestitutionParams,
    p: float,
    rel_tol: Optional[float] = None,
) -> float:
    """
    Same average computed over omega with weight g_beta(nu . omega).

    Post-collisional velocities are U +/- lambda(nu . omega) |u| omega / 2.
    """
    beta = _check_beta(params.beta)
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    center = 0.5 * (v + w)
    u = v - w
    speed = float(np.linalg.norm(u))
    if speed == 0.0:
        raise DomainError("Relative velocity u = 0 leaves the omega axis undefined")
    if p < 0:
        raise DomainError(f"Moment order must be nonnegative, got {p}")

    axis = u / speed

    def integrand(omega: np.ndarray) -> np.ndarray:
        cosine = np.clip(omega @ axis, -1.0, 1.0)
        radius = _lambda(beta, cosine) * speed * 0.5
        v_post = center + radius[..., None] * omega
        w_post = center - radius[..., None] * omega
        return _g_raw(beta, cosine) * _power_sum(
            np.einsum('...i,...i->...', v_post, v_post),
            np.einsum('...i,...i->...', w_post, w_post),
            p,
        )

    return _sphere(integrand, axis, center, rel_tol)


def _sphere(
    integrand: SphereIntegrand,
    axis: np.ndarray,
    center: np.ndarray,
    rel_tol: Optional[float],
) -> float:
    perp = center - np.dot(center, axis) * axis
    scale = max(float(np.linalg.norm(center)), 1e-300)
    axisymmetric = float(np.linalg.norm(perp)) <= 1e-14 * scale
    frame = orthonormal_frame(axis, None if axisymmetric else perp)
    value, _ = adaptive_sphere_average(
        integrand,
        frame,
        axisymmetric=axisymmetric,
        rel_tol=settings.SPHERE_REL_TOL if rel_tol is None else rel_tol,
        min_nodes=settings.SPHERE_MIN_NODES,
        max_nodes=settings.SPHERE_MAX_NODES,
    )
    return value


def discrete_collision_moment(
    atoms: np.ndarray,
    weights: np.ndarray,
    params: RestitutionParams,
    p: float,
) -> float:
    """
    Exact Q_p of a discrete distribution sum_i w_i delta(v - v_i).

    Q_p = 1/2 sum_ij w_i w_j |v_i - v_j| (A^+ - |v_i|^{2p} - |v_j|^{2p}).
    """
    atoms = np.asarray(atoms, dtype=float)
    weights = np.asarray(weights, dtype=float)
    total = 0.0
    for i in range(len(atoms)):
        for j in range(i + 1, len(atoms)):
            speed = float(np.linalg.norm(atoms[i] - atoms[j]))
            if speed == 0.0:
                continue
            gain = a_plus_moment(atoms[i], atoms[j], params, p)
            loss = np.dot(atoms[i], atoms[i]) ** p + np.dot(atoms[j], atoms[j]) ** p
            total += weights[i] * weights[j] * speed * (gain - loss)
    return float(total)
