"""
Binary inelastic collisions by acceptance-rejection against a majorant.

With particle weight 1/N a pair (i, j) collides at rate |v_i - v_j|/N, so the
candidate count per step is Poisson with mean N dt U_max / 2 and a candidate
is accepted with probability |u|/U_max. Candidates are processed in batches of
disjoint pairs so that no particle takes part in two events of one batch.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Tuple

import numpy as np

from backend.dsmc_service.ensemble import ParticleEnsemble
from backend.shared.config import settings
from backend.shared.exceptions import DomainError
from backend.shared.models import RestitutionParams


logger = logging.getLogger(__name__)

# Raised majorant after an overflow, relative to the offending speed
_OVERFLOW_RAISE = 1.5


def sample_sphere(rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniform unit vectors on S^2."""
    cos_theta = rng.uniform(-1.0, 1.0, size)
    phi = rng.uniform(0.0, 2.0 * math.pi, size)
    sin_theta = np.sqrt(np.maximum(0.0, 1.0 - cos_theta * cos_theta))
    return np.column_stack((sin_theta * np.cos(phi), sin_theta * np.sin(phi), cos_theta))


def apply_collisions(
    v: np.ndarray,
    w: np.ndarray,
    sigma: np.ndarray,
    beta: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Post-collision velocities v' = v + (beta/2)(|u| sigma - u), w' = w - (beta/2)(|u| sigma - u).

    Args:
        v, w: Pre-collision velocities, shape (M, 3) or (3,)
        sigma: Unit scattering directions, same shape
        beta: (1 + e)/2

    Returns:
        (v', w')
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    u = v - w
    speed = np.linalg.norm(u, axis=-1, keepdims=True)
    delta = 0.5 * beta * (speed * sigma - u)
    return v + delta, w - delta


def energy_change(u: np.ndarray, sigma: np.ndarray, beta: float) -> np.ndarray:
    """Pair energy change -beta(1-beta)|u|^2 (1 - nu.sigma) with nu = u/|u|."""
    u = np.asarray(u, dtype=float)
    speed = np.linalg.norm(u, axis=-1)
    cos = np.einsum("...i,...i->...", u, sigma) / np.where(speed > 0, speed, 1.0)
    return -beta * (1.0 - beta) * speed * speed * (1.0 - cos)


def refresh_majorant(ensemble: ParticleEnsemble) -> float:
    """U_max = factor x 2 x max speed, an upper bound on every pair's relative speed."""
    ensemble.u_max = settings.MAJORANT_FACTOR * 2.0 * float(ensemble.speeds().max())
    return ensemble.u_max


def _collide_pairs(
    velocities: np.ndarray,
    i: np.ndarray,
    j: np.ndarray,
    u_max: float,
    beta: float,
    rng: np.random.Generator,
) -> Tuple[int, int, float, float]:
    """
    Accept-reject and collide one set of disjoint pairs in place.

    Returns:
        (accepted, overflow, largest relative speed, energy change of the set)
    """
    u = velocities[i] - velocities[j]
    speed = np.linalg.norm(u, axis=1)
    accept = rng.random(i.size) * u_max < speed
    n_accept = int(accept.sum())
    overflow = int(np.count_nonzero(speed > u_max))
    largest = float(speed.max()) if speed.size else 0.0
    if n_accept == 0:
        return 0, overflow, largest, 0.0

    ia, ja = i[accept], j[accept]
    sigma = sample_sphere(rng, n_accept)
    v_new, w_new = apply_collisions(velocities[ia], velocities[ja], sigma, beta)
    d_energy = float(energy_change(velocities[ia] - velocities[ja], sigma, beta).sum())
    velocities[ia] = v_new
    velocities[ja] = w_new
    return n_accept, overflow, largest, d_energy


def _split(i: np.ndarray, j: np.ndarray, parts: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    return list(zip(np.array_split(i, parts), np.array_split(j, parts)))


def collision_step(
    ensemble: ParticleEnsemble,
    params: RestitutionParams,
    dt: float,
) -> int:
    """
    Sample and execute the collisions of one time step.

    Args:
        ensemble: Ensemble updated in place
        params: Restitution parameters
        dt: Time step (> 0)

    Returns:
        Number of accepted collisions
    """
    if dt <= 0:
        raise DomainError(f"dt must be positive, got {dt}")

    if ensemble.u_max <= 0 or ensemble.step % settings.MAJORANT_REFRESH == 0:
        refresh_majorant(ensemble)
    if ensemble.u_max <= 0:
        # all particles at rest
        return 0

    n = ensemble.n
    beta = params.beta
    call = ensemble.next_call()
    rng = ensemble.stream(0) if ensemble.parallel else ensemble.rng
    remaining = int(rng.poisson(0.5 * n * dt * ensemble.u_max))
    ensemble.stats["candidates"] += remaining

    accepted = 0
    batch_size = n // 2
    batch_number = 0
    while remaining > 0:
        size = min(remaining, batch_size)
        perm = rng.permutation(n)[: 2 * size]
        i, j = perm[0::2], perm[1::2]
        u_max = ensemble.u_max

        if ensemble.parallel and size >= 2 * ensemble.threads:
            chunks = _split(i, j, ensemble.threads)
            first = 1 + batch_number * ensemble.threads
            with ThreadPoolExecutor(max_workers=ensemble.threads) as pool:
                futures = [
                    pool.submit(
                        _collide_pairs,
                        ensemble.velocities,
                        ci,
                        cj,
                        u_max,
                        beta,
                        ensemble.stream(first + k),
                    )
                    for k, (ci, cj) in enumerate(chunks)
                ]
                results = [future.result() for future in futures]
        else:
            results = [_collide_pairs(ensemble.velocities, i, j, u_max, beta, rng)]

        for n_accept, overflow, largest, d_energy in results:
            accepted += n_accept
            ensemble.stats["dissipated"] -= d_energy / n
            if overflow:
                ensemble.stats["overflow"] += overflow
                ensemble.u_max = max(ensemble.u_max, _OVERFLOW_RAISE * largest)
                logger.warning(
                    "Majorant overflow at step %d: %d pairs above U_max=%.4g, raised to %.4g",
                    ensemble.step,
                    overflow,
                    u_max,
                    ensemble.u_max,
                )

        remaining -= size
        batch_number += 1

    ensemble.stats["accepted"] += accepted
    logger.debug("Step %d (call %d): %d collisions", ensemble.step, call, accepted)
    return accepted
