"""
Exact flows of the four forcing terms, followed by mean re-centering.

PureDiffusion:     v += sqrt(2 mu dt) xi
DiffusionFriction: v <- e^{-lambda dt} v + sqrt((mu/lambda)(1 - e^{-2 lambda dt})) xi
NegativeFriction:  v <- e^{kappa dt} v
ShearFlow:         v_2 += kappa dt v_1
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from backend.dsmc_service.ensemble import ParticleEnsemble
from backend.shared.exceptions import DomainError
from backend.shared.models import ForcingKind, ForcingModel


logger = logging.getLogger(__name__)


def _add_noise(ensemble: ParticleEnsemble, scale: float) -> None:
    """velocities += scale * xi, xi standard normal, chunked over particles in parallel mode."""
    if scale == 0.0:
        return
    if not ensemble.parallel:
        ensemble.velocities += scale * ensemble.rng.standard_normal(ensemble.velocities.shape)
        return

    ensemble.next_call()
    bounds = np.linspace(0, ensemble.n, ensemble.threads + 1).astype(int)

    def kick(k: int) -> None:
        lo, hi = bounds[k], bounds[k + 1]
        noise = ensemble.stream(k).standard_normal((hi - lo, 3))
        ensemble.velocities[lo:hi] += scale * noise

    with ThreadPoolExecutor(max_workers=ensemble.threads) as pool:
        list(pool.map(kick, range(ensemble.threads)))


def forcing_step(
    ensemble: ParticleEnsemble,
    model: Optional[ForcingModel],
    dt: float,
) -> ParticleEnsemble:
    """
    Advance the forcing flow by dt and re-center the mean velocity.

    Args:
        ensemble: Ensemble updated in place
        model: Forcing term; None leaves velocities untouched apart from re-centering
        dt: Time step (> 0)

    Returns:
        The same ensemble
    """
    if dt <= 0:
        raise DomainError(f"dt must be positive, got {dt}")

    before = ensemble.energy()
    v = ensemble.velocities

    if model is None:
        pass
    elif model.kind == ForcingKind.PURE_DIFFUSION:
        _add_noise(ensemble, math.sqrt(2.0 * model.mu * dt))
    elif model.kind == ForcingKind.DIFFUSION_FRICTION:
        alpha = math.exp(-model.lam * dt)
        v *= alpha
        _add_noise(ensemble, math.sqrt(model.mu / model.lam * -math.expm1(-2.0 * model.lam * dt)))
    elif model.kind == ForcingKind.NEGATIVE_FRICTION:
        v *= math.exp(model.kappa * dt)
    elif model.kind == ForcingKind.SHEAR_FLOW:
        v[:, 1] += model.kappa * dt * v[:, 0]
    else:
        raise DomainError(f"Unknown forcing kind: {model.kind}")

    ensemble.recenter()
    ensemble.stats["injected"] += ensemble.energy() - before
    return ensemble
