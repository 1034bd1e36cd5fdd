"""
Particle ensemble for the space-homogeneous simulator.

N equal-weight particles (weight 1/N) carry 3-vectors. The sequential mode
draws every random number from one PCG64 stream; the parallel mode hands out
Philox streams keyed on (seed, stream) with the step and call number as the
counter, so a draw depends only on where it happens and not on thread timing.
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

from backend.shared.exceptions import DomainError


logger = logging.getLogger(__name__)

SNAPSHOT_COLUMNS = ["vx", "vy", "vz"]


def _new_stats() -> Dict[str, float]:
    return {
        "candidates": 0,
        "accepted": 0,
        "overflow": 0,
        "dissipated": 0.0,
        "injected": 0.0,
        "recenter_drift_max": 0.0,
    }


class ParticleEnsemble:
    """Velocities of N particles with total mass 1 and zero mean."""

    def __init__(
        self,
        velocities: np.ndarray,
        seed: int,
        time: float = 0.0,
        threads: int = 1,
    ):
        velocities = np.asarray(velocities, dtype=float)
        if velocities.ndim != 2 or velocities.shape[1] != 3:
            raise DomainError(f"Velocities must have shape (N, 3), got {velocities.shape}")
        if velocities.shape[0] < 2:
            raise DomainError(f"Ensemble needs at least 2 particles, got {velocities.shape[0]}")
        if seed < 0:
            raise DomainError(f"Seed must be nonnegative, got {seed}")
        if threads < 1:
            raise DomainError(f"threads must be >= 1, got {threads}")

        self.velocities = velocities
        self.seed = int(seed)
        self.time = float(time)
        self.threads = int(threads)
        self.step = 0
        self.u_max = 0.0
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self.stats: Dict[str, Any] = _new_stats()
        self._calls = 0

    @property
    def n(self) -> int:
        return int(self.velocities.shape[0])

    @property
    def weight(self) -> float:
        return 1.0 / self.n

    @property
    def parallel(self) -> bool:
        return self.threads > 1

    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.velocities, axis=1)

    def energy(self) -> float:
        """m_1 = sum_i w_i |v_i|^2."""
        return float(np.einsum("ij,ij->", self.velocities, self.velocities) / self.n)

    def mean_velocity(self) -> np.ndarray:
        return self.velocities.mean(axis=0)

    def recenter(self) -> float:
        """Subtract the mean velocity; returns its norm before the shift."""
        mean = self.mean_velocity()
        self.velocities -= mean
        drift = float(np.linalg.norm(mean))
        if drift > self.stats["recenter_drift_max"]:
            self.stats["recenter_drift_max"] = drift
        return drift

    def stream(self, stream: int) -> np.random.Generator:
        """
        Counter-based generator for one parallel work item.

        Args:
            stream: Work-item number within the current call (chunk or batch)

        Returns:
            A Philox generator whose output is fixed by (seed, stream, step, call)
        """
        counter = [self.step, self._calls, 0, 0]
        return np.random.Generator(np.random.Philox(key=[self.seed, stream], counter=counter))

    def next_call(self) -> int:
        """Advance the per-step call counter used by ``stream``."""
        self._calls += 1
        return self._calls

    def advance(self, dt: float) -> None:
        self.time += dt
        self.step += 1
        self._calls = 0

    def reset_stats(self) -> None:
        self.stats = _new_stats()

    def copy(self) -> "ParticleEnsemble":
        clone = ParticleEnsemble(self.velocities.copy(), self.seed, self.time, self.threads)
        clone.step = self.step
        clone.u_max = self.u_max
        clone.rng.bit_generator.state = self.rng.bit_generator.state
        clone.stats = dict(self.stats)
        clone._calls = self._calls
        return clone

    def __repr__(self) -> str:
        return f"ParticleEnsemble(n={self.n}, seed={self.seed}, time={self.time:g})"


def init_ensemble(
    n: int,
    temperature: float,
    seed: int,
    threads: int = 1,
) -> ParticleEnsemble:
    """
    Maxwellian sample with per-component variance ``temperature``, re-centered.

    Args:
        n: Number of particles (>= 2)
        temperature: Per-component variance T; m_1 = 3T
        seed: Nonnegative integer seed
        threads: Worker threads for the parallel mode (1 = sequential reference)

    Returns:
        ParticleEnsemble with exactly zero mean velocity
    """
    if n < 2:
        raise DomainError(f"Ensemble needs at least 2 particles, got {n}")
    if temperature < 0 or not math.isfinite(temperature):
        raise DomainError(f"Temperature must be finite and nonnegative, got {temperature}")

    rng = np.random.Generator(np.random.PCG64(seed))
    velocities = rng.normal(0.0, math.sqrt(temperature), size=(n, 3))
    ensemble = ParticleEnsemble(velocities, seed=seed, threads=threads)
    # the run continues the sampling stream
    ensemble.rng = rng
    ensemble.recenter()
    ensemble.stats["recenter_drift_max"] = 0.0
    logger.debug("Initialized %d particles at T=%g (seed %d)", n, temperature, seed)
    return ensemble


def save_snapshot(ensemble: ParticleEnsemble, path: Union[str, Path]) -> Path:
    """Write velocities as CSV (vx, vy, vz) under '# N', '# seed' and '# time' header lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(f"# N: {ensemble.n}\n")
        handle.write(f"# seed: {ensemble.seed}\n")
        handle.write(f"# time: {ensemble.time!r}\n")
        frame = pd.DataFrame(ensemble.velocities, columns=SNAPSHOT_COLUMNS)
        frame.to_csv(handle, index=False, float_format="%.17g")
    return path


def load_snapshot(path: Union[str, Path], threads: Optional[int] = None) -> ParticleEnsemble:
    path = Path(path)
    header: Dict[str, str] = {}
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()

    missing = [key for key in ("N", "seed", "time") if key not in header]
    if missing:
        raise DomainError(f"Snapshot {path} lacks header fields: {', '.join(missing)}")

    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    if list(frame.columns) != SNAPSHOT_COLUMNS:
        raise DomainError(f"Snapshot columns must be {SNAPSHOT_COLUMNS}, got {list(frame.columns)}")
    if len(frame) != int(header["N"]):
        raise DomainError(f"Snapshot header says N={header['N']} but holds {len(frame)} rows")

    return ParticleEnsemble(
        frame.to_numpy(dtype=float),
        seed=int(header["seed"]),
        time=float(header["time"]),
        threads=threads or 1,
    )
