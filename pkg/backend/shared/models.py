"""
Shared data models for Granular Tails.

This module contains Pydantic models used across the kernel, moment, DSMC and
report services.
"""

from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    computed_field,
    field_validator,
    model_validator,
)


class RestitutionParams(BaseModel):
    """Restitution coefficient e and the derived collision parameter beta."""

    model_config = ConfigDict(frozen=True)

    e: float

    @field_validator('e')
    @classmethod
    def validate_e(cls, v: float) -> float:
        """Closed endpoints are kept as analytic reference cases."""
        if not 0.0 <= v <= 1.0:
            raise ValueError('Restitution coefficient must be between 0 and 1')
        return v

    @computed_field  # type: ignore[misc]
    @property
    def beta(self) -> float:
        return (1.0 + self.e) / 2.0

    @classmethod
    def from_beta(cls, beta: float) -> "RestitutionParams":
        return cls(e=2.0 * beta - 1.0)


class KernelEval(BaseModel):
    """Povzner kernel values at one cosine."""

    mu: float
    lambda_val: float
    g_raw: float
    g_sym: float


class GammaP(BaseModel):
    """Povzner constant gamma_p."""

    p: float
    beta: float
    value: float
    err_estimate: float = 0.0
    method: Literal['closed_form', 'quadrature'] = 'quadrature'


class BinomOrder(BaseModel):
    """Order p > 1 with its split index k_p = floor((p+1)/2)."""

    model_config = ConfigDict(frozen=True)

    p: float
    k_p: int

    @model_validator(mode='after')
    def validate_order(self) -> "BinomOrder":
        if self.p <= 1.0:
            raise ValueError('Binomial order must exceed 1')
        if self.k_p < 1:
            raise ValueError('k_p must be at least 1')
        return self


class SandwichBounds(BaseModel):
    """Lower, middle and upper terms of the binomial sandwich."""

    lower: float
    middle: float
    upper: float


class ForcingKind(str, Enum):
    """Energy injection mechanisms."""

    PURE_DIFFUSION = "pure_diffusion"
    DIFFUSION_FRICTION = "diffusion_friction"
    NEGATIVE_FRICTION = "negative_friction"
    SHEAR_FLOW = "shear_flow"


class ForcingModel(BaseModel):
    """Forcing term with its physical rates."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    kind: ForcingKind
    mu: float = 0.0
    lam: float = Field(default=0.0, alias='lambda')
    kappa: float = 0.0

    @model_validator(mode='after')
    def validate_rates(self) -> "ForcingModel":
        """Each kind uses only its own rates."""
        if min(self.mu, self.lam, self.kappa) < 0:
            raise ValueError('Forcing rates must be nonnegative')
        if self.kind == ForcingKind.PURE_DIFFUSION:
            if self.mu <= 0 or self.lam != 0 or self.kappa != 0:
                raise ValueError('PureDiffusion requires mu > 0 and no other rate')
        elif self.kind == ForcingKind.DIFFUSION_FRICTION:
            if self.mu <= 0 or self.lam <= 0 or self.kappa != 0:
                raise ValueError('DiffusionFriction requires mu > 0 and lambda > 0')
        else:
            if self.kappa <= 0 or self.mu != 0 or self.lam != 0:
                raise ValueError(f'{self.kind.value} requires kappa > 0 only')
        return self

    @classmethod
    def pure_diffusion(cls, mu: float) -> "ForcingModel":
        return cls(kind=ForcingKind.PURE_DIFFUSION, mu=mu)

    @classmethod
    def diffusion_friction(cls, mu: float, lam: float) -> "ForcingModel":
        return cls(kind=ForcingKind.DIFFUSION_FRICTION, mu=mu, lam=lam)

    @classmethod
    def negative_friction(cls, kappa: float) -> "ForcingModel":
        return cls(kind=ForcingKind.NEGATIVE_FRICTION, kappa=kappa)

    @classmethod
    def shear_flow(cls, kappa: float) -> "ForcingModel":
        return cls(kind=ForcingKind.SHEAR_FLOW, kappa=kappa)

    @property
    def max_rate(self) -> float:
        return max(self.lam, self.kappa)

    @property
    def is_shear(self) -> bool:
        return self.kind == ForcingKind.SHEAR_FLOW


class PropagationConstants(BaseModel):
    """Constants of the induction argument for one (model, beta, a, b)."""

    eps: float
    a: float
    b: float
    K_eps: float
    A_ab: float
    c3: float
    C3: float
    C4: float
    c5: float
    C5: float
    p1: Optional[float] = None

    @model_validator(mode='after')
    def validate_constants(self) -> "PropagationConstants":
        if self.K_eps < 1.0:
            raise ValueError('K_eps must be at least 1')
        if min(self.c3, self.C3, self.C4, self.c5, self.C5, self.A_ab) <= 0:
            raise ValueError('Ratio constants must be positive')
        if self.p1 is not None and self.p1 < 1.0 + self.eps:
            raise ValueError('p1 must be at least 1 + eps')
        return self


class GeometricFit(BaseModel):
    """Geometric envelope c q^p <= z_p <= C Q^p of normalized moments."""

    q: float
    Q: float
    c: float
    C: float
    holds: bool
    p_from: float
    p_to: float
    lower_trend: Optional[float] = None
    upper_trend: Optional[float] = None
    one_sided: bool = False


class TailEstimate(BaseModel):
    """Estimated tail order s and radius r_star."""

    s: float
    r_star: float
    success: bool = True
    one_sided: bool = False
    method: Literal['moments', 'histogram'] = 'moments'
    s_ci: Optional[Tuple[float, float]] = None
    r_ci: Optional[Tuple[float, float]] = None
    diagnostics: Dict[str, Any] = Field(default_factory=dict)


class MomentRow(BaseModel):
    """One empirical moment with its jackknife error."""

    p: float
    m: float
    stderr: float
    reliable: bool = True


class MomentTable(BaseModel):
    """Empirical moment table."""

    rows: List[MomentRow] = Field(default_factory=list)
    n_particles: int = 0
    p_max_reliable: float = 0.0

    def as_dict(self) -> Dict[float, float]:
        return {row.p: row.m for row in self.rows}

    def get(self, p: float) -> Optional[MomentRow]:
        for row in self.rows:
            if abs(row.p - p) < 1e-12:
                return row
        return None


class SpeedHistogram(BaseModel):
    """Histogram of particle speeds |v| with fixed bin edges."""

    edges: List[float]
    counts: List[float]
    n_samples: float
    overflow: float = 0.0

    @model_validator(mode='after')
    def validate_shape(self) -> "SpeedHistogram":
        if len(self.edges) != len(self.counts) + 1:
            raise ValueError('Histogram needs len(edges) == len(counts) + 1')
        return self


class SteadyStateReport(BaseModel):
    """Time-averaged steady state of a DSMC run."""

    model: Optional[ForcingModel] = None
    restitution: RestitutionParams
    seed: int
    n_particles: int
    threads: int = 1
    dt: float
    t_burn: float
    t_avg: float
    moments: MomentTable
    histogram: SpeedHistogram
    tail: Optional[TailEstimate] = None
    tail_error: Optional[str] = None
    energy_residual: float
    energy_residual_sigma: float
    energy_balanced: bool
    stationary: bool
    m1_drift: float
    m1_drift_sigma: float
    overflow_fraction: float
    recenter_drift_max: float
    second_moment_tensor: List[List[float]]
    diagnostics: Dict[str, Any] = Field(default_factory=dict)


class ConsistencyRow(BaseModel):
    """Verdict for one moment order."""

    p: float
    m: float
    m_lo: float
    m_hi: float
    inside: bool


class ConsistencyReport(BaseModel):
    """Empirical moments checked against a propagated grid."""

    kind: ForcingKind
    e: float
    rows: List[ConsistencyRow]
    passed: bool
    violations: List[float] = Field(default_factory=list)


class ArtifactRecord(BaseModel):
    """A file written by a run."""

    path: str
    kind: str
    status: Literal['complete', 'partial'] = 'complete'


class RunManifest(BaseModel):
    """Provenance record written next to every run's artifacts."""

    command: str
    config_hash: Optional[str] = None
    seed: Optional[int] = None
    threads: int = 1
    versions: Dict[str, str] = Field(default_factory=dict)
    artifacts: List[ArtifactRecord] = Field(default_factory=list)
    status: Literal['complete', 'partial', 'failed'] = 'complete'
    error: Optional[str] = None
    started_at: datetime = Field(default_factory=datetime.utcnow)
    finished_at: Optional[datetime] = None


class DSMCBlock(BaseModel):
    """Particle simulation parameters."""

    model_config = ConfigDict(extra='forbid')

    n: int = 200_000
    dt: float = 0.01
    t_burn: float = 20.0
    t_avg: float = 40.0
    temperature: float = 1.0
    sample_every: int = 10
    p_max: float = 6.0

    @field_validator('n')
    @classmethod
    def validate_n(cls, v: int) -> int:
        if v < 2:
            raise ValueError('Ensemble needs at least 2 particles')
        return v

    @field_validator('dt', 't_avg')
    @classmethod
    def validate_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError('Must be positive')
        return v


class MomentsBlock(BaseModel):
    """Moment propagation and tail scan parameters."""

    model_config = ConfigDict(extra='forbid')

    p_max: float = 20.0
    m1: Optional[float] = None
    s_min: float = 0.5
    s_max: float = 2.5
    s_step: float = 0.01
    b: Optional[float] = None

    @field_validator('p_max')
    @classmethod
    def validate_p_max(cls, v: float) -> float:
        if v < 1.0 or abs(2 * v - round(2 * v)) > 1e-12:
            raise ValueError('p_max must be a half-integer >= 1')
        return v


class OutputBlock(BaseModel):
    """Where artifacts go."""

    model_config = ConfigDict(extra='forbid')

    dir: Optional[str] = None
    prefix: str = "run"


class ExperimentConfig(BaseModel):
    """A complete experiment, loaded from a flat key = value file."""

    model_config = ConfigDict(extra='forbid')

    pipeline: Literal['kernel', 'verify', 'moments', 'simulate', 'analyze', 'all'] = 'all'
    model: ForcingModel
    restitution: float = 0.8
    seed: int = 0
    dsmc: DSMCBlock = Field(default_factory=DSMCBlock)
    moments: MomentsBlock = Field(default_factory=MomentsBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    @field_validator('restitution')
    @classmethod
    def validate_restitution(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError('Restitution coefficient must be between 0 and 1')
        return v

    @property
    def params(self) -> RestitutionParams:
        return RestitutionParams(e=self.restitution)


class SuiteResult(BaseModel):
    """Outcome of one randomized verification suite."""

    suite: str
    trials: int
    violations: int
    worst_margin: float
    seed: int
    failures: List[str] = Field(default_factory=list)

    @computed_field  # type: ignore[misc]
    @property
    def passed(self) -> bool:
        return self.violations == 0
