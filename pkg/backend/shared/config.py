"""
Configuration management for Granular Tails.

Runtime settings come from the environment (prefix ``GRANULAR_``) or a ``.env``
file. Experiment files are flat ``key = value`` files parsed with python-dotenv
and validated into ``ExperimentConfig``.
"""

import hashlib
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import dotenv_values
from pydantic import ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from backend.shared.exceptions import ConfigError
from backend.shared.models import ExperimentConfig, ForcingKind


class Settings(BaseSettings):
    """Application settings with environment variable support."""

    model_config = SettingsConfigDict(
        env_prefix="GRANULAR_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # Output & Runtime
    OUT_DIR: str = "./artifacts"
    THREADS: int = 1
    LOG_LEVEL: str = "info"
    LOG_FORMAT: str = "console"

    # Quadrature
    GAMMA_ABS_TOL: float = 1e-12
    SPHERE_REL_TOL: float = 1e-10
    SPHERE_MIN_NODES: int = 16
    SPHERE_MAX_NODES: int = 1024
    QUAD_LIMIT: int = 200

    # Moment propagation
    EPSILON: float = 0.5
    M_HALF_FLOOR: float = 1e-6
    CLOSURE_MAX_ITER: int = 200
    CLOSURE_TOL: float = 1e-13
    MAX_SWEEPS: int = 4
    P1_SCAN_MAX: float = 1e7
    A_GRID_POINTS: int = 4000
    A_P_TAIL: float = 400.0

    # Tail-order scan
    S_MIN: float = 0.5
    S_MAX: float = 2.5
    S_STEP: float = 0.01
    GROWTH_SLOPE_TOL: float = 0.2

    # DSMC
    MAJORANT_REFRESH: int = 100
    MAJORANT_FACTOR: float = 1.5
    TAIL_LO_PERCENTILE: float = 0.95
    TAIL_HI_PERCENTILE: float = 0.999
    HIST_BINS: int = 400
    BOOTSTRAP_SAMPLES: int = 100
    JACKKNIFE_BLOCKS: int = 20
    RELIABLE_REL_ERR: float = 0.2

    @field_validator("THREADS")
    @classmethod
    def validate_threads(cls, v: int) -> int:
        """At least one worker."""
        if v < 1:
            raise ValueError("THREADS must be >= 1")
        return v

    @field_validator("LOG_FORMAT")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        if v not in ("console", "json"):
            raise ValueError("LOG_FORMAT must be 'console' or 'json'")
        return v


class TheoryConstants:
    """Tail orders and normalization defaults of the steady-state theory."""

    # Tail order s per forcing; shear is a lower bound only
    TAIL_ORDERS = {
        ForcingKind.PURE_DIFFUSION: 1.5,
        ForcingKind.DIFFUSION_FRICTION: 2.0,
        ForcingKind.NEGATIVE_FRICTION: 1.0,
        ForcingKind.SHEAR_FLOW: 1.0,
    }

    # b keeps the Gamma-ratio conditions strict (b < 1 for a in {4/3, 2}, b < 3/2 for a = 1)
    NORMALIZATION_B = {
        "4/3": 0.9,
        "2": 0.9,
        "1": 1.4,
    }

    @classmethod
    def tail_exponent(cls, kind: ForcingKind) -> float:
        """a = 2/s for the given forcing."""
        return 2.0 / cls.TAIL_ORDERS[kind]

    @classmethod
    def default_b(cls, a: float) -> float:
        if abs(a - 1.0) < 1e-9:
            return cls.NORMALIZATION_B["1"]
        if abs(a - 2.0) < 1e-9:
            return cls.NORMALIZATION_B["2"]
        return cls.NORMALIZATION_B["4/3"]


# Flat config key prefixes and the nested block they populate
_BLOCK_PREFIXES = ("model", "dsmc", "moments", "output")
_TOP_LEVEL_KEYS = ("pipeline", "restitution", "seed")


def _key_lines(text: str) -> Dict[str, int]:
    """Map each config key to its 1-based line number."""
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key = line.split("=", 1)[0].strip()
        if key.startswith("export "):
            key = key[len("export "):].strip()
        lines.setdefault(key.lower(), number)
    return lines


def _nest(flat: Dict[str, Optional[str]], lines: Dict[str, int]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        name = key.lower()
        if value is None or value == "":
            raise ConfigError("Empty value", field=name, line=lines.get(name))
        if name in _TOP_LEVEL_KEYS:
            nested[name] = value
            continue
        prefix, _, field = name.partition("_")
        if prefix not in _BLOCK_PREFIXES or not field:
            raise ConfigError("Unknown key", field=name, line=lines.get(name))
        nested.setdefault(prefix, {})[field] = value
    return nested


def _locate(loc: Tuple[Any, ...], lines: Dict[str, int]) -> Tuple[str, Optional[int]]:
    parts = [str(part) for part in loc if not isinstance(part, int)]
    if not parts:
        return "<root>", None
    field = "_".join(parts)
    if field in lines:
        return field, lines[field]
    # Model-level validators report the block, not a key
    block_lines = [n for k, n in lines.items() if k.startswith(parts[0] + "_")]
    return field, min(block_lines) if block_lines else None


def load_experiment_config(path: str) -> Tuple[ExperimentConfig, str]:
    """
    Load and validate an experiment file.

    Args:
        path: Path to a flat ``key = value`` file

    Returns:
        The validated config and the SHA-256 of the file bytes
    """
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"Config file not found: {path}")

    raw = config_path.read_bytes()
    text = raw.decode("utf-8")
    lines = _key_lines(text)
    flat = dotenv_values(config_path)
    nested = _nest(dict(flat), lines)

    try:
        config = ExperimentConfig.model_validate(nested)
    except ValidationError as exc:
        first = exc.errors()[0]
        field, line = _locate(tuple(first["loc"]), lines)
        if first["type"] == "extra_forbidden":
            raise ConfigError("Unknown key", field=field, line=line) from exc
        raise ConfigError(first["msg"], field=field, line=line) from exc

    return config, hashlib.sha256(raw).hexdigest()


def get_settings() -> Settings:
    """Fresh settings, re-reading the environment."""
    return Settings()


# Global settings instance
settings = Settings()
theory_constants = TheoryConstants()
