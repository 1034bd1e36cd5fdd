"""
Artifact writing, run manifests and the report-versus-grid comparison.

Tables go to CSV, nested reports to JSON. Every run leaves a manifest.json
listing its artifacts, the config hash, the seed and package versions; a
failed run keeps what it wrote and is flagged 'partial'.
"""

import logging
import platform
from datetime import datetime
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
from pydantic import BaseModel

from backend import __version__
from backend.moment_service.grid import MomentGrid
from backend.shared.exceptions import MismatchedParametersError
from backend.shared.models import (
    ArtifactRecord,
    ConsistencyReport,
    ConsistencyRow,
    MomentTable,
    RunManifest,
    SpeedHistogram,
    SteadyStateReport,
)


logger = logging.getLogger(__name__)

_TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "click")
# Relative slack on interval endpoints
_ENDPOINT_TOL = 1e-9


def package_versions() -> Dict[str, str]:
    versions = {"granular-tails": __version__, "python": platform.python_version()}
    for name in _TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def moments_frame(table: MomentTable) -> pd.DataFrame:
    return pd.DataFrame(
        [row.model_dump() for row in table.rows],
        columns=["p", "m", "stderr", "reliable"],
    )


def histogram_frame(histogram: SpeedHistogram) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "v_lo": histogram.edges[:-1],
            "v_hi": histogram.edges[1:],
            "count": histogram.counts,
        }
    )


def consistency_frame(report: ConsistencyReport) -> pd.DataFrame:
    return pd.DataFrame(
        [row.model_dump() for row in report.rows],
        columns=["p", "m", "m_lo", "m_hi", "inside"],
    )


class ArtifactWriter:
    """Writes a run's files under one directory and keeps its manifest."""

    def __init__(
        self,
        out_dir: Union[str, Path],
        command: str,
        prefix: str = "run",
        config_hash: Optional[str] = None,
        seed: Optional[int] = None,
        threads: int = 1,
    ):
        self.out_dir = Path(out_dir)
        self.prefix = prefix
        self.manifest = RunManifest(
            command=command,
            config_hash=config_hash,
            seed=seed,
            threads=threads,
            versions=package_versions(),
        )
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / f"{self.prefix}_{name}"

    def _record(self, path: Path, kind: str) -> Path:
        self.manifest.artifacts.append(ArtifactRecord(path=path.name, kind=kind))
        logger.info("Wrote %s (%s)", path, kind)
        return path

    def write_json(self, name: str, model: BaseModel, kind: str) -> Path:
        path = self.path(name)
        path.write_text(model.model_dump_json(indent=2), encoding="utf-8")
        return self._record(path, kind)

    def write_json_list(self, name: str, models: List[BaseModel], kind: str) -> Path:
        path = self.path(name)
        body = ",\n".join(model.model_dump_json(indent=2) for model in models)
        path.write_text(f"[\n{body}\n]\n", encoding="utf-8")
        return self._record(path, kind)

    def write_csv(self, name: str, frame: pd.DataFrame, kind: str) -> Path:
        path = self.path(name)
        frame.to_csv(path, index=False, float_format="%.17g")
        return self._record(path, kind)

    def write_grid(self, name: str, grid: MomentGrid, kind: str = "moment_grid") -> Path:
        path = self.path(name)
        grid.to_csv(path)
        return self._record(path, kind)

    def finish(self, status: str = "complete", error: Optional[str] = None) -> Path:
        """Write manifest.json; artifacts of a failed run are marked partial."""
        self.manifest.status = status  # type: ignore[assignment]
        self.manifest.error = error
        self.manifest.finished_at = datetime.utcnow()
        if status != "complete":
            for record in self.manifest.artifacts:
                record.status = "partial"
        path = self.out_dir / f"{self.prefix}_manifest.json"
        path.write_text(self.manifest.model_dump_json(indent=2), encoding="utf-8")
        return path


def load_report(path: Union[str, Path]) -> SteadyStateReport:
    return SteadyStateReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


def _check_parameters(report: SteadyStateReport, grid: MomentGrid, check_restitution: bool) -> None:
    meta = grid.metadata
    if report.model is None:
        raise MismatchedParametersError("Report has no forcing model to compare against")
    if "model" not in meta:
        raise MismatchedParametersError("Grid carries no model metadata")
    if meta["model"] != report.model.kind.value:
        raise MismatchedParametersError(
            f"Report model {report.model.kind.value} does not match grid model {meta['model']}"
        )
    rates = {"mu": report.model.mu, "lambda": report.model.lam, "kappa": report.model.kappa}
    for key, value in rates.items():
        if key in meta and abs(float(meta[key]) - value) > 1e-12 * max(1.0, abs(value)):
            raise MismatchedParametersError(f"Rate {key}: report {value} vs grid {meta[key]}")
    if "e" in meta and abs(float(meta["e"]) - report.restitution.e) > 1e-12:
        if check_restitution:
            raise MismatchedParametersError(
                f"Restitution: report e={report.restitution.e} vs grid e={meta['e']}"
            )
        logger.warning(
            "Comparing a report at e=%g with a grid at e=%s", report.restitution.e, meta["e"]
        )


def compare(
    report: SteadyStateReport,
    grid: MomentGrid,
    p_max: float = 6.0,
    n_sigma: float = 3.0,
    check_restitution: bool = True,
) -> ConsistencyReport:
    """
    Check each empirical m_p of a steady report against the grid interval.

    A row is inside when [m - n_sigma stderr, m + n_sigma stderr] meets
    [m_lo, m_hi] (endpoints widened by a relative 1e-9).

    Args:
        report: DSMC steady-state report
        grid: Propagated moment grid with model metadata
        p_max: Largest order compared
        n_sigma: Statistical allowance in jackknife standard errors
        check_restitution: Reject grids propagated at another e

    Raises:
        MismatchedParametersError: Empty grid, different forcing or different e
    """
    if len(grid) <= 1:
        raise MismatchedParametersError("Grid holds no moments beyond m_0")
    _check_parameters(report, grid, check_restitution)

    rows: List[ConsistencyRow] = []
    for row in report.moments.rows:
        if row.p > p_max + 1e-12 or not grid.has(row.p):
            continue
        lo, hi = grid.interval(row.p)
        spread = n_sigma * row.stderr
        inside = (row.m + spread >= lo * (1.0 - _ENDPOINT_TOL)) and (
            row.m - spread <= hi * (1.0 + _ENDPOINT_TOL)
        )
        rows.append(ConsistencyRow(p=row.p, m=row.m, m_lo=lo, m_hi=hi, inside=inside))

    if not rows:
        raise MismatchedParametersError("Report and grid share no moment orders")

    violations = [row.p for row in rows if not row.inside]
    if violations:
        logger.warning(
            "Empirical moments outside the grid at p = %s",
            ", ".join(f"{p:g}" for p in violations),
        )
    return ConsistencyReport(
        kind=report.model.kind,  # type: ignore[union-attr]
        e=report.restitution.e,
        rows=rows,
        passed=not violations,
        violations=violations,
    )
