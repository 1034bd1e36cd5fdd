"""Tests for runtime settings, experiment files and the shared models."""

import hashlib
from pathlib import Path

import pytest
from pydantic import ValidationError

from backend.shared.config import TheoryConstants, get_settings, load_experiment_config
from backend.shared.exceptions import ConfigError, MissingMomentError
from backend.shared.models import (
    BinomOrder,
    ForcingKind,
    ForcingModel,
    MomentsBlock,
    RestitutionParams,
    SpeedHistogram,
)

EXPERIMENT = """\
# diffusion-friction reference run
pipeline = moments
model_kind = diffusion_friction
model_mu = 1.0
model_lambda = 2.0
restitution = 0.8
seed = 42
dsmc_n = 5000
dsmc_dt = 0.02
moments_p_max = 12
moments_m1 = 1.2
output_prefix = df
"""


def _write(tmp_path, text: str):
    path = tmp_path / "experiment.env"
    path.write_text(text, encoding="utf-8")
    return path


class TestExperimentConfig:
    def test_loads_flat_file(self, tmp_path):
        path = _write(tmp_path, EXPERIMENT)
        config, digest = load_experiment_config(str(path))

        assert config.pipeline == "moments"
        assert config.model == ForcingModel.diffusion_friction(1.0, 2.0)
        assert config.params.beta == pytest.approx(0.9)
        assert config.seed == 42
        assert config.dsmc.n == 5000
        assert config.dsmc.dt == 0.02
        assert config.dsmc.t_avg == 40.0
        assert config.moments.p_max == 12.0
        assert config.moments.m1 == 1.2
        assert config.output.prefix == "df"
        assert digest == hashlib.sha256(path.read_bytes()).hexdigest()

    def test_unknown_block_key(self, tmp_path):
        path = _write(tmp_path, EXPERIMENT + "dsmc_bogus = 3\n")
        with pytest.raises(ConfigError) as info:
            load_experiment_config(str(path))
        assert info.value.field == "dsmc_bogus"
        assert info.value.line == 13

    def test_unknown_prefix(self, tmp_path):
        path = _write(tmp_path, "foo = 1\nmodel_kind = pure_diffusion\nmodel_mu = 1\n")
        with pytest.raises(ConfigError) as info:
            load_experiment_config(str(path))
        assert info.value.field == "foo"
        assert info.value.line == 1

    def test_invalid_value(self, tmp_path):
        path = _write(tmp_path, EXPERIMENT.replace("restitution = 0.8", "restitution = 1.5"))
        with pytest.raises(ConfigError) as info:
            load_experiment_config(str(path))
        assert info.value.field == "restitution"
        assert info.value.line == 6

    def test_model_rates_are_checked(self, tmp_path):
        path = _write(tmp_path, "model_kind = pure_diffusion\nmodel_mu = 1\nmodel_kappa = 2\n")
        with pytest.raises(ConfigError) as info:
            load_experiment_config(str(path))
        assert info.value.field.startswith("model")
        assert info.value.line == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(str(tmp_path / "absent.env"))

    def test_shipped_experiment(self):
        path = Path(__file__).resolve().parents[1] / "experiments" / "pd.env"
        config, _ = load_experiment_config(str(path))
        assert config.pipeline == "all"
        assert config.model == ForcingModel.pure_diffusion(1.0)
        assert config.dsmc.n == 200_000
        assert config.output.prefix == "pd"


class TestSettings:
    def test_environment_override(self, monkeypatch):
        monkeypatch.setenv("GRANULAR_THREADS", "4")
        monkeypatch.setenv("GRANULAR_S_STEP", "0.05")
        fresh = get_settings()
        assert fresh.THREADS == 4
        assert fresh.S_STEP == 0.05

    @pytest.mark.parametrize("name, value", [("GRANULAR_THREADS", "0"), ("GRANULAR_LOG_FORMAT", "xml")])
    def test_rejects_values(self, monkeypatch, name, value):
        monkeypatch.setenv(name, value)
        with pytest.raises(ValidationError):
            get_settings()

    def test_theory_constants(self):
        assert TheoryConstants.tail_exponent(ForcingKind.PURE_DIFFUSION) == pytest.approx(4.0 / 3.0)
        assert TheoryConstants.tail_exponent(ForcingKind.NEGATIVE_FRICTION) == 2.0
        assert TheoryConstants.default_b(1.0) == 1.4
        assert TheoryConstants.default_b(4.0 / 3.0) == 0.9


class TestModels:
    def test_restitution(self):
        assert RestitutionParams(e=0.8).beta == pytest.approx(0.9)
        assert RestitutionParams.from_beta(0.75).e == pytest.approx(0.5)
        with pytest.raises(ValidationError):
            RestitutionParams(e=1.5)

    @pytest.mark.parametrize(
        "payload",
        [
            {"kind": "pure_diffusion", "mu": 0.0},
            {"kind": "pure_diffusion", "mu": 1.0, "kappa": 1.0},
            {"kind": "diffusion_friction", "mu": 1.0},
            {"kind": "negative_friction", "kappa": 1.0, "mu": 1.0},
            {"kind": "shear_flow", "kappa": -1.0},
            {"kind": "shear_flow", "kappa": 1.0, "gamma": 2.0},
        ],
    )
    def test_forcing_rates(self, payload):
        with pytest.raises(ValidationError):
            ForcingModel.model_validate(payload)

    def test_forcing_alias(self):
        model = ForcingModel.model_validate({"kind": "diffusion_friction", "mu": 1.0, "lambda": 0.5})
        assert model.lam == 0.5
        assert model.max_rate == 0.5
        assert ForcingModel.shear_flow(2.0).is_shear

    def test_order_and_histogram_shapes(self):
        with pytest.raises(ValidationError):
            BinomOrder(p=1.0, k_p=1)
        with pytest.raises(ValidationError):
            SpeedHistogram(edges=[0.0, 1.0], counts=[1.0, 2.0], n_samples=3.0)
        with pytest.raises(ValidationError):
            MomentsBlock(p_max=2.3)

    def test_missing_moments_are_sorted(self):
        error = MissingMomentError([2.0, 0.5, 2.0])
        assert error.missing == [0.5, 2.0]
