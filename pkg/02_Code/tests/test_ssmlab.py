import json
import logging

import pandas as pd
import pytest

from ssmlab import (EXIT_ERROR, EXIT_OK, build_config, discover_scenarios, list_scenarios, main, run_scenario,
                    validate_config)
from ssmlab_models import ConfigValidationException, ScenarioStageException

SCENARIOS = ["decoherence-gamma", "lens-compensation", "mc-oracle", "split-readout", "ssm-lens", "step-pi",
             "waist-curve"]

SMALL_NEAR_FIELD = ["grid.nx=128", "grid.ny=128", "spin_wave.waist_x_um=80", "spin_wave.waist_y_um=80",
                    "reference.tilt_mrad=52.7"]


def write_config(path, document):
    path.write_text(json.dumps(document))
    return path


def test_list_names_every_scenario(capsys):
    assert [name for name, _ in list_scenarios()] == SCENARIOS
    assert main(["list"]) == EXIT_OK
    output = capsys.readouterr().out
    for name in SCENARIOS:
        assert name in output


def test_validate(tmp_path, capsys):
    good = write_config(tmp_path / "good.json", {"scenario": "step-pi", "seed": 1, "n_frames": 20})
    assert validate_config(good) == []
    assert main(["validate", str(good)]) == EXIT_OK
    assert "ok" in capsys.readouterr().out

    unknown = write_config(tmp_path / "unknown.json", {"scenario": "nope", "seed": 1})
    assert validate_config(unknown) == ["scenario: unknown scenario 'nope'"]

    broken = write_config(tmp_path / "broken.json", {"scenario": "step-pi", "grid": {"nx": "big"}})
    errors = validate_config(broken)
    assert "seed: missing (mandatory)" in errors
    assert "grid.nx: expected int, got 'big'" in errors
    assert main(["validate", str(broken)]) == EXIT_ERROR


def test_build_config_layers_defaults_file_and_overrides(tmp_path):
    path = write_config(tmp_path / "split.json", {"scenario": "split-readout", "seed": 4, "n_frames": 10,
                                                  "grid": {"ny": 128}})
    config = build_config("split-readout", path, ["grid.nx=64", "camera.gain=2"])
    assert config.seed == 4 and config.n_frames == 10
    assert (config.grid.nx, config.grid.ny) == (64, 128)
    assert config.camera.gain == 2
    assert config.noise.sigma_rel == pytest.approx(0.06)

    plain = build_config("mc-oracle")
    assert plain.seed == 0
    assert plain.noise.sigma_rel == pytest.approx(0.29)


def test_config_file_without_seed_is_rejected(tmp_path):
    path = write_config(tmp_path / "noseed.json", {"scenario": "mc-oracle"})
    assert validate_config(path) == ["seed: missing (mandatory)"]
    with pytest.raises(ConfigValidationException, match="seed: missing"):
        build_config("mc-oracle", path)
    assert main(["run", "mc-oracle", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_ERROR
    assert not (tmp_path / "out" / "report.json").exists()


def test_build_config_rejects_mismatched_or_unknown_scenarios(tmp_path):
    path = write_config(tmp_path / "other.json", {"scenario": "step-pi", "seed": 1})
    with pytest.raises(ConfigValidationException):
        build_config("ssm-lens", path)
    with pytest.raises(ConfigValidationException, match="unknown scenario"):
        build_config("nope")
    assert main(["run", "nope", "--out", str(tmp_path / "out")]) == EXIT_ERROR


def test_mc_oracle_reports_are_reproducible(tmp_path):
    overrides = ["monte_carlo.n_samples=2000"]
    for label in ("first", "second"):
        run_scenario(build_config("mc-oracle", overrides=overrides), tmp_path / label)
    first = (tmp_path / "first" / "report.json").read_bytes()
    assert first == (tmp_path / "second" / "report.json").read_bytes()
    table = pd.read_csv(tmp_path / "first" / "mc_oracle.csv")
    assert len(table) == 7
    assert set(table["check"]) == {"law", "gamma"}
    assert json.loads(first)["analysis"]["gamma"] == pytest.approx(0.29 ** 2 / 2)


def test_lens_compensation_restores_the_far_field(tmp_path):
    config = build_config("lens-compensation", overrides=["grid.nx=128", "grid.ny=128",
                                                          "spin_wave.waist_x_um=40", "spin_wave.waist_y_um=40"])
    report = run_scenario(config, tmp_path)
    assert report.passed
    assert report.analysis["w0_aberrated_mrad"] > report.analysis["w0_unaberrated_mrad"]
    assert (tmp_path / "maps" / "far_field_compensated.f32").exists()
    assert (tmp_path / "far_field_profiles.csv").exists()


ABERRATED_BEAM = ["grid.nx=256", "grid.ny=256", "spin_wave.waist_x_um=120", "spin_wave.waist_y_um=120"]


def test_lens_compensation_fails_without_the_ssm_lens(tmp_path):
    compensated = run_scenario(build_config("lens-compensation", overrides=ABERRATED_BEAM), tmp_path / "ssm")
    assert compensated.passed
    assert compensated.analysis["w0_aberrated_mrad"] > 1.05 * compensated.analysis["w0_unaberrated_mrad"]

    bare = run_scenario(build_config("lens-compensation", overrides=ABERRATED_BEAM + ["pulse.focal_mm=1e9"]),
                        tmp_path / "bare")
    assert not bare.passed
    failed = [metric.name for metric in bare.metrics if not metric.passed]
    assert "waist_rel_error" in failed


def test_diverging_ssm_lens_uses_the_opposite_detuning(tmp_path, caplog):
    overrides = ["grid.nx=128", "grid.ny=128", "spin_wave.waist_x_um=40", "spin_wave.waist_y_um=40",
                 "pulse.focal_mm=-125", "pulse.physical_focal_mm=2000"]
    with caplog.at_level(logging.INFO):
        report = run_scenario(build_config("lens-compensation", overrides=overrides), tmp_path)
    assert report.passed
    assert "detuning sign -1" in caplog.text


def test_step_pi_small_run(tmp_path):
    config = build_config("step-pi", overrides=SMALL_NEAR_FIELD + ["n_frames=20", "noise.sigma_rel=0.06"])
    report = run_scenario(config, tmp_path)
    assert report.analysis["fidelity"] > 0.8
    assert [metric.name for metric in report.metrics] == ["fidelity", "efficiency", "efficiency_predicted"]
    assert report.analysis["tracked_frames"] == {"reference": 20, "modulated": 20}
    assert (tmp_path / "phase_profile.csv").exists()
    assert (tmp_path / "timing.json").exists()


def test_step_pi_saves_frame_stacks(tmp_path):
    config = build_config("step-pi", overrides=SMALL_NEAR_FIELD + ["n_frames=3", "save_frames=true"])
    run_scenario(config, tmp_path)
    for label in ("reference", "modulated"):
        manifest = json.loads((tmp_path / "frames" / label / "manifest.json").read_text())
        assert manifest["n_frames"] == 3 and manifest["label"] == label
        assert (tmp_path / "frames" / label / "frame_000002.u16").exists()


def test_split_readout_small_run(tmp_path):
    overrides = SMALL_NEAR_FIELD + ["n_frames=50", "split.sawtooth_period_um=50", "spin_wave.peak_events=100",
                                    "reference.power=100"]
    report = run_scenario(build_config("split-readout", overrides=overrides), tmp_path)
    assert 0.1 < report.analysis["delta_phi_std"] < 0.3
    assert report.analysis["common_mode_residual_std"] < 0.05
    assert report.analysis["tracking_failures"] == 0
    table = pd.read_csv(tmp_path / "split_readout.csv")
    assert list(table.columns[:3]) == ["frame", "phi1", "phi2"]
    assert len(table) == 50


def test_ssm_lens_small_run(tmp_path):
    overrides = SMALL_NEAR_FIELD + ["n_frames=5", "n_repeats=2", "pulse.focal_lengths_mm=[60]"]
    report = run_scenario(build_config("ssm-lens", overrides=overrides), tmp_path)
    table = pd.read_csv(tmp_path / "ssm_lens_fits.csv")
    assert len(table) == 2
    assert report.analysis["focal_60mm"]["mean_mm"] == pytest.approx(60.0, rel=0.2)
    assert {metric.name for metric in report.metrics} == {"focal_rel_error_60mm", "fidelity_60mm",
                                                          "efficiency_60mm", "focal_std_60mm"}


def test_decoherence_gamma_small_run(tmp_path):
    overrides = SMALL_NEAR_FIELD + ["n_frames=20", "pulse.focal_mm=20"]
    report = run_scenario(build_config("decoherence-gamma", overrides=overrides), tmp_path)
    assert 0.025 < report.analysis["gamma"] < 0.06
    assert report.metrics[0].name == "gamma" and report.metrics[0].source == "[PAPER]"
    assert (tmp_path / "gamma_vs_phase.csv").exists()
    assert (tmp_path / "maps" / "gamma_map.f32").exists()


def test_waist_curve_recovers_the_model(tmp_path):
    assert main(["run", "waist-curve", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] is True
    recovered = {metric["name"]: metric["passed"] for metric in report["metrics"]}
    assert recovered == {"w_sw_um": True, "gamma": True, "f_ph_mm": True, "phase_scale": True,
                         "residual_rms": True}
    fit = json.loads((tmp_path / "waist_fit.json").read_text())
    assert fit["gamma"] == pytest.approx(0.042, rel=0.05)
    assert len(pd.read_csv(tmp_path / "waist_curve.csv")) == 41


def test_step_pi_reports_are_reproducible(tmp_path):
    overrides = SMALL_NEAR_FIELD + ["n_frames=3"]
    for label in ("first", "second"):
        run_scenario(build_config("step-pi", overrides=overrides), tmp_path / label)
    assert (tmp_path / "first" / "report.json").read_bytes() == (tmp_path / "second" / "report.json").read_bytes()


def test_failing_stage_is_named(tmp_path):
    config = build_config("step-pi", overrides=SMALL_NEAR_FIELD + ["reference.tilt_mrad=200", "n_frames=2"])
    with pytest.raises(ScenarioStageException) as error:
        run_scenario(config, tmp_path)
    assert error.value.stage == "setup"
    assert "step-pi" in str(error.value)
    assert main(["run", "step-pi", "--out", str(tmp_path), "--set", "reference.tilt_mrad=200"]) == EXIT_ERROR


def test_unexpected_errors_are_execution_errors(tmp_path, monkeypatch):
    def broken(self, config, out_dir):
        raise TypeError("unsupported operand")

    monkeypatch.setattr(discover_scenarios()["mc-oracle"], "simulate", broken)
    with pytest.raises(ScenarioStageException) as error:
        run_scenario(build_config("mc-oracle"), tmp_path)
    assert error.value.stage == "simulate"
    assert isinstance(error.value.cause, TypeError)
    assert main(["run", "mc-oracle", "--out", str(tmp_path)]) == EXIT_ERROR
