import json

import numpy as np
import pytest

from ssmlab_models import (ConfigValidationException, GridConfig, Metric, ScenarioConfig, ScenarioReport,
                           apply_override, config_errors, config_from_dict, merge_documents, read_document,
                           write_report)
from field_core import SsmLabException


def test_minimal_document_takes_the_defaults():
    config = config_from_dict({"scenario": "step-pi", "seed": 3})
    assert config.seed == 3
    assert config.grid == GridConfig()
    assert config.reference.tilt_mrad == 22.0
    assert config.noise.sigma_rel == pytest.approx(0.06)
    assert config.camera.bit_depth == 12
    assert config.n_frames == 200


def test_missing_mandatory_keys_are_named():
    errors = config_errors({"grid": {"nx": 64}})
    assert "scenario: missing (mandatory)" in errors
    assert "seed: missing (mandatory)" in errors


@pytest.mark.parametrize("document, expected", [
    ({"scenario": "x", "seed": 0, "colour": 1}, "colour: unknown key"),
    ({"scenario": "x", "seed": 0, "grid": {"nz": 4}}, "grid.nz: unknown key"),
    ({"scenario": "x", "seed": "zero"}, "seed: expected int, got 'zero'"),
    ({"scenario": "x", "seed": 0, "camera": {"shot_noise": 1}}, "camera.shot_noise: expected bool, got 1"),
    ({"scenario": "x", "seed": 0, "grid": []}, "grid: expected an object, got []"),
])
def test_config_errors_are_named(document, expected):
    assert expected in config_errors(document)


def test_invalid_values_name_their_section():
    errors = config_errors({"scenario": "x", "seed": 0, "grid": {"pitch_x_um": -1.0}})
    assert len(errors) == 1 and errors[0].startswith("grid: ")
    errors = config_errors({"scenario": "x", "seed": 0, "camera": {"bit_depth": 20}})
    assert errors[0].startswith("camera: ")
    assert config_errors({"scenario": "x", "seed": -1}) == ["config: seed=-1 must be >= 0"]


def test_all_errors_are_reported_together():
    with pytest.raises(ConfigValidationException) as error:
        config_from_dict({"seed": 1.5, "bogus": True, "pulse": {"detuning_sign": 0}})
    assert len(error.value.errors) == 4
    assert "bogus: unknown key" in str(error.value)


def test_ints_are_accepted_for_floats_and_lists_for_tuples():
    config = config_from_dict({"scenario": "x", "seed": 0, "pulse": {"focal_mm": 80, "focal_lengths_mm": [60, 90]}})
    assert config.pulse.focal_mm == 80
    assert config.pulse.focal_lengths_mm == (60, 90)


def test_to_dict_rebuilds_the_same_config():
    config = config_from_dict({"scenario": "split-readout", "seed": 7, "split": {"fractions": [0.4, 0.6]},
                               "camera": {"gain": 2.5}, "n_frames": 10})
    document = config.to_dict()
    assert document["split"]["fractions"] == [0.4, 0.6]
    assert config_from_dict(document) == config


def test_merge_documents_is_recursive_and_leaves_inputs_alone():
    base = {"seed": 0, "grid": {"nx": 64, "ny": 64}}
    merged = merge_documents(base, {"grid": {"nx": 128}, "n_frames": 5})
    assert merged == {"seed": 0, "grid": {"nx": 128, "ny": 64}, "n_frames": 5}
    assert base["grid"]["nx"] == 64


def test_apply_override():
    document = {"scenario": "x", "seed": 0}
    updated = apply_override(document, "camera.gain=3.0")
    updated = apply_override(updated, "output_dir=out/run 1")
    updated = apply_override(updated, "pulse.focal_lengths_mm=[60, 90]")
    assert updated["camera"] == {"gain": 3.0}
    assert updated["output_dir"] == "out/run 1"
    assert updated["pulse"]["focal_lengths_mm"] == [60, 90]
    assert "camera" not in document
    with pytest.raises(ConfigValidationException):
        apply_override(document, "camera.gain")
    with pytest.raises(ConfigValidationException):
        apply_override(document, "seed.value=1")


def test_read_document(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"scenario": "x", "seed": 1}))
    assert read_document(path) == {"scenario": "x", "seed": 1}
    path.write_text("{not json")
    with pytest.raises(ConfigValidationException, match="invalid JSON"):
        read_document(path)
    with pytest.raises(ConfigValidationException, match="cannot read"):
        read_document(tmp_path / "missing.json")


@pytest.mark.parametrize("metric, passed", [
    (Metric("fidelity", 0.97, low=0.95, source="[PAPER]"), True),
    (Metric("fidelity", 0.94, low=0.95, source="[PAPER]"), False),
    (Metric("efficiency", 0.7, 0.67, 0.82, "[PAPER]"), True),
    (Metric("efficiency", 0.9, 0.67, 0.82, "[PAPER]"), False),
    (Metric("residual", np.inf, high=1.0), False),
    (Metric("residual", np.nan), False),
    (Metric("waist", 2.0), True),
])
def test_metric_bounds(metric, passed):
    assert metric.passed is passed
    assert metric.to_dict()["passed"] is passed


def test_metric_with_numpy_bounds_is_written(tmp_path):
    truth = np.array([150.0, 0.042])
    metric = Metric("gamma", np.float64(0.0415), truth[1] * 0.95, truth[1] * 1.05)
    assert metric.passed is True
    assert type(metric.low) is float and type(metric.high) is float
    report = ScenarioReport("waist-curve", 0, {}, (metric,), {}, 0.5)
    content = json.loads(write_report(report, tmp_path).read_text())
    assert content["metrics"][0]["passed"] is True


def test_metric_source_is_checked():
    with pytest.raises(SsmLabException):
        Metric("fidelity", 1.0, source="[GUESS]")


def test_write_report(tmp_path):
    config = ScenarioConfig("mc-oracle", 1)
    report = ScenarioReport("mc-oracle", 1, config.to_dict(),
                            (Metric("a", 1.0, low=0.5), Metric("b", 2.0, high=1.0)), {"gamma": 0.042}, 1.25)
    assert not report.passed
    path = write_report(report, tmp_path / "out")
    content = json.loads(path.read_text())
    assert content["passed"] is False
    assert [metric["name"] for metric in content["metrics"]] == ["a", "b"]
    assert "wall_clock_s" not in path.read_text()
    assert json.loads((tmp_path / "out" / "timing.json").read_text()) == {"wall_clock_s": 1.25}
    assert list(content) == sorted(content)
