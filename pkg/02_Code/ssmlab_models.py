"""
This file contains the configuration and report types of the SSM lab.

A scenario configuration is one JSON document layered as:
dataclass defaults < scenario defaults < config file < --set overrides.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from field_core import Grid2D, SsmLabException
from fringe_lab import CameraModel, ReferenceBeam
from optics_prop import ImagingConfig, WaistFitModel
from ssm_model import DEFAULT_SLICES, MIN_SLICES, SsmNoiseModel

logger = logging.getLogger(__name__)

SOURCES = ("[PAPER]", "[DERIVED]")
REPORT_NAME = "report.json"
TIMING_NAME = "timing.json"


class ConfigValidationException(SsmLabException):
    """ Raised whenever a configuration document has errors, one named entry per problem """

    def __init__(self, errors: list[str]) -> None:
        super().__init__("; ".join(errors))
        self.errors = list(errors)


class ScenarioStageException(SsmLabException):
    """ Raised whenever a scenario stage fails, naming the scenario and the stage """

    def __init__(self, scenario: str, stage: str, cause: Exception) -> None:
        super().__init__(f"{scenario}: stage '{stage}' failed: {cause}")
        self.scenario = scenario
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class GridConfig:
    nx: int = 512
    ny: int = 512
    pitch_x_um: float = 3.25
    pitch_y_um: float = 3.25

    def __post_init__(self) -> None:
        self.build()

    def build(self) -> Grid2D:
        return Grid2D(self.nx, self.ny, self.pitch_x_um, self.pitch_y_um)


@dataclass(frozen=True)
class SpinWaveConfig:
    waist_x_um: float = 150.0
    waist_y_um: float = 150.0
    peak_events: float = 20.0  # readout intensity at the camera, events per pixel
    nz: int = DEFAULT_SLICES
    decay_per_us: float = 1.0

    def __post_init__(self) -> None:
        if not (self.waist_x_um > 0 and self.waist_y_um > 0 and self.peak_events > 0):
            raise SsmLabException("spin-wave waists and peak_events must be positive")
        if self.nz < MIN_SLICES:
            raise SsmLabException(f"nz={self.nz} must be >= {MIN_SLICES}")
        if not 0 < self.decay_per_us <= 1:
            raise SsmLabException(f"decay_per_us={self.decay_per_us} must lie in (0, 1]")


@dataclass(frozen=True)
class PulseConfig:
    alpha: float = 1.0
    duration_us: float = 1.0
    detuning_sign: int = 1
    focal_mm: float = 125.0
    focal_lengths_mm: tuple = (82.0, 163.0, 401.0)
    physical_focal_mm: float = -2000.0
    step_height_rad: float = float(np.pi)
    step_edge_um: float = 10.0

    def __post_init__(self) -> None:
        if not self.alpha > 0 or self.duration_us < 0:
            raise SsmLabException(f"invalid pulse: alpha={self.alpha}, duration_us={self.duration_us}")
        if self.detuning_sign not in (1, -1):
            raise SsmLabException(f"detuning_sign={self.detuning_sign} must be +1 or -1")
        if 0 in (self.focal_mm, self.physical_focal_mm) or 0 in self.focal_lengths_mm:
            raise SsmLabException("focal lengths must be nonzero")
        if self.step_edge_um < 0:
            raise SsmLabException(f"step_edge_um={self.step_edge_um} must be >= 0")


@dataclass(frozen=True)
class ReferenceConfig:
    tilt_mrad: float = 22.0
    direction_deg: float = 45.0
    power: float = 20.0  # events per pixel

    def __post_init__(self) -> None:
        if not self.tilt_mrad > 0 or self.power < 0:
            raise SsmLabException(f"invalid reference: tilt_mrad={self.tilt_mrad}, power={self.power}")

    def build(self, wavelength_nm: float) -> ReferenceBeam:
        return ReferenceBeam.from_angle(self.tilt_mrad, self.direction_deg, wavelength_nm, self.power)


@dataclass(frozen=True)
class DriftConfig:
    step_std: float = 0.05
    jitter_std: float = 0.14

    def __post_init__(self) -> None:
        if self.step_std < 0 or self.jitter_std < 0:
            raise SsmLabException("drift step_std and jitter_std must be >= 0")


@dataclass(frozen=True)
class WaistCurveConfig:
    w_sw_um: float = 150.0
    gamma: float = 0.042
    f_ph_mm: float = -2000.0
    phase_scale: float = 20.0
    p_max: float = 8.0
    n_points: int = 41
    noise_rel: float = 0.02
    initial_perturbation: float = 0.1

    def __post_init__(self) -> None:
        self.truth()
        if not self.p_max > 0 or self.n_points < 8 or self.noise_rel < 0:
            raise SsmLabException(
                f"invalid waist scan: p_max={self.p_max}, n_points={self.n_points}, noise_rel={self.noise_rel}")

    def truth(self) -> WaistFitModel:
        return WaistFitModel(self.w_sw_um, self.gamma, self.f_ph_mm, self.phase_scale)


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple = (0.5, 0.5)
    storage_times_us: tuple = (1.0, 10.0)
    sawtooth_period_um: float = 100.0

    def __post_init__(self) -> None:
        if len(self.fractions) != 2 or len(self.storage_times_us) != 2:
            raise SsmLabException("split readout takes exactly two fractions and two storage times")
        if not self.sawtooth_period_um > 0:
            raise SsmLabException(f"sawtooth_period_um={self.sawtooth_period_um} must be > 0")


@dataclass(frozen=True)
class MonteCarloConfig:
    alpha_t_sigmas: tuple = (0.5, 1.0, 2.0)
    phases_rad: tuple = (0.5, 1.0, 2.0, float(np.pi))
    n_samples: int = 100_000

    def __post_init__(self) -> None:
        if self.n_samples < 1000:
            raise SsmLabException(f"n_samples={self.n_samples} must be >= 1000")


SECTIONS = {
    "grid": GridConfig,
    "imaging": ImagingConfig,
    "spin_wave": SpinWaveConfig,
    "pulse": PulseConfig,
    "noise": SsmNoiseModel,
    "camera": CameraModel,
    "reference": ReferenceConfig,
    "drift": DriftConfig,
    "waist_curve": WaistCurveConfig,
    "split": SplitConfig,
    "monte_carlo": MonteCarloConfig,
}

TOP_LEVEL = {"scenario": str, "seed": int, "n_frames": int, "n_repeats": int, "roi_sigmas": float,
             "output_dir": str, "save_frames": bool, "workers": int}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    seed: int
    grid: GridConfig = field(default_factory=GridConfig)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    spin_wave: SpinWaveConfig = field(default_factory=SpinWaveConfig)
    pulse: PulseConfig = field(default_factory=PulseConfig)
    noise: SsmNoiseModel = field(default_factory=SsmNoiseModel)
    camera: CameraModel = field(default_factory=CameraModel)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    waist_curve: WaistCurveConfig = field(default_factory=WaistCurveConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    monte_carlo: MonteCarloConfig = field(default_factory=MonteCarloConfig)
    n_frames: int = 200
    n_repeats: int = 3
    roi_sigmas: float = 2.0
    output_dir: str = "results"
    save_frames: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise SsmLabException(f"seed={self.seed} must be >= 0")
        if self.n_frames < 1 or self.n_repeats < 1 or self.workers < 1:
            raise SsmLabException("n_frames, n_repeats and workers must be >= 1")
        if self.roi_sigmas < 0:
            raise SsmLabException(f"roi_sigmas={self.roi_sigmas} must be >= 0")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _type_ok(value, expected: type) -> bool:
    if expected is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if expected is int:
        return isinstance(value, int)
    if expected is float:
        return isinstance(value, (int, float))
    if expected is tuple:
        return isinstance(value, (list, tuple))
    return isinstance(value, expected)


def _build_section(cls, value, path: str, errors: list[str]):
    if not isinstance(value, dict):
        errors.append(f"{path}: expected an object, got {value!r}")
        return None
    defaults = {item.name: item.default for item in fields(cls)}
    kwargs = {}
    for key, item in value.items():
        if key not in defaults:
            errors.append(f"{path}.{key}: unknown key")
            continue
        expected = type(defaults[key])
        if not _type_ok(item, expected):
            errors.append(f"{path}.{key}: expected {expected.__name__}, got {item!r}")
            continue
        kwargs[key] = tuple(item) if expected is tuple else item
    try:
        return cls(**kwargs)
    except SsmLabException as error:
        errors.append(f"{path}: {error}")
        return None


def config_errors(document) -> list[str]:
    """ Every named problem of a configuration document, empty when it is valid """
    try:
        config_from_dict(document)
    except ConfigValidationException as error:
        return error.errors
    return []


def config_from_dict(document) -> ScenarioConfig:
    """
    Builds a ScenarioConfig from a JSON document.

    Raises:
        ConfigValidationException: Missing mandatory keys, unknown keys, wrong types or invalid values.
    """
    if not isinstance(document, dict):
        raise ConfigValidationException(["config: expected a JSON object"])
    errors = [f"{key}: missing (mandatory)" for key in ("scenario", "seed") if key not in document]
    kwargs = {}
    for key, value in document.items():
        if key in SECTIONS:
            section = _build_section(SECTIONS[key], value, key, errors)
            if section is not None:
                kwargs[key] = section
        elif key in TOP_LEVEL:
            if _type_ok(value, TOP_LEVEL[key]):
                kwargs[key] = value
            else:
                errors.append(f"{key}: expected {TOP_LEVEL[key].__name__}, got {value!r}")
        else:
            errors.append(f"{key}: unknown key")
    if not errors:
        try:
            return ScenarioConfig(**kwargs)
        except SsmLabException as error:
            errors.append(f"config: {error}")
    raise ConfigValidationException(errors)


def merge_documents(base: dict, override: dict) -> dict:
    """ Recursive merge, override wins """
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_documents(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_override(document: dict, assignment: str) -> dict:
    """
    Applies one 'dotted.key=value' override; the value is parsed as JSON, else kept as a string.

    Raises:
        ConfigValidationException: Assignment without '=' or empty key.
    """
    key, separator, raw = assignment.partition("=")
    if not separator or not key.strip():
        raise ConfigValidationException([f"override {assignment!r}: expected dotted.key=value"])
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    updated = copy.deepcopy(document)
    node = updated
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigValidationException([f"override {assignment!r}: {part} is not a section"])
    node[parts[-1]] = value
    return updated


def read_document(path: str | Path) -> dict:
    """
    Reads a JSON configuration file.

    Raises:
        ConfigValidationException: Unreadable file or invalid JSON.
    """
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as error:
        raise ConfigValidationException([f"{path}: cannot read ({error.strerror})"]) from error
    except json.JSONDecodeError as error:
        raise ConfigValidationException([f"{path}: invalid JSON ({error.msg}, line {error.lineno})"]) from error


@dataclass(frozen=True)
class Metric:
    """ One acceptance figure with its bounds and where the bounds come from """
    name: str
    value: float
    low: float | None = None
    high: float | None = None
    source: str = "[DERIVED]"

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise SsmLabException(f"metric {self.name}: source {self.source!r} must be one of {SOURCES}")
        object.__setattr__(self, "value", float(self.value))
        for bound in ("low", "high"):
            if getattr(self, bound) is not None:
                object.__setattr__(self, bound, float(getattr(self, bound)))

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.value):
            return False
        return bool((self.low is None or self.value >= self.low) and (self.high is None or self.value <= self.high))

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "low": self.low, "high": self.high,
                "source": self.source, "passed": self.passed}


@dataclass(frozen=True)
class ScenarioReport:
    scenario: str
    seed: int
    config: dict
    metrics: tuple
    analysis: dict
    wall_clock_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(metric.passed for metric in self.metrics)

    def to_dict(self) -> dict:
        """ Report content without timing, stable across reruns """
        return {"scenario": self.scenario, "seed": self.seed, "config": self.config,
                "metrics": [metric.to_dict() for metric in self.metrics],
                "analysis": self.analysis, "passed": self.passed}


def write_report(report: ScenarioReport, out_dir: str | Path) -> Path:
    """ report.json (sorted keys, no timestamps) and timing.json side by side """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / REPORT_NAME
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2), encoding="utf-8")
    (out_dir / TIMING_NAME).write_text(json.dumps({"wall_clock_s": report.wall_clock_s}, indent=2),
                                       encoding="utf-8")
    return path
