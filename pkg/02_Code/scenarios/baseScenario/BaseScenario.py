import logging
import time
from abc import ABC, abstractmethod
from contextlib import contextmanager
from pathlib import Path

import pandas as pd

from field_core import ComplexField, RealMap, write_map
from memory_sim import SpinWaveState, apply_ssm, readout, write_in
from ssm_model import PhaseProfile1D, SsmPulse, detuning_sign_for, phase_to_intensity, realize_noise
from ssmlab_models import ScenarioConfig, ScenarioReport, ScenarioStageException, write_report

logger = logging.getLogger(__name__)


class BaseScenario(ABC):
    name = "base"
    description = ""
    defaults = {}

    @contextmanager
    def stage(self, label: str):
        """
        Runs a block as a named stage: any error raised inside is re-raised as a
        ScenarioStageException naming the scenario and the stage.
        """
        logger.info("[%s] %s", self.name, label)
        try:
            yield
        except ScenarioStageException:
            raise
        except Exception as error:
            raise ScenarioStageException(self.name, label, error) from error

    def run(self, config: ScenarioConfig, out_dir=None) -> ScenarioReport:
        """
        Simulates, analyses and writes report.json, timing.json and the scenario tables.

        Args:
            config (ScenarioConfig): Validated configuration.
            out_dir (str | Path): Output directory, config.output_dir by default.

        Returns:
            ScenarioReport: Metrics and analysis summary.
        """
        out_dir = Path(out_dir or config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.info("scenario %s: start, seed %d", self.name, config.seed)
        start = time.perf_counter()
        with self.stage("simulate"):
            result, metrics = self.simulate(config, out_dir)
        with self.stage("report"):
            report = ScenarioReport(self.name, config.seed, config.to_dict(), tuple(metrics), result.summary(),
                                    time.perf_counter() - start)
            write_report(report, out_dir)
        for metric in metrics:
            logger.info("%s = %.4g [%s, %s] %s %s", metric.name, metric.value, metric.low, metric.high,
                        metric.source, "ok" if metric.passed else "FAILED")
        logger.info("scenario %s: %s in %.1f s", self.name, "passed" if report.passed else "failed",
                    report.wall_clock_s)
        return report

    @abstractmethod
    def simulate(self, config: ScenarioConfig, out_dir: Path):
        """
        Runs the experiment.

        Returns:
            tuple[fringe_lab.AnalysisResult, list[ssmlab_models.Metric]]
        """
        pass

    @staticmethod
    def derived_seed(config: ScenarioConfig, *indices: int) -> tuple:
        """ Independent random stream (seed, *indices) of the run """
        return (config.seed, *indices)

    def pulse(self, profile: PhaseProfile1D, config: ScenarioConfig) -> SsmPulse:
        """ SSM pulse whose detuning sign follows the sign of the profile, e.g. of the lens focal length """
        settings = config.pulse
        sign = detuning_sign_for(profile, settings.detuning_sign)
        if sign != settings.detuning_sign:
            logger.info("[%s] detuning sign %+d imprints the profile without offset", self.name, sign)
        return SsmPulse(profile, settings.alpha, settings.duration_us, sign, config.noise)

    def imprint(self, state: SpinWaveState, profile: PhaseProfile1D, config: ScenarioConfig,
                seed) -> SpinWaveState:
        """ Noisy SSM pulse imprinting the profile on the stored spin-wave """
        pulse = self.pulse(profile, config)
        intensity = phase_to_intensity(profile, pulse)
        realization = realize_noise(intensity, config.noise, config.spin_wave.nz, seed)
        return apply_ssm(state, pulse, realization)

    def ssm_readout(self, signal: ComplexField, profile: PhaseProfile1D | None, config: ScenarioConfig,
                    seed) -> ComplexField:
        """ Write-in, optional SSM pulse and full readout """
        state = write_in(signal, config.spin_wave.nz)
        if profile is not None:
            state = self.imprint(state, profile, config, seed)
        field, _ = readout(state, 1.0)
        return field

    @staticmethod
    def save_map(out_dir: Path, name: str, data: RealMap | ComplexField) -> Path:
        suffix = ".c64" if isinstance(data, ComplexField) else ".f32"
        return write_map(data, Path(out_dir) / "maps" / f"{name}{suffix}")

    @staticmethod
    def save_table(out_dir: Path, name: str, table: pd.DataFrame) -> Path:
        path = Path(out_dir) / f"{name}.csv"
        table.to_csv(path, index=False, float_format="%.10g")
        return path

    def __str__(self):
        return self.name
