import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from field_core import ComplexField, Grid2D, RealMap, Roi, gaussian_field, roi_from_readout
from fringe_lab import (AnalyticSignal, CameraModel, DriftModel, KWindow, PhaseSeries, ReferenceBeam,
                        default_window, filter_stack, fourier_filter, synth_frame, synth_stack,
                        track_global_phase, average_filtered, write_frame_stack, _parallel_map)
from ssmlab_models import ScenarioConfig

from .BaseScenario import BaseScenario

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NearFieldSetup:
    grid: Grid2D
    signal: ComplexField
    reference: ReferenceBeam
    camera: CameraModel
    wavelength_nm: float


@dataclass(frozen=True, eq=False)
class RecordedRun:
    label: str
    averaged: AnalyticSignal
    phases: PhaseSeries
    window: KWindow


class NearFieldScenario(BaseScenario):
    def setup(self, config: ScenarioConfig) -> NearFieldSetup:
        """
        Builds the signal (Gaussian spin-wave scaled to peak_events at the camera),
        the tilted reference and the camera of a near-field run.

        Raises:
            NyquistException: Reference fringes too fine for the grid.
        """
        grid = config.grid.build()
        spin_wave = config.spin_wave
        signal = gaussian_field(grid, spin_wave.waist_x_um, spin_wave.waist_y_um)
        signal = signal.with_values(np.sqrt(spin_wave.peak_events) * signal.values)
        reference = config.reference.build(config.imaging.wavelength_nm)
        reference.check_nyquist(grid)
        return NearFieldSetup(grid, signal, reference, config.camera, config.imaging.wavelength_nm)

    @staticmethod
    def readout_roi(setup: NearFieldSetup, config: ScenarioConfig, seed) -> Roi:
        """ ROI from a camera image of the readout alone, no SSM and no reference """
        counts, _ = setup.camera.expose(np.abs(setup.signal.values) ** 2, np.random.default_rng(seed))
        return roi_from_readout(RealMap(setup.grid, counts.astype(float)), config.roi_sigmas)

    def record(self, setup: NearFieldSetup, readouts: list, config: ScenarioConfig, label: str, seed,
               window: KWindow | None = None, out_dir: Path | None = None) -> RecordedRun:
        """
        Interferometric run: n_frames camera frames under random-walk drift, filtered,
        phase-tracked and averaged after drift compensation.

        Args:
            setup (NearFieldSetup): Grid, reference and camera.
            readouts (list[ComplexField]): Readout fields sharing the frames.
            config (ScenarioConfig): Frame count, drift and threads.
            label (str): Run name in logs and in the frame directory.
            seed: Run stream; the drift uses (*seed, 0), the camera (*seed, 1, frame).
            window (KWindow): Filter window, measured on the first frame when None.
            out_dir (Path): Where frame stacks go when config.save_frames is set.

        Returns:
            RecordedRun: Averaged analytic signal, tracked phases and the window.
        """
        n_frames = config.n_frames
        drift = DriftModel("random-walk", config.drift.step_std, (*seed, 0)).realize(n_frames)
        camera_seed = (*seed, 1)
        if config.save_frames and out_dir is not None:
            frames = synth_stack(readouts, setup.reference, drift, setup.camera, camera_seed, workers=config.workers)
            window = window or default_window(frames[0], setup.reference)
            manifest = {"seed": list(camera_seed), "label": label,
                        "reference": {"tilt_kx": setup.reference.tilt_kx, "tilt_ky": setup.reference.tilt_ky,
                                      "power": setup.reference.power},
                        "camera": config.to_dict()["camera"]}
            write_frame_stack(frames, Path(out_dir) / "frames" / label, manifest)
            stack = filter_stack(frames, window, config.workers)
        else:
            first = synth_frame(readouts, setup.reference, drift[0], setup.camera, camera_seed, 0)
            window = window or default_window(first, setup.reference)

            def filtered(index: int) -> AnalyticSignal:
                frame = first if index == 0 else synth_frame(readouts, setup.reference, drift[index],
                                                             setup.camera, camera_seed, index)
                return fourier_filter(frame, window)

            stack = _parallel_map(filtered, range(n_frames), config.workers)
        series = track_global_phase(stack, unwrap=True)
        averaged = average_filtered(stack, series)
        logger.info("%s run: %d frames averaged, %d tracking failures", label, n_frames, series.n_failed)
        return RecordedRun(label, averaged, series, window)
