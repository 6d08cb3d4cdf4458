"""
This file contains the near-field interferometry lab.

Forward: readout x tilted reference beam, camera chain and interferometric drift
give camera frames. Inverse: Fourier filtering of one sideband, global phase
tracking, drift-compensated averaging, phase and amplitude extraction, decoherence
estimation, parabolic focal fits and the split-readout statistics.

Sign convention: the reference field carries exp(-i K0.r), so the sideband centred
on +K0 holds readout * conj(reference) and its argument is the readout phase.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.stats import linregress

from field_core import (ComplexField, Grid2D, RealMap, Roi, SsmLabException, fft2_centered,
                        ifft2_centered, wavenumber)
from ssm_model import DEFAULT_WAVELENGTH_NM

logger = logging.getLogger(__name__)

# Reference beam
DEFAULT_TILT_MRAD = 22.0
DEFAULT_TILT_DIRECTION_DEG = 45.0
MIN_FRINGE_PERIOD_SAMPLES = 4.0

# Camera and drift
DEFAULT_EXCESS_NOISE = 2.0
DEFAULT_DRIFT_STEP_RAD = 0.05
DEFAULT_FRAME_RATE_HZ = 200.0

# Retrieval thresholds
TRACKING_THRESHOLD = 1e-3
LOW_CONFIDENCE_AMPLITUDE = 0.1
LOW_CONFIDENCE_FRACTION = 0.1
DEFAULT_MASK_THRESHOLD = 0.01
MAX_EXCLUDED_FRACTION = 0.3
NO_CURVATURE_FOCAL_MM = 1e5
MIN_SIDEBAND_CLEARANCE_BINS = 2
DEFAULT_ROLLING_WINDOW = 50

FRAME_PATTERN = "frame_{:06d}.u16"
MANIFEST_NAME = "manifest.json"


class NyquistException(SsmLabException):
    """ Raised whenever the reference tilt gives fringes too fine for the camera """
    pass


class FilterWindowException(SsmLabException):
    """ Raised whenever a K-space window is empty, touches DC or differs across a stack """
    pass


class SidebandOverlapException(SsmLabException):
    """ Raised whenever the sidebands of two readouts cannot be told apart """
    pass


class DegenerateSignalException(SsmLabException):
    """ Raised whenever an analysis step has nothing to work with """
    pass


class DecoherenceMaskException(SsmLabException):
    """ Raised whenever too many ROI pixels have to be excluded from the decoherence map """
    pass


class ParabolaFitFailureException(SsmLabException):
    """ Raised whenever the complex-domain parabola fit does not converge """
    pass


@dataclass(frozen=True, eq=False)
class ReferenceBeam:
    """ Tilted plane reference, carrier K0 in rad/um, optional amplitude map """
    tilt_kx: float
    tilt_ky: float
    power: float = 1.0
    amplitude: np.ndarray | None = None

    def __post_init__(self) -> None:
        if np.hypot(self.tilt_kx, self.tilt_ky) == 0:
            raise NyquistException("reference tilt |K0| must be > 0 to form fringes")
        if self.power < 0:
            raise NyquistException(f"reference power {self.power} must be >= 0")

    @classmethod
    def from_angle(cls, tilt_mrad: float = DEFAULT_TILT_MRAD,
                   direction_deg: float = DEFAULT_TILT_DIRECTION_DEG,
                   wavelength_nm: float = DEFAULT_WAVELENGTH_NM, power: float = 1.0) -> ReferenceBeam:
        magnitude = wavenumber(wavelength_nm) * tilt_mrad * 1e-3
        direction = np.deg2rad(direction_deg)
        return cls(magnitude * np.cos(direction), magnitude * np.sin(direction), power)

    @property
    def carrier(self) -> tuple[float, float]:
        return self.tilt_kx, self.tilt_ky

    @property
    def carrier_norm(self) -> float:
        return float(np.hypot(self.tilt_kx, self.tilt_ky))

    def fringe_period_samples(self, grid: Grid2D) -> float:
        return 2.0 * np.pi / self.carrier_norm / max(grid.pitch_x, grid.pitch_y)

    def check_nyquist(self, grid: Grid2D) -> None:
        period = self.fringe_period_samples(grid)
        if period < MIN_FRINGE_PERIOD_SAMPLES:
            raise NyquistException(
                f"fringe period of {period:.2f} samples is below the {MIN_FRINGE_PERIOD_SAMPLES:g}-sample minimum")

    def field(self, grid: Grid2D) -> np.ndarray:
        X, Y = grid.coordinates()
        amplitude = np.ones(grid.shape) if self.amplitude is None else np.asarray(self.amplitude, dtype=float)
        if amplitude.shape != grid.shape:
            raise NyquistException(f"reference amplitude {amplitude.shape} does not match grid {grid.shape}")
        return amplitude * np.sqrt(self.power) * np.exp(-1j * (self.tilt_kx * X + self.tilt_ky * Y))


@dataclass(frozen=True)
class CameraModel:
    """ Intensified camera in the linear regime: counts = gain * events, events with excess noise """
    gain: float = 1.0
    read_noise_std: float = 1.0
    shot_noise: bool = True
    bit_depth: int = 12
    pixel_pitch: float = 3.25
    excess_noise: float = DEFAULT_EXCESS_NOISE

    def __post_init__(self) -> None:
        if not self.gain > 0:
            raise SsmLabException(f"camera gain {self.gain} must be > 0")
        if isinstance(self.bit_depth, bool) or self.bit_depth not in range(8, 17):
            raise SsmLabException(f"camera bit_depth {self.bit_depth} must lie in 8..16")
        if self.read_noise_std < 0 or self.excess_noise < 1 or not self.pixel_pitch > 0:
            raise SsmLabException(
                f"invalid camera: read_noise_std={self.read_noise_std}, excess_noise={self.excess_noise}, "
                f"pixel_pitch={self.pixel_pitch}")

    @property
    def max_count(self) -> int:
        return 2 ** self.bit_depth - 1

    def expose(self, intensity: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        """
        Camera chain on an intensity map in events per pixel.

        Returns:
            tuple[np.ndarray, int]: uint16 counts and the number of saturated pixels.
        """
        events = np.clip(np.asarray(intensity, dtype=float), 0.0, None)
        if self.shot_noise:
            events = rng.poisson(events / self.excess_noise) * self.excess_noise
        counts = self.gain * events
        if self.read_noise_std > 0:
            counts = counts + rng.normal(0.0, self.read_noise_std, counts.shape)
        counts = np.rint(counts)
        saturated = int(np.count_nonzero(counts > self.max_count))
        return np.clip(counts, 0, self.max_count).astype(np.uint16), saturated


@dataclass(frozen=True)
class DriftModel:
    """ Interferometric drift Phi(t), Gaussian random walk with Phi(0) = 0 """
    kind: str = "random-walk"
    step_std: float = DEFAULT_DRIFT_STEP_RAD
    seed: int | tuple = 0

    def __post_init__(self) -> None:
        if self.kind != "random-walk":
            raise SsmLabException(f"unknown drift kind {self.kind!r}")
        if self.step_std < 0:
            raise SsmLabException(f"drift step_std={self.step_std} must be >= 0")

    def realize(self, n_frames: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        steps = rng.normal(0.0, self.step_std, max(n_frames - 1, 0))
        return np.concatenate([[0.0], np.cumsum(steps)])[:n_frames]


@dataclass(frozen=True, eq=False)
class CameraFrame:
    grid: Grid2D
    counts: np.ndarray
    frame_index: int = 0
    timestamp: float = 0.0
    saturated: int = 0

    def as_map(self) -> RealMap:
        return RealMap(self.grid, self.counts.astype(float), "counts")


@dataclass(frozen=True)
class KWindow:
    """ Rectangle in K-space (rad/um), inclusive bounds """
    kx_min: float
    kx_max: float
    ky_min: float
    ky_max: float

    def __post_init__(self) -> None:
        if not (self.kx_min < self.kx_max and self.ky_min < self.ky_max):
            raise FilterWindowException(f"empty K-space window {self}")

    @classmethod
    def around(cls, center_kx: float, center_ky: float, half_kx: float, half_ky: float) -> KWindow:
        return cls(center_kx - half_kx, center_kx + half_kx, center_ky - half_ky, center_ky + half_ky)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.kx_min + self.kx_max), 0.5 * (self.ky_min + self.ky_max)

    def contains(self, kx: float, ky: float) -> bool:
        return self.kx_min <= kx <= self.kx_max and self.ky_min <= ky <= self.ky_max

    def conjugate(self) -> KWindow:
        return KWindow(-self.kx_max, -self.kx_min, -self.ky_max, -self.ky_min)

    def mask(self, kgrid: Grid2D) -> np.ndarray:
        KX, KY = kgrid.coordinates()
        return (KX >= self.kx_min) & (KX <= self.kx_max) & (KY >= self.ky_min) & (KY <= self.ky_max)

    def touches_dc(self, kgrid: Grid2D) -> bool:
        """ True if DC lies inside the window grown by one spectral bin """
        return (self.kx_min - kgrid.pitch_x <= 0 <= self.kx_max + kgrid.pitch_x
                and self.ky_min - kgrid.pitch_y <= 0 <= self.ky_max + kgrid.pitch_y)


@dataclass(frozen=True, eq=False)
class AnalyticSignal:
    """
    One filtered sideband. Only the window block of the spectrum Q(K) is stored;
    the analytic signal in space is computed on first access.
    """
    grid: Grid2D
    block: np.ndarray
    window: KWindow
    rows: slice
    cols: slice

    @property
    def spectrum(self) -> np.ndarray:
        full = np.zeros(self.grid.shape, dtype=complex)
        full[self.rows, self.cols] = self.block
        return full

    def with_block(self, block: np.ndarray) -> AnalyticSignal:
        return AnalyticSignal(self.grid, block, self.window, self.rows, self.cols)

    @cached_property
    def values(self) -> np.ndarray:
        return ifft2_centered(ComplexField(self.grid.reciprocal(), self.spectrum)).values

    def amplitude(self) -> RealMap:
        return RealMap(self.grid, np.abs(self.values))

    def phase(self) -> RealMap:
        return RealMap(self.grid, np.angle(self.values), "rad")


@dataclass(frozen=True, eq=False)
class PhaseSeries:
    phases: np.ndarray
    failed: np.ndarray

    @property
    def n_failed(self) -> int:
        return int(np.count_nonzero(self.failed))


@dataclass(frozen=True, eq=False)
class ExtractedPhase:
    """ Wrapped phase map (NaN outside the ROI) and its x-averaged profile along y """
    phase: RealMap
    roi: Roi
    low_confidence: bool
    profile_y: np.ndarray
    profile: np.ndarray


@dataclass(frozen=True, eq=False)
class DecoherenceMap:
    gamma_map: RealMap
    valid: np.ndarray
    excluded_fraction: float


@dataclass(frozen=True)
class GammaFit:
    gamma: float
    gamma_err: float
    intercept: float
    intercept_err: float
    n_rows: int


@dataclass(frozen=True)
class ParabolaFit:
    """ phi(y) = k (y - y0)^2 / (2 f) + offset """
    focal_mm: float
    focal_err_mm: float
    y0_um: float
    offset_rad: float
    overlap: float
    curvature_detected: bool
    wavelength_nm: float = DEFAULT_WAVELENGTH_NM

    def model_profile(self, y: np.ndarray) -> np.ndarray:
        """ Fitted parabola without the constant offset """
        if np.isinf(self.focal_mm):
            return np.zeros_like(np.asarray(y, dtype=float))
        return wavenumber(self.wavelength_nm) * (np.asarray(y) - self.y0_um) ** 2 / (2.0 * self.focal_mm * 1e3)

    def model_map(self, grid: Grid2D) -> RealMap:
        return RealMap(grid, np.repeat(self.model_profile(grid.y)[:, None], grid.nx, axis=1), "rad")


@dataclass(frozen=True, eq=False)
class SplitReadout:
    first: list
    second: list
    separation_k: float
    windows: tuple


@dataclass(frozen=True, eq=False)
class DeltaPhiStats:
    delta: np.ndarray
    std: float
    rolling_mean: np.ndarray
    rolling_std: np.ndarray
    window: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"frame": np.arange(self.delta.size), "delta_phi": self.delta,
                             "rolling_mean": self.rolling_mean, "rolling_std": self.rolling_std})


@dataclass(eq=False)
class AnalysisResult:
    """ What a scenario retrieved; maps stay out of summary() and go to float32 files """
    phase_map: RealMap | None = None
    amplitude_map: RealMap | None = None
    global_phases: dict = field(default_factory=dict)
    focal_mm: float | None = None
    focal_err_mm: float | None = None
    gamma: float | None = None
    gamma_err: float | None = None
    fidelity: float | None = None
    efficiency: float | None = None
    delta_phi_std: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.fidelity is not None and not 0.0 <= self.fidelity <= 1.0:
            raise SsmLabException(f"fidelity {self.fidelity} outside [0, 1]")
        if self.efficiency is not None and self.efficiency < 0:
            raise SsmLabException(f"efficiency {self.efficiency} must be >= 0")

    def summary(self) -> dict:
        scalars = {name: getattr(self, name) for name in
                   ("focal_mm", "focal_err_mm", "gamma", "gamma_err", "fidelity", "efficiency", "delta_phi_std")}
        summary = {name: float(value) for name, value in scalars.items() if value is not None}
        summary.update(self.extras)
        summary["tracked_frames"] = {name: int(np.size(series)) for name, series in self.global_phases.items()}
        return summary


def interference_intensity(readout: ComplexField, ref: ReferenceBeam, drift_phase: float = 0.0) -> RealMap:
    """ |readout * exp(i Phi) + reference|^2 before the camera """
    total = readout.values * np.exp(1j * drift_phase) + ref.field(readout.grid)
    return RealMap(readout.grid, np.abs(total) ** 2, "events")


def synth_interferogram(readout: ComplexField, ref: ReferenceBeam, drift_phase: float, cam: CameraModel,
                        seed, frame_index: int = 0, timestamp: float = 0.0) -> CameraFrame:
    """
    One camera frame of the readout interfering with the tilted reference.

    Raises:
        NyquistException: Fringe period below 4 samples.
    """
    ref.check_nyquist(readout.grid)
    intensity = interference_intensity(readout, ref, drift_phase)
    counts, saturated = cam.expose(intensity.values, np.random.default_rng(seed))
    if saturated:
        logger.warning("frame %d: %d saturated pixels", frame_index, saturated)
    return CameraFrame(readout.grid, counts, frame_index, timestamp, saturated)


def _phase_table(phases, n_readouts: int) -> np.ndarray:
    phases = np.asarray(phases, dtype=float)
    if phases.ndim == 1:
        phases = phases[:, None]
    if phases.shape[1] != n_readouts:
        raise DegenerateSignalException(f"{phases.shape[1]} phase columns for {n_readouts} readouts")
    return phases


def synth_frame(readouts: Sequence[ComplexField], ref: ReferenceBeam, phases, cam: CameraModel, seed,
                index: int, frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ) -> CameraFrame:
    """ Frame `index` of a stack: readouts summed with their phases, camera stream (*seed, index) """
    phase_row = np.atleast_1d(np.asarray(phases, dtype=float))
    combined = sum(readout.values * np.exp(1j * phase) for readout, phase in zip(readouts, phase_row))
    stream = tuple(int(value) for value in np.atleast_1d(seed)) + (int(index),)
    return synth_interferogram(ComplexField(readouts[0].grid, combined), ref, 0.0, cam, stream,
                               index, index / frame_rate_hz)


def synth_stack(readouts: Sequence[ComplexField], ref: ReferenceBeam, phases: np.ndarray, cam: CameraModel,
                seed, frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ, workers: int = 1) -> list[CameraFrame]:
    """
    Frame stack of one or several readouts sharing the camera frame.

    Args:
        readouts: Readout fields on the same grid.
        ref (ReferenceBeam): Reference beam.
        phases (np.ndarray): Phase of each readout per frame, shape (n_frames,) or (n_frames, n_readouts).
        cam (CameraModel): Camera chain.
        seed: Run seed (int or tuple of ints), frame t uses the stream (*seed, t).
        frame_rate_hz (float): Sets the frame timestamps.
        workers (int): Synthesis threads; the output does not depend on it.
    """
    table = _phase_table(phases, len(readouts))
    ref.check_nyquist(readouts[0].grid)
    return _parallel_map(lambda index: synth_frame(readouts, ref, table[index], cam, seed, index, frame_rate_hz),
                         range(table.shape[0]), workers)


def _parallel_map(function, items, workers: int) -> list:
    if workers is None or workers <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, items))


def _frame_values(frame: CameraFrame | RealMap) -> tuple[Grid2D, np.ndarray]:
    if isinstance(frame, CameraFrame):
        return frame.grid, frame.counts.astype(float)
    return frame.grid, frame.values


def frame_spectrum(frame: CameraFrame | RealMap) -> ComplexField:
    grid, values = _frame_values(frame)
    return fft2_centered(ComplexField(grid, values))


def fourier_filter(frame: CameraFrame | RealMap, window: KWindow) -> AnalyticSignal:
    """
    Keeps the K-space window of the frame spectrum and zeroes everything else.

    Raises:
        FilterWindowException: Window touches DC or holds no spectral sample.
    """
    spectrum = frame_spectrum(frame)
    if window.touches_dc(spectrum.grid):
        raise FilterWindowException(f"window {window} touches the zero-frequency component")
    inside = window.mask(spectrum.grid)
    if not inside.any():
        raise FilterWindowException(f"window {window} holds no spectral sample")
    rows = np.flatnonzero(inside.any(axis=1))
    cols = np.flatnonzero(inside.any(axis=0))
    rows, cols = slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)
    grid = frame.grid
    return AnalyticSignal(grid, spectrum.values[rows, cols].copy(), window, rows, cols)


def filter_stack(frames: Sequence[CameraFrame], window: KWindow, workers: int = 1) -> list[AnalyticSignal]:
    return _parallel_map(lambda frame: fourier_filter(frame, window), frames, workers)


def default_window(frame: CameraFrame | RealMap, ref: ReferenceBeam) -> KWindow:
    """ Rectangle on the sideband peak near K0, half-widths half the sideband-to-DC distance """
    spectrum = frame_spectrum(frame)
    magnitude = np.abs(spectrum.values)
    KX, KY = spectrum.grid.coordinates()
    near = np.hypot(KX - ref.tilt_kx, KY - ref.tilt_ky) <= 0.5 * ref.carrier_norm
    peak = np.unravel_index(np.argmax(np.where(near, magnitude, -1.0)), magnitude.shape)
    center_kx, center_ky = float(KX[peak]), float(KY[peak])
    half = 0.5 * float(np.hypot(center_kx, center_ky))
    return KWindow.around(center_kx, center_ky, half, half)


def track_global_phase(stack: Sequence[AnalyticSignal], unwrap: bool = False,
                       threshold: float = TRACKING_THRESHOLD) -> PhaseSeries:
    """
    Phi(t) = arg <Q(t0)|Q(t)>, the dot product of each filtered spectrum with the first.

    Frames whose normalised overlap falls below the threshold are flagged and get NaN.

    Raises:
        DegenerateSignalException: Empty stack or a first frame without sideband.
        FilterWindowException: Frames filtered with different grids or windows.
    """
    if not stack:
        raise DegenerateSignalException("cannot track the phase of an empty stack")
    first = stack[0]
    reference_norm = np.linalg.norm(first.block)
    if reference_norm == 0:
        raise DegenerateSignalException("the first frame carries no sideband")
    phases = np.zeros(len(stack))
    failed = np.zeros(len(stack), dtype=bool)
    for index, signal in enumerate(stack):
        if signal.grid != first.grid or signal.window != first.window:
            raise FilterWindowException(f"frame {index} was filtered with another grid or window")
        overlap = np.vdot(first.block, signal.block)
        norm = reference_norm * np.linalg.norm(signal.block)
        if norm == 0 or abs(overlap) < threshold * norm:
            failed[index] = True
            phases[index] = np.nan
            logger.warning("frame %d: phase tracking failed (overlap below %.1e)", index, threshold)
            continue
        phases[index] = np.angle(overlap)
        logger.debug("frame %d: Phi=%.4f rad", index, phases[index])
    phases[0] = 0.0
    if unwrap:
        valid = ~failed
        phases[valid] = np.unwrap(phases[valid])
    return PhaseSeries(phases, failed)


def average_filtered(stack: Sequence[AnalyticSignal], phases: PhaseSeries | np.ndarray) -> AnalyticSignal:
    """ Mean of Q(K, t) exp(-i Phi(t)) over the frames with a tracked phase """
    if not stack:
        raise DegenerateSignalException("cannot average an empty stack")
    values = phases.phases if isinstance(phases, PhaseSeries) else np.asarray(phases, dtype=float)
    if values.size != len(stack):
        raise DegenerateSignalException(f"{values.size} phases for {len(stack)} frames")
    used = [(signal, phase) for signal, phase in zip(stack, values) if np.isfinite(phase)]
    if not used:
        raise DegenerateSignalException("no frame has a tracked phase")
    total = np.zeros_like(stack[0].block)
    for signal, phase in used:
        total += signal.block * np.exp(-1j * phase)
    return stack[0].with_block(total / len(used))


def readout_intensity_map(signal: AnalyticSignal) -> RealMap:
    """ h^2 = |analytic signal|^2, proportional to the readout intensity """
    return RealMap(signal.grid, np.abs(signal.values) ** 2, "intensity")


def _circular_rows(phase_map: RealMap, roi: Roi) -> tuple[np.ndarray, np.ndarray]:
    """ Rows of the ROI with at least one finite sample, and their circular mean phase """
    values = roi.crop(phase_map.values)
    y = phase_map.grid.y[roi.slices[0]]
    finite = np.isfinite(values)
    rows = finite.any(axis=1)
    phasors = np.where(finite, np.exp(1j * np.where(finite, values, 0.0)), 0.0)
    means = phasors[rows].sum(axis=1) / finite[rows].sum(axis=1)
    return y[rows], np.angle(means)


def phase_profile_y(phase_map: RealMap, roi: Roi, unwrap: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """
    x-averaged (circular mean) phase profile along y on the ROI.

    Unwrapped profiles keep the principal value at the ROI centre row.
    """
    y, profile = _circular_rows(phase_map, roi)
    if profile.size == 0:
        raise DegenerateSignalException("phase map has no finite sample in the ROI")
    if unwrap:
        wrapped = profile
        profile = np.unwrap(wrapped)
        middle = profile.size // 2
        profile = profile + 2.0 * np.pi * np.round((wrapped[middle] - profile[middle]) / (2.0 * np.pi))
    return y, profile


def extract_phase(modulated: AnalyticSignal, reference_run: AnalyticSignal, roi: Roi | None = None,
                  unwrap: bool = False) -> ExtractedPhase:
    """
    phi = arg(modulated * conj(reference_run)) in (-pi, pi], NaN outside the ROI.

    Args:
        modulated (AnalyticSignal): Averaged signal of the SSM-modulated run.
        reference_run (AnalyticSignal): Averaged signal of the run without SSM.
        roi (Roi): Region kept, the full grid by default.
        unwrap (bool): Unwrap the x-averaged profile along y.

    Returns:
        ExtractedPhase: Map, profile and the low-confidence flag.
    """
    if modulated.grid != reference_run.grid or modulated.window != reference_run.window:
        raise FilterWindowException("modulated and reference runs were filtered differently")
    grid = modulated.grid
    roi = roi or Roi.full(grid)
    phase = np.angle(modulated.values * np.conj(reference_run.values))
    phase[phase <= -np.pi] += 2.0 * np.pi
    restricted = np.full(grid.shape, np.nan)
    restricted[roi.slices] = phase[roi.slices]

    amplitude = roi.crop(np.abs(reference_run.values))
    weak = amplitude < LOW_CONFIDENCE_AMPLITUDE * amplitude.max() if amplitude.max() > 0 else np.ones_like(amplitude, bool)
    low_confidence = bool(weak.mean() > LOW_CONFIDENCE_FRACTION)
    if low_confidence:
        logger.warning("reference amplitude is weak on %.0f%% of the ROI: phase map is low-confidence",
                       100 * weak.mean())
    phase_map = RealMap(grid, restricted, "rad")
    y, profile = phase_profile_y(phase_map, roi, unwrap)
    return ExtractedPhase(phase_map, roi, low_confidence, y, profile)


def align_global_phase(phase: RealMap, phase0: RealMap, roi: Roi) -> RealMap:
    """ phase0 + wrap(phase - phase0 - offset), offset = arg<exp(i(phase - phase0))> on the ROI """
    difference = roi.crop(phase.values) - roi.crop(phase0.values)
    finite = np.isfinite(difference)
    if not finite.any():
        raise DegenerateSignalException("no finite sample to align on")
    offset = np.angle(np.exp(1j * difference[finite]).mean())
    aligned = phase0.values + np.angle(np.exp(1j * (phase.values - phase0.values - offset)))
    return RealMap(phase.grid, aligned, "rad")


def decoherence_map(h: RealMap, h0: RealMap, roi: Roi, threshold: float = DEFAULT_MASK_THRESHOLD) -> DecoherenceMap:
    """
    Gamma = log(h0 / h) / 2 on the ROI pixels where h > 0 and h0 exceeds threshold * max(h0).

    Raises:
        DecoherenceMaskException: More than 30% of the ROI excluded.
    """
    if h.grid != h0.grid:
        raise FilterWindowException("readout maps live on different grids")
    values = roi.crop(h.values)
    values0 = roi.crop(h0.values)
    valid = (values > 0) & (values0 > threshold * values0.max()) & np.isfinite(values) & np.isfinite(values0)
    excluded = 1.0 - float(valid.mean())
    if excluded > MAX_EXCLUDED_FRACTION:
        raise DecoherenceMaskException(
            f"{100 * excluded:.1f}% of the ROI excluded, above {100 * MAX_EXCLUDED_FRACTION:.0f}%")
    gamma = np.full(h.grid.shape, np.nan)
    inside = np.full(values.shape, np.nan)
    inside[valid] = 0.5 * np.log(values0[valid] / values[valid])
    gamma[roi.slices] = inside
    return DecoherenceMap(RealMap(h.grid, gamma), valid, excluded)


def fit_gamma(gamma_map: RealMap, phase_map: RealMap, roi: Roi) -> GammaFit:
    """
    Linear regression of the x-averaged Gamma against phi(y)^2, intercept allowed.

    The phase profile is the unwrapped x-average of phase_map on the ROI.
    """
    values = roi.crop(gamma_map.values)
    finite = np.isfinite(values)
    rows = finite.any(axis=1)
    gamma_rows = np.where(finite, values, 0.0).sum(axis=1)[rows] / finite.sum(axis=1)[rows]
    y_rows = gamma_map.grid.y[roi.slices[0]][rows]
    y_phase, profile = phase_profile_y(phase_map, roi, unwrap=True)
    phase_rows = np.interp(y_rows, y_phase, profile)
    squared = phase_rows ** 2
    if y_rows.size < 3 or np.ptp(squared) == 0:
        raise DegenerateSignalException("gamma fit needs at least 3 rows with distinct phases")
    regression = linregress(squared, gamma_rows)
    logger.info("gamma = %.4f +/- %.4f from %d rows", regression.slope, regression.stderr, y_rows.size)
    return GammaFit(float(regression.slope), float(regression.stderr), float(regression.intercept),
                    float(regression.intercept_stderr), int(y_rows.size))


def fit_parabola_phase(phase_map: RealMap, wavelength_nm: float = DEFAULT_WAVELENGTH_NM, roi: Roi | None = None,
                       f_max_mm: float = NO_CURVATURE_FOCAL_MM) -> ParabolaFit:
    """
    Fits phi(x, y) = k (y - y0)^2 / (2 f) + c by maximising |<exp(i phi_meas - i phi_model)>|.

    Args:
        phase_map (RealMap): Wrapped phase, NaN samples ignored.
        wavelength_nm (float): Sets k.
        roi (Roi): Region used, the full grid by default.
        f_max_mm (float): Beyond this |f| the map is reported as flat.

    Returns:
        ParabolaFit: Focal length (inf when no curvature is detected), vertex, offset.

    Raises:
        ParabolaFitFailureException: Nelder-Mead did not converge.
    """
    grid = phase_map.grid
    roi = roi or Roi.full(grid)
    k = wavenumber(wavelength_nm)
    values = roi.crop(phase_map.values)
    Y = np.repeat(grid.y[roi.slices[0]][:, None], values.shape[1], axis=1)
    finite = np.isfinite(values)
    if not finite.any():
        raise DegenerateSignalException("phase map has no finite sample in the ROI")
    phasors = np.exp(1j * values[finite])
    y = Y[finite]

    # q is 1/f in 1/m, v is y0 in units of 10 um
    def model(params):
        q, v = params
        return 0.5 * k * q * 1e-6 * (y - 10.0 * v) ** 2

    def loss(params):
        return -abs(np.mean(phasors * np.exp(-1j * model(params))))

    y_rows, profile = phase_profile_y(phase_map, roi, unwrap=True)
    if y_rows.size >= 3:
        a, b, _ = np.polyfit(y_rows, profile, 2)
    else:
        a, b = 0.0, 0.0
    q0 = 2.0 * a / (k * 1e-6)
    y_start = float(np.clip(-b / (2.0 * a), y_rows.min(), y_rows.max())) if a != 0 else 0.0
    start = np.array([q0, y_start / 10.0])
    simplex = np.array([start, start + [max(0.1 * abs(q0), 0.5), 0.0], start + [0.0, 1.0]])
    result = minimize(loss, start, method="Nelder-Mead",
                      options={"initial_simplex": simplex, "xatol": 1e-8, "fatol": 1e-12, "maxiter": 4000})
    if not result.success:
        raise ParabolaFitFailureException(
            f"parabola fit failed after {result.nit} iterations: {result.message} (last q={result.x[0]:.4g} 1/m)")

    q, v = result.x
    fitted = model(result.x)
    mean = np.mean(phasors * np.exp(-1j * fitted))
    offset = float(np.angle(mean))
    residual = np.angle(phasors * np.exp(-1j * (fitted + offset)))
    design = 0.5 * k * 1e-6 * (y - 10.0 * v) ** 2
    spread = np.sum((design - design.mean()) ** 2)
    q_err = float(np.std(residual) / np.sqrt(spread)) if spread > 0 else np.inf

    focal = 1e3 / q if q != 0 else np.inf
    detected = bool(np.isfinite(focal) and abs(focal) <= f_max_mm)
    if not detected:
        logger.info("no curvature detected (|f| above %.0f mm)", f_max_mm)
        focal, focal_err = np.inf, np.inf
    else:
        focal_err = 1e3 * q_err / q ** 2
    return ParabolaFit(float(focal), float(focal_err), float(10.0 * v), offset, float(abs(mean)), detected,
                       wavelength_nm)


def summarize_focal_fits(fits: Sequence[ParabolaFit]) -> tuple[float, float]:
    """ Mean focal length and run-to-run standard deviation """
    focal = np.array([fit.focal_mm for fit in fits], dtype=float)
    if focal.size == 0 or not np.all(np.isfinite(focal)):
        raise DegenerateSignalException("focal summary needs finite focal lengths")
    return float(focal.mean()), float(focal.std(ddof=1)) if focal.size > 1 else 0.0


def split_readout_separate(frames: Sequence[CameraFrame], ref: ReferenceBeam, boundary_k: float,
                           axis: str = "ky", workers: int = 1) -> SplitReadout:
    """
    Splits the frames of two sequential readouts into two filtered stacks.

    The first readout sits on K0, the second is shifted along `axis` past boundary_k.
    Each window spans twice the carrier-to-boundary distance along the axis.

    Raises:
        SidebandOverlapException: A sideband peak within 2 bins of the boundary.
        FilterWindowException: Boundary on the wrong side of K0, or a window touching DC.
    """
    if axis not in ("kx", "ky") or not frames:
        raise FilterWindowException(f"invalid split request: axis={axis!r}, {len(frames)} frames")
    spectrum = frame_spectrum(frames[0])
    kgrid = spectrum.grid
    along = 1 if axis == "ky" else 0
    carrier = ref.carrier
    half = boundary_k - carrier[along]
    if half <= 0:
        raise FilterWindowException(f"boundary {boundary_k:.4f} rad/um must lie beyond the carrier {carrier[along]:.4f}")
    across_half = 0.5 * ref.carrier_norm
    below = boundary_k - 2.0 * half, np.nextafter(boundary_k, -np.inf)
    above = boundary_k, boundary_k + 2.0 * half
    across = carrier[1 - along] - across_half, carrier[1 - along] + across_half
    if axis == "ky":
        windows = (KWindow(*across, *below), KWindow(*across, *above))
    else:
        windows = (KWindow(*below, *across), KWindow(*above, *across))

    magnitude = np.abs(spectrum.values)
    coordinates = kgrid.coordinates()[along]
    pitch = (kgrid.pitch_x, kgrid.pitch_y)[along]
    peaks = []
    for window in windows:
        inside = window.mask(kgrid)
        peaks.append(float(coordinates.ravel()[np.argmax(np.where(inside, magnitude, -1.0))]))
    separation = peaks[1] - peaks[0]
    clearance = min(abs(peak - boundary_k) for peak in peaks) / pitch
    if clearance < MIN_SIDEBAND_CLEARANCE_BINS:
        raise SidebandOverlapException(
            f"sidebands overlap: measured separation {separation:.4f} rad/um, "
            f"a peak lies {clearance:.1f} bins from the boundary")
    logger.info("split readout: sidebands %.4f rad/um apart along %s", separation, axis)
    first = filter_stack(frames, windows[0], workers)
    second = filter_stack(frames, windows[1], workers)
    return SplitReadout(first, second, separation, windows)


def delta_phi_stats(phi1, phi2, window: int = DEFAULT_ROLLING_WINDOW) -> DeltaPhiStats:
    """ Unwrapped Phi1 - Phi2, its standard deviation and rolling statistics """
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    if phi1.shape != phi2.shape:
        raise DegenerateSignalException(f"phase series lengths differ: {phi1.size} vs {phi2.size}")
    if phi1.size < 2:
        raise DegenerateSignalException("phase statistics need at least 2 frames")
    delta = np.unwrap(phi1 - phi2)
    series = pd.Series(delta)
    rolling = series.rolling(window, min_periods=min(window, delta.size))
    return DeltaPhiStats(delta, float(np.std(delta, ddof=1)), rolling.mean().to_numpy(),
                         rolling.std().to_numpy(), window)


def write_frame_stack(frames: Sequence[CameraFrame], directory: str | Path, manifest: dict) -> Path:
    """ frame_%06d.u16 rasters (little-endian) plus manifest.json """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for frame in frames:
        frame.counts.astype("<u2").tofile(directory / FRAME_PATTERN.format(frame.frame_index))
    grid = frames[0].grid
    content = {**manifest, "nx": grid.nx, "ny": grid.ny, "pitch_um": grid.pitch_x, "n_frames": len(frames),
               "frames": [{"index": frame.frame_index, "timestamp": frame.timestamp} for frame in frames]}
    (directory / MANIFEST_NAME).write_text(json.dumps(content, sort_keys=True, indent=2), encoding="utf-8")
    return directory


def read_frame_stack(directory: str | Path) -> tuple[list[CameraFrame], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    grid = Grid2D(manifest["nx"], manifest["ny"], manifest["pitch_um"], manifest["pitch_um"])
    frames = []
    for entry in manifest["frames"]:
        counts = np.fromfile(directory / FRAME_PATTERN.format(entry["index"]), dtype="<u2").reshape(grid.shape)
        frames.append(CameraFrame(grid, counts.astype(np.uint16), entry["index"], entry["timestamp"]))
    return frames, manifest
