"""
This file contains the spatial spin-wave modulator (SSM) model: the target phase
profiles, the intensity <-> phase calibration, the longitudinal intensity noise and
the closed-form decoherence law it leads to.

    Includes: PhaseProfile1D, SsmNoiseModel, SsmPulse, IntensityProfile,
    IntensityRealization and MonteCarloAmplitude classes.

Intensities are in arbitrary units: only the products alpha * T * I (rad) matter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from field_core import Grid2D, SsmLabException, wavenumber

logger = logging.getLogger(__name__)

DEFAULT_WAVELENGTH_NM = 780.0
DEFAULT_ALPHA = 1.0
DEFAULT_SIGMA_REL = 0.06
DEFAULT_CORR_LENGTH_UM = 37.0
DEFAULT_ENSEMBLE_LENGTH_UM = 10_000.0
DEFAULT_SLICES = 256
MIN_SLICES = 16
MAX_CLIPPED_FRACTION = 0.01
MIN_MC_SAMPLES = 1000
DEFAULT_MC_SAMPLES = 100_000


class InvalidProfileException(SsmLabException):
    """ Raised whenever a phase profile or its generator parameters are unusable """
    pass


class InvalidPulseException(SsmLabException):
    """ Raised whenever an SSM pulse cannot imprint the requested profile """
    pass


class NoiseClippingException(SsmLabException):
    """ Raised whenever too many noisy intensity samples had to be clipped at zero """
    pass


@dataclass(frozen=True, eq=False)
class PhaseProfile1D:
    """ Phase phi(y) in rad along the y axis of a grid """
    y: np.ndarray
    phase: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float)
        phase = np.asarray(self.phase, dtype=float)
        if y.ndim != 1 or y.shape != phase.shape:
            raise InvalidProfileException(f"profile axis {y.shape} and values {phase.shape} differ")
        if not np.all(np.isfinite(phase)):
            raise InvalidProfileException("phase profile holds non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "phase", phase)

    def __len__(self) -> int:
        return self.y.size

    def scaled(self, factor: float) -> PhaseProfile1D:
        return PhaseProfile1D(self.y, factor * self.phase)

    def as_map(self, grid: Grid2D) -> np.ndarray:
        """ Broadcasts the profile over x, shape (ny, nx) """
        if len(self) != grid.ny:
            raise InvalidProfileException(f"profile has {len(self)} samples, grid has ny={grid.ny}")
        return np.repeat(self.phase[:, None], grid.nx, axis=1)


def lens_phase(grid: Grid2D, focal_f_mm: float, wavelength_nm: float = DEFAULT_WAVELENGTH_NM) -> PhaseProfile1D:
    """
    Cylindrical lens profile phi(y) = k y^2 / (2 f).

    Args:
        grid (Grid2D): Grid providing the y axis (um).
        focal_f_mm (float): Focal length, positive converging, infinite for a flat profile.
        wavelength_nm (float): Optical wavelength.

    Raises:
        InvalidProfileException: f = 0 or NaN.
    """
    if focal_f_mm == 0 or np.isnan(focal_f_mm):
        raise InvalidProfileException(f"focal length {focal_f_mm} mm is not a lens")
    y = grid.y
    if np.isinf(focal_f_mm):
        return PhaseProfile1D(y, np.zeros_like(y))
    return PhaseProfile1D(y, wavenumber(wavelength_nm) * y ** 2 / (2.0 * focal_f_mm * 1e3))


def step_phase(grid: Grid2D, y0: float, height: float, edge_width: float = 0.0) -> PhaseProfile1D:
    """ Phase step of the given height at y0, logistic edge of width edge_width (um) """
    if edge_width < 0 or not np.isfinite(height):
        raise InvalidProfileException(f"invalid step: height={height}, edge_width={edge_width}")
    y = grid.y
    if edge_width == 0:
        shape = np.heaviside(y - y0, 0.5)
    else:
        shape = expit((y - y0) / edge_width)
    return PhaseProfile1D(y, height * shape)


def sawtooth_phase(grid: Grid2D, gradient: float, wrap: float = 2.0 * np.pi) -> PhaseProfile1D:
    """ Blazed ramp (gradient * y) mod wrap; wrap = inf keeps the bare ramp """
    if not wrap > 0 or not np.isfinite(gradient):
        raise InvalidProfileException(f"invalid saw-tooth: gradient={gradient}, wrap={wrap}")
    ramp = gradient * grid.y
    if np.isinf(wrap):
        return PhaseProfile1D(grid.y, ramp)
    return PhaseProfile1D(grid.y, np.mod(ramp, wrap))


@dataclass(frozen=True)
class SsmNoiseModel:
    """ White Gaussian intensity noise along z, constant within cells of corr_length """
    sigma_rel: float = DEFAULT_SIGMA_REL
    corr_length: float = DEFAULT_CORR_LENGTH_UM
    ensemble_length_L: float = DEFAULT_ENSEMBLE_LENGTH_UM

    def __post_init__(self) -> None:
        if self.sigma_rel < 0:
            raise InvalidPulseException(f"sigma_rel={self.sigma_rel} must be >= 0")
        if not 0 < self.corr_length < self.ensemble_length_L:
            raise InvalidPulseException(
                f"correlation length {self.corr_length} um must lie in (0, L={self.ensemble_length_L} um)")

    @property
    def n_cells(self) -> int:
        return max(1, int(round(self.ensemble_length_L / self.corr_length)))


@dataclass(frozen=True)
class SsmPulse:
    target_profile: PhaseProfile1D
    alpha: float = DEFAULT_ALPHA
    duration_T: float = 1.0
    detuning_sign: int = 1
    noise: SsmNoiseModel = field(default_factory=SsmNoiseModel)

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise InvalidPulseException(f"alpha={self.alpha} must be > 0")
        if self.duration_T < 0:
            raise InvalidPulseException(f"duration_T={self.duration_T} must be >= 0")
        if self.detuning_sign not in (1, -1):
            raise InvalidPulseException(f"detuning_sign={self.detuning_sign} must be +1 or -1")

    @property
    def phase_per_intensity(self) -> float:
        """ sign * alpha * T, rad per intensity unit """
        return self.detuning_sign * self.alpha * self.duration_T


def detuning_sign_for(profile: PhaseProfile1D, preferred: int = 1) -> int:
    """
    Detuning sign imprinting a single-signed profile without a constant offset:
    +1 for phi >= 0 (converging lens), -1 for phi <= 0 (diverging lens).
    Profiles of both signs keep the preferred sign.
    """
    phase = profile.phase
    if np.all(phase >= 0) and np.any(phase > 0):
        return 1
    if np.all(phase <= 0) and np.any(phase < 0):
        return -1
    return preferred


@dataclass(frozen=True, eq=False)
class IntensityProfile:
    """ Noiseless SSM intensity I0(y) and the constant phase offset it implies """
    y: np.ndarray
    intensity: np.ndarray
    phase_offset: float = 0.0


@dataclass(frozen=True, eq=False)
class IntensityRealization:
    """ Noisy intensity I(y, z) of shape (ny, Nz) after clipping """
    y: np.ndarray
    intensity: np.ndarray
    seed: object
    clipped: int = 0
    clipped_fraction: float = 0.0

    @property
    def n_slices(self) -> int:
        return self.intensity.shape[1]


@dataclass(frozen=True)
class MonteCarloAmplitude:
    amplitude: float
    std_error: float
    n_samples: int


def phase_to_intensity(profile: PhaseProfile1D, pulse: SsmPulse) -> IntensityProfile:
    """
    Intensity that imprints the profile, after adding the minimal constant offset c
    with sign * (phi + c) >= 0 everywhere.

    Raises:
        InvalidPulseException: Zero duration with a nonzero profile.
    """
    phase = profile.phase
    sign = pulse.detuning_sign
    offset = max(0.0, -float(phase.min())) if sign > 0 else min(0.0, -float(phase.max()))
    if pulse.duration_T == 0:
        if np.any(phase != 0):
            raise InvalidPulseException("a zero-duration pulse cannot imprint a nonzero profile")
        return IntensityProfile(profile.y, np.zeros_like(phase), 0.0)
    intensity = np.maximum((phase + offset) / pulse.phase_per_intensity, 0.0)
    if offset:
        logger.debug("constant phase offset %.4f rad added to keep the SSM intensity non-negative", offset)
    return IntensityProfile(profile.y, intensity, offset)


def intensity_to_phase(intensity: IntensityProfile | np.ndarray, pulse: SsmPulse) -> np.ndarray:
    """ phi = sign * alpha * T * I, works on I0(y) as well as on I(y, z) """
    values = intensity.intensity if isinstance(intensity, (IntensityProfile, IntensityRealization)) else intensity
    return pulse.phase_per_intensity * np.asarray(values, dtype=float)


def realize_noise(i0: IntensityProfile, noise: SsmNoiseModel, nz: int = DEFAULT_SLICES,
                  seed=0) -> IntensityRealization:
    """
    Draws I(y, z) = I0(y) * (1 + sigma_rel * xi), xi ~ N(0, 1) independent per y line
    and per correlation cell, cells resampled onto nz slices.

    Args:
        i0 (IntensityProfile): Noiseless profile.
        noise (SsmNoiseModel): Noise statistics.
        nz (int): Number of longitudinal slices (>= 16).
        seed: Anything numpy.random.default_rng accepts; mandatory.

    Returns:
        IntensityRealization: Clipped realization and clipping counts.

    Raises:
        InvalidProfileException: Too few slices or no seed.
        NoiseClippingException: More than 1% of the samples were negative.
    """
    if nz < MIN_SLICES:
        raise InvalidProfileException(f"Nz={nz} must be >= {MIN_SLICES}")
    if seed is None:
        raise InvalidProfileException("a seed is required for a reproducible realization")
    base = np.asarray(i0.intensity, dtype=float)
    n_cells = noise.n_cells
    if nz < n_cells:
        logger.warning("%d slices for %d independent noise cells: noise is under-resolved", nz, n_cells)

    rng = np.random.default_rng(seed)
    cells = rng.standard_normal((base.size, n_cells))
    cell_of_slice = np.minimum(((np.arange(nz) + 0.5) * n_cells / nz).astype(int), n_cells - 1)
    intensity = base[:, None] * (1.0 + noise.sigma_rel * cells[:, cell_of_slice])

    negative = intensity < 0
    clipped = int(negative.sum())
    fraction = clipped / intensity.size
    if clipped:
        intensity[negative] = 0.0
        logger.warning("clipped %d negative intensity samples (%.3f%%)", clipped, 100 * fraction)
    if fraction > MAX_CLIPPED_FRACTION:
        raise NoiseClippingException(
            f"{100 * fraction:.2f}% of the intensity samples were negative, "
            f"above the {100 * MAX_CLIPPED_FRACTION:.0f}% the Gaussian model tolerates")
    return IntensityRealization(np.asarray(i0.y, dtype=float), intensity, seed, clipped, fraction)


def decoherence_envelope(phi, gamma: float):
    """ Amplitude factor exp(-gamma * phi^2) """
    if gamma < 0:
        raise InvalidPulseException(f"gamma={gamma} must be >= 0")
    return np.exp(-gamma * np.square(phi))


def gamma_from_sigma_rel(sigma_rel: float) -> float:
    return 0.5 * sigma_rel ** 2


def sigma_rel_from_gamma(gamma: float) -> float:
    return float(np.sqrt(2.0 * gamma))


def mc_decoherence_amplitude(alpha_t_sigma: float, n_samples: int = DEFAULT_MC_SAMPLES,
                             seed=0) -> MonteCarloAmplitude:
    """
    Monte-Carlo estimate of |<exp(i alpha T dI)>| for Gaussian dI of std sigma.

    The standard error is that of the phasors projected on the direction of their mean.
    """
    if n_samples < MIN_MC_SAMPLES:
        raise InvalidPulseException(f"n_samples={n_samples} must be >= {MIN_MC_SAMPLES}")
    rng = np.random.default_rng(seed)
    phasors = np.exp(1j * alpha_t_sigma * rng.standard_normal(n_samples))
    mean = phasors.mean()
    amplitude = float(abs(mean))
    direction = mean / amplitude if amplitude > 0 else 1.0
    projected = (phasors * np.conj(direction)).real
    std_error = float(projected.std(ddof=1) / np.sqrt(n_samples))
    return MonteCarloAmplitude(amplitude, std_error, n_samples)
