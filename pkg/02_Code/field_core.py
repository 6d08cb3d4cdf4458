"""
This file contains the sampling core of the SSM lab: grids, real and complex maps,
centered Fourier transforms, Gaussian fits and the scalar figures of merit.

    Includes: Grid2D, ComplexField, RealMap, GaussianFit1D, GaussianFit2D and Roi classes.

Fourier convention: fft2_centered is unitary (numpy norm="ortho", 1/sqrt(N) per axis),
so sum(|field|^2) == sum(|spectrum|^2) sample by sample, and the DC component sits at
index (ny // 2, nx // 2).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

logger = logging.getLogger(__name__)

# Sampling constants
DEFAULT_GRID_SIZE = 512
DEFAULT_PITCH_UM = 3.25  # effective camera pixel pitch at the ensemble
MIN_GRID_SIZE = 8

# Fit constants
GAUSSIAN_FIT_MAX_ITERATIONS = 200
PEAK_TO_MEDIAN_MIN = 5.0
MOMENT_THRESHOLD = 0.2
DEFAULT_ROI_SIGMAS = 2.0

MAP_KINDS = ("real", "complex")


class SsmLabException(Exception):
    """ Base class of every error raised by the SSM lab """
    pass


class InvalidGridException(SsmLabException):
    """ Raised whenever a grid breaks the even-sized, positive-pitch sampling convention """
    pass


class InvalidMapException(SsmLabException):
    """ Raised whenever a map does not match its grid or holds unusable values """
    pass


class FitFailureException(SsmLabException):
    """ Raised whenever a least-squares fit cannot produce a result """

    def __init__(self, message: str, best_parameters=None) -> None:
        super().__init__(message)
        self.best_parameters = best_parameters


class UndefinedFidelityException(SsmLabException):
    """ Raised whenever the overlap fidelity has no positive sample to normalise with """
    pass


class EfficiencyException(SsmLabException):
    """ Raised whenever the unaltered readout carries no energy """
    pass


def wavenumber(wavelength_nm: float) -> float:
    """ Returns k = 2*pi/lambda in rad/um """
    return 2.0 * np.pi / (wavelength_nm * 1e-3)


@dataclass(frozen=True)
class Grid2D:
    """
    Uniform transverse sampling grid centered at the origin.

    Sample index (ny // 2, nx // 2) maps to x = y = 0. Arrays living on the grid
    have shape (ny, nx): rows follow y, columns follow x.
    """
    nx: int = DEFAULT_GRID_SIZE
    ny: int = DEFAULT_GRID_SIZE
    pitch_x: float = DEFAULT_PITCH_UM
    pitch_y: float = DEFAULT_PITCH_UM
    units: str = "um"

    def __post_init__(self) -> None:
        for name, count in (("nx", self.nx), ("ny", self.ny)):
            if isinstance(count, bool) or int(count) != count or count < MIN_GRID_SIZE or count % 2:
                raise InvalidGridException(f"{name}={count} must be an even integer >= {MIN_GRID_SIZE}")
        for name, pitch in (("pitch_x", self.pitch_x), ("pitch_y", self.pitch_y)):
            if not np.isfinite(pitch) or pitch <= 0:
                raise InvalidGridException(f"{name}={pitch} must be a positive length per sample")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ny, self.nx

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.nx) - self.nx // 2) * self.pitch_x

    @property
    def y(self) -> np.ndarray:
        return (np.arange(self.ny) - self.ny // 2) * self.pitch_y

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """ Returns the (X, Y) coordinate arrays, each of shape (ny, nx) """
        return np.meshgrid(self.x, self.y)

    def contains(self, x: float, y: float) -> bool:
        """ Checks if a point lies inside the sampled extent """
        return self.x[0] <= x <= self.x[-1] and self.y[0] <= y <= self.y[-1]

    def index_of(self, x: float, y: float) -> tuple[int, int]:
        """ Returns the (row, col) of the sample nearest to (x, y), not clamped """
        row = int(np.floor(y / self.pitch_y + 0.5)) + self.ny // 2
        col = int(np.floor(x / self.pitch_x + 0.5)) + self.nx // 2
        return row, col

    def reciprocal(self) -> Grid2D:
        """ Returns the spectral grid of the centered FFT (pitch 2*pi / (n * pitch)) """
        units = "um" if self.units == "rad/um" else "rad/um"
        return Grid2D(self.nx, self.ny,
                      2.0 * np.pi / (self.nx * self.pitch_x),
                      2.0 * np.pi / (self.ny * self.pitch_y),
                      units)


@dataclass(frozen=True, eq=False)
class ComplexField:
    """ Complex amplitude sampled on a Grid2D (readout beams, spin-wave envelopes, spectra) """
    grid: Grid2D
    values: np.ndarray
    units: str = "a.u."

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=complex)
        if values.shape != self.grid.shape:
            raise InvalidMapException(f"field shape {values.shape} does not match grid shape {self.grid.shape}")
        object.__setattr__(self, "values", values)

    def intensity(self) -> RealMap:
        return RealMap(self.grid, np.abs(self.values) ** 2, "intensity")

    def phase(self) -> RealMap:
        return RealMap(self.grid, np.angle(self.values), "rad")

    def total_intensity(self) -> float:
        """ Returns sum(|values|^2) * pitch_x * pitch_y """
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.pitch_x * self.grid.pitch_y)

    def with_values(self, values: np.ndarray) -> ComplexField:
        return ComplexField(self.grid, values, self.units)


@dataclass(frozen=True, eq=False)
class RealMap:
    """ Real scalar map on a Grid2D (intensities, phases in rad, decoherence factors) """
    grid: Grid2D
    values: np.ndarray
    units: str = "a.u."

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise InvalidMapException(f"map shape {values.shape} does not match grid shape {self.grid.shape}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class Roi:
    """ Rectangular region of interest, inclusive index bounds """
    row_start: int
    row_stop: int
    col_start: int
    col_stop: int

    @classmethod
    def full(cls, grid: Grid2D) -> Roi:
        return cls(0, grid.ny - 1, 0, grid.nx - 1)

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.row_start, self.row_stop + 1), slice(self.col_start, self.col_stop + 1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.row_stop - self.row_start + 1, self.col_stop - self.col_start + 1

    def crop(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[self.slices]

    def mask(self, grid: Grid2D) -> np.ndarray:
        """ Returns a boolean array on the grid, True inside the ROI """
        inside = np.zeros(grid.shape, dtype=bool)
        inside[self.slices] = True
        return inside


@dataclass(frozen=True)
class GaussianFit1D:
    amplitude: float
    center: float
    sigma: float
    offset: float
    residual_rms: float = 0.0


@dataclass(frozen=True)
class GaussianFit2D:
    """ amplitude * exp(-(x-x0)^2/(2 sigma_x^2) - (y-y0)^2/(2 sigma_y^2)) + offset """
    amplitude: float
    x0: float
    y0: float
    sigma_x: float
    sigma_y: float
    offset: float
    residual_rms: float = 0.0

    def __post_init__(self) -> None:
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise InvalidMapException(f"Gaussian widths must be positive, got {self.sigma_x}, {self.sigma_y}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x0, self.y0

    def evaluate(self, grid: Grid2D) -> RealMap:
        """ Regenerates the fitted surface on a grid """
        X, Y = grid.coordinates()
        return RealMap(grid, _gaussian_2d(X, Y, self.amplitude, self.x0, self.y0,
                                          self.sigma_x, self.sigma_y, self.offset))


def _gaussian_2d(X, Y, amplitude, x0, y0, sigma_x, sigma_y, offset):
    return amplitude * np.exp(-(X - x0) ** 2 / (2 * sigma_x ** 2) - (Y - y0) ** 2 / (2 * sigma_y ** 2)) + offset


def _gaussian_1d(axis, amplitude, center, sigma, offset):
    return amplitude * np.exp(-(axis - center) ** 2 / (2 * sigma ** 2)) + offset


def _require_single_lobe(values: np.ndarray) -> tuple[float, float]:
    """ Returns (peak, median) or raises if the map has no dominant lobe """
    if values.size == 0 or not np.all(np.isfinite(values)):
        raise FitFailureException("map is empty or holds non-finite samples")
    peak = float(values.max())
    median = float(np.median(values))
    if peak <= 0 or peak < PEAK_TO_MEDIAN_MIN * max(median, 0.0):
        raise FitFailureException(
            f"no dominant lobe: peak {peak:.4g} is below {PEAK_TO_MEDIAN_MIN}x the median {median:.4g}")
    return peak, median


def _moment_weights(values: np.ndarray, peak: float, background: float) -> np.ndarray:
    weights = values - background
    return np.where(weights > MOMENT_THRESHOLD * (peak - background), weights, 0.0)


def _run_least_squares(residuals, p0, lower, upper):
    result = least_squares(residuals, p0, bounds=(lower, upper), method="trf", x_scale="jac",
                           ftol=1e-10, xtol=1e-10, gtol=1e-10,
                           max_nfev=GAUSSIAN_FIT_MAX_ITERATIONS)
    if result.status <= 0:
        raise FitFailureException(f"Gaussian fit did not converge: {result.message}", result.x)
    return result


def fit_gaussian_2d(intensity_map: RealMap) -> GaussianFit2D:
    """
    Least-squares fit of a 2D Gaussian plus offset, initialised from moments.

    Args:
        intensity_map (RealMap): Map with a single dominant lobe (peak >= 5x median).

    Returns:
        GaussianFit2D: Fitted parameters and the residual RMS.

    Raises:
        FitFailureException: Degenerate map or no convergence within 200 iterations.
    """
    grid = intensity_map.grid
    values = intensity_map.values
    peak, median = _require_single_lobe(values)
    X, Y = grid.coordinates()

    weights = _moment_weights(values, peak, median)
    total = weights.sum()
    x0 = float((weights * X).sum() / total)
    y0 = float((weights * Y).sum() / total)
    sigma_x = max(float(np.sqrt((weights * (X - x0) ** 2).sum() / total)), grid.pitch_x)
    sigma_y = max(float(np.sqrt((weights * (Y - y0) ** 2).sum() / total)), grid.pitch_y)

    x, y, data = X.ravel(), Y.ravel(), values.ravel()

    def residuals(p):
        return _gaussian_2d(x, y, *p) - data

    p0 = [peak - median, x0, y0, sigma_x, sigma_y, median]
    min_sigma = 1e-3 * min(grid.pitch_x, grid.pitch_y)
    lower = [-np.inf, -np.inf, -np.inf, min_sigma, min_sigma, -np.inf]
    upper = [np.inf] * 6
    result = _run_least_squares(residuals, p0, lower, upper)
    amplitude, x0, y0, sigma_x, sigma_y, offset = result.x
    rms = float(np.sqrt(np.mean(result.fun ** 2)))
    logger.debug("2D Gaussian fit: sigma=(%.4g, %.4g) after %d evaluations", sigma_x, sigma_y, result.nfev)
    return GaussianFit2D(float(amplitude), float(x0), float(y0), float(sigma_x), float(sigma_y),
                         float(offset), rms)


def fit_gaussian_1d(axis: np.ndarray, profile: np.ndarray) -> GaussianFit1D:
    """ 1D companion of fit_gaussian_2d, same preconditions and iteration bound """
    axis = np.asarray(axis, dtype=float)
    profile = np.asarray(profile, dtype=float)
    peak, median = _require_single_lobe(profile)
    weights = _moment_weights(profile, peak, median)
    center = float((weights * axis).sum() / weights.sum())
    pitch = float(abs(axis[1] - axis[0]))
    sigma = max(float(np.sqrt((weights * (axis - center) ** 2).sum() / weights.sum())), pitch)

    def residuals(p):
        return _gaussian_1d(axis, *p) - profile

    result = _run_least_squares(residuals, [peak - median, center, sigma, median],
                                [-np.inf, -np.inf, 1e-3 * pitch, -np.inf], [np.inf] * 4)
    amplitude, center, sigma, offset = result.x
    rms = float(np.sqrt(np.mean(result.fun ** 2)))
    return GaussianFit1D(float(amplitude), float(center), float(sigma), float(offset), rms)


def gaussian_field(grid: Grid2D, waist_x: float, waist_y: float,
                   center: tuple[float, float] = (0.0, 0.0)) -> ComplexField:
    """
    Real positive Gaussian amplitude exp(-(x-x0)^2/wx^2 - (y-y0)^2/wy^2), peak 1 at center.

    Raises:
        InvalidMapException: Non-positive waist or center outside the grid.
    """
    if not (waist_x > 0 and waist_y > 0):
        raise InvalidMapException(f"waists must be positive, got ({waist_x}, {waist_y})")
    x0, y0 = center
    if not grid.contains(x0, y0):
        raise InvalidMapException(f"center ({x0}, {y0}) lies outside the grid extent")
    X, Y = grid.coordinates()
    values = np.exp(-((X - x0) / waist_x) ** 2 - ((Y - y0) / waist_y) ** 2)
    return ComplexField(grid, values.astype(complex))


def fft2_centered(field: ComplexField) -> ComplexField:
    """ Unitary centered 2D FFT; the result lives on field.grid.reciprocal() """
    spectrum = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(field.values), norm="ortho"))
    return ComplexField(field.grid.reciprocal(), spectrum, field.units)


def ifft2_centered(spectrum: ComplexField) -> ComplexField:
    """ Inverse of fft2_centered """
    values = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(spectrum.values), norm="ortho"))
    return ComplexField(spectrum.grid.reciprocal(), values, spectrum.units)


def roi_from_readout(readout_intensity: RealMap, n_sigma: float = DEFAULT_ROI_SIGMAS) -> Roi:
    """
    Minimal rectangle bounding n_sigma standard deviations of a Gaussian fitted to
    the readout image, clamped to the grid.

    Raises:
        FitFailureException: Propagated from fit_gaussian_2d.
    """
    if n_sigma < 0:
        raise InvalidMapException(f"n_sigma={n_sigma} must be >= 0")
    grid = readout_intensity.grid
    fit = fit_gaussian_2d(readout_intensity)
    center_col = fit.x0 / grid.pitch_x + grid.nx // 2
    center_row = fit.y0 / grid.pitch_y + grid.ny // 2
    half_cols = n_sigma * fit.sigma_x / grid.pitch_x
    half_rows = n_sigma * fit.sigma_y / grid.pitch_y

    def bound(value, count):
        return int(np.clip(np.floor(value + 0.5), 0, count - 1))

    roi = Roi(bound(center_row - half_rows, grid.ny), bound(center_row + half_rows, grid.ny),
              bound(center_col - half_cols, grid.nx), bound(center_col + half_cols, grid.nx))
    logger.debug("ROI %s from Gaussian sigma=(%.4g, %.4g)", roi, fit.sigma_x, fit.sigma_y)
    return roi


def _require_same_grid(first, second) -> None:
    if first.grid != second.grid:
        raise InvalidMapException(f"maps live on different grids: {first.grid} vs {second.grid}")


def overlap_fidelity(intensity: RealMap, intensity0: RealMap, roi: Roi) -> float:
    """
    Normalised scalar product of amplitude maps, <sqrt(I*I0)> / sqrt(<I><I0>), on the ROI.

    Args:
        intensity (RealMap): Observed intensity I.
        intensity0 (RealMap): Reference intensity I0.
        roi (Roi): Region the averages run over.

    Returns:
        float: Fidelity in [0, 1].

    Raises:
        InvalidMapException: Grids differ or a map holds negative samples.
        UndefinedFidelityException: A map has no positive sample in the ROI.
    """
    _require_same_grid(intensity, intensity0)
    i = roi.crop(intensity.values)
    i0 = roi.crop(intensity0.values)
    if np.any(i < 0) or np.any(i0 < 0):
        raise InvalidMapException("intensity maps must be non-negative")
    if not np.any(i > 0) or not np.any(i0 > 0):
        raise UndefinedFidelityException("fidelity is undefined for an all-zero map")
    value = np.mean(np.sqrt(i * i0)) / np.sqrt(np.mean(i) * np.mean(i0))
    return float(min(value, 1.0))


def phase_fidelity(phase: RealMap, phase0: RealMap, roi: Roi) -> float:
    """ Fidelity of phase maps: the amplitude fidelity with A -> phi, i.e. I -> phi^2 """
    return overlap_fidelity(RealMap(phase.grid, np.square(phase.values)),
                            RealMap(phase0.grid, np.square(phase0.values)), roi)


def efficiency(intensity: RealMap, intensity0: RealMap, roi: Roi) -> float:
    """ eta = sum(I) / sum(I0) on the ROI; logs a warning above 1 """
    _require_same_grid(intensity, intensity0)
    total0 = float(np.sum(roi.crop(intensity0.values)))
    if total0 <= 0:
        raise EfficiencyException("unaltered readout carries no energy in the ROI")
    eta = float(np.sum(roi.crop(intensity.values))) / total0
    if eta > 1.0:
        logger.warning("efficiency %.4f exceeds 1: the modulated readout gained energy", eta)
    return eta


def write_map(data: RealMap | ComplexField, path: str | Path) -> Path:
    """
    Writes a map as a row-major little-endian float32 raster (complex interleaved re, im)
    plus a sidecar '<path>.json' with the grid metadata.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "complex" if isinstance(data, ComplexField) else "real"
    dtype = "<c8" if kind == "complex" else "<f4"
    np.ascontiguousarray(data.values, dtype=dtype).tofile(path)
    metadata = {"nx": data.grid.nx, "ny": data.grid.ny,
                "pitch_x_um": data.grid.pitch_x, "pitch_y_um": data.grid.pitch_y,
                "grid_units": data.grid.units, "kind": kind, "units": data.units}
    Path(f"{path}.json").write_text(json.dumps(metadata, sort_keys=True, indent=2), encoding="utf-8")
    return path


def read_map(path: str | Path) -> RealMap | ComplexField:
    """ Reads a map written by write_map """
    path = Path(path)
    metadata = json.loads(Path(f"{path}.json").read_text(encoding="utf-8"))
    if metadata.get("kind") not in MAP_KINDS:
        raise InvalidMapException(f"unknown map kind {metadata.get('kind')!r} in {path}.json")
    grid = Grid2D(metadata["nx"], metadata["ny"], metadata["pitch_x_um"], metadata["pitch_y_um"],
                  metadata.get("grid_units", "um"))
    if metadata["kind"] == "complex":
        values = np.fromfile(path, dtype="<c8").reshape(grid.shape)
        return ComplexField(grid, values.astype(complex), metadata["units"])
    values = np.fromfile(path, dtype="<f4").reshape(grid.shape)
    return RealMap(grid, values.astype(float), metadata["units"])
