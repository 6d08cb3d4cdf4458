"""
This file contains the far-field optics: the physical cylindrical lens seen through
the imaging magnification, the single-Fourier-transform far-field model, waist
measurement and the waist-versus-SSM-power model with its least-squares fit.

Far-field coordinates are angles theta = k_perp / k in mrad; the camera position is
theta * f_eff.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import least_squares

from field_core import (ComplexField, FitFailureException, Grid2D, RealMap, SsmLabException,
                        fft2_centered, fit_gaussian_1d, wavenumber)
from ssm_model import DEFAULT_WAVELENGTH_NM, lens_phase

logger = logging.getLogger(__name__)

ALIASING_LIMIT_RAD = 0.5 * np.pi  # per sample
ALIASING_AMPLITUDE_THRESHOLD = 1e-3
MIN_WAIST_POINTS = 8
WAIST_FIT_MAX_EVALUATIONS = 200
WAIST_CSV_COLUMNS = ("power", "w0_mrad")

# Tall grid of the waist-curve model: x is passed through, y carries the SSM lens
WAIST_GRID = dict(nx=8, ny=2048, pitch_x=3.25, pitch_y=3.25)


class InvalidOpticsException(SsmLabException):
    """ Raised whenever an imaging configuration, lens or waist model is not physical """
    pass


class AliasingException(SsmLabException):
    """ Raised whenever the near-field phase varies too fast for the sampling """
    pass


class WaistFitFailureException(SsmLabException):
    """ Raised whenever the waist model fit does not converge """

    def __init__(self, message: str, best_model=None) -> None:
        super().__init__(message)
        self.best_model = best_model


@dataclass(frozen=True)
class ImagingConfig:
    f_eff_mm: float = 50.0
    magnification: float = 4.0
    wavelength_nm: float = DEFAULT_WAVELENGTH_NM
    pad_factor: int = 1

    def __post_init__(self) -> None:
        for name in ("f_eff_mm", "magnification", "wavelength_nm"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidOpticsException(f"{name}={value} must be positive")
        if isinstance(self.pad_factor, bool) or int(self.pad_factor) != self.pad_factor or self.pad_factor < 1:
            raise InvalidOpticsException(f"pad_factor={self.pad_factor} must be an integer >= 1")

    @property
    def k(self) -> float:
        """ rad/um """
        return wavenumber(self.wavelength_nm)

    def far_field_position(self, angle_mrad):
        """ Camera position in mm of a far-field angle """
        return np.asarray(angle_mrad) * 1e-3 * self.f_eff_mm


@dataclass(frozen=True)
class PhysicalLens:
    """ Cylindrical lens acting on y; focal_f_ph_mm = inf is the identity """
    focal_f_ph_mm: float = np.inf
    axis: str = "y"

    def __post_init__(self) -> None:
        if self.focal_f_ph_mm == 0 or np.isnan(self.focal_f_ph_mm):
            raise InvalidOpticsException(f"focal length {self.focal_f_ph_mm} mm is not a lens")
        if self.axis != "y":
            raise InvalidOpticsException(f"cylindrical lenses act on y only, got axis={self.axis!r}")


@dataclass(frozen=True)
class WaistFitModel:
    w_sw_um: float = 150.0
    gamma: float = 0.042
    f_ph_mm: float = -2000.0
    phase_scale: float = 20.0  # rad per mm^2 per unit SSM power

    def __post_init__(self) -> None:
        if not self.w_sw_um > 0:
            raise InvalidOpticsException(f"w_sw={self.w_sw_um} um must be > 0")
        if self.gamma < 0:
            raise InvalidOpticsException(f"gamma={self.gamma} must be >= 0")
        if self.f_ph_mm == 0:
            raise InvalidOpticsException("f_ph = 0 mm is not a lens")

    def as_vector(self) -> np.ndarray:
        return np.array([self.w_sw_um, self.gamma, self.f_ph_mm, self.phase_scale])


@dataclass(frozen=True, eq=False)
class WaistFit:
    model: WaistFitModel
    std_errors: dict
    covariance: np.ndarray
    residual_rms: float
    n_evaluations: int

    def to_dict(self) -> dict:
        names = ["w_sw_um", "gamma", "f_ph_mm", "phase_scale"]
        return {**asdict(self.model),
                "std_errors": {name: float(self.std_errors[name]) for name in names},
                "covariances": [[float(value) for value in row] for row in self.covariance],
                "residual_rms": self.residual_rms}


def effective_focal_length(lens: PhysicalLens, cfg: ImagingConfig) -> float:
    """ Focal length the ensemble sees through the magnification, f_ph / M^2 """
    return lens.focal_f_ph_mm / cfg.magnification ** 2


def apply_physical_lens(field: ComplexField, lens: PhysicalLens, cfg: ImagingConfig) -> ComplexField:
    """ Multiplies by exp(i M^2 k y^2 / (2 f_ph)) """
    if np.isinf(lens.focal_f_ph_mm):
        return field.with_values(field.values.copy())
    phase = lens_phase(field.grid, effective_focal_length(lens, cfg), cfg.wavelength_nm).phase
    return field.with_values(field.values * np.exp(1j * phase)[:, None])


def max_phase_step(field: ComplexField, amplitude_threshold: float = ALIASING_AMPLITUDE_THRESHOLD) -> float:
    """ Largest wrapped phase increment between neighbouring samples where |field| is significant """
    values = field.values
    magnitude = np.abs(values)
    if magnitude.max() == 0:
        return 0.0
    keep = magnitude >= amplitude_threshold * magnitude.max()
    step = 0.0
    for axis in (0, 1):
        head = [slice(None)] * 2
        tail = [slice(None)] * 2
        head[axis], tail[axis] = slice(1, None), slice(None, -1)
        both = keep[tuple(head)] & keep[tuple(tail)]
        if both.any():
            increments = np.angle(values[tuple(head)] * np.conj(values[tuple(tail)]))
            step = max(step, float(np.abs(increments[both]).max()))
    return step


def to_far_field(field: ComplexField, cfg: ImagingConfig) -> ComplexField:
    """
    Far-field amplitude as the centered unitary FFT of the near field (ideal 2f system).

    Args:
        field (ComplexField): Near field on a um grid.
        cfg (ImagingConfig): Wavelength and zero-padding factor.

    Returns:
        ComplexField: Far field on an angular grid (mrad), energy conserved.

    Raises:
        AliasingException: Phase increment above ALIASING_LIMIT_RAD per sample.
    """
    step = max_phase_step(field)
    if step > ALIASING_LIMIT_RAD:
        pitch = max(field.grid.pitch_x, field.grid.pitch_y)
        raise AliasingException(
            f"near-field phase gradient {step:.3f} rad/sample ({step / pitch:.4f} rad/um) "
            f"exceeds the {ALIASING_LIMIT_RAD:.3f} rad/sample guard")
    grid = field.grid
    values = field.values
    if cfg.pad_factor > 1:
        pad_y = grid.ny * (cfg.pad_factor - 1) // 2
        pad_x = grid.nx * (cfg.pad_factor - 1) // 2
        values = np.pad(values, ((pad_y, pad_y), (pad_x, pad_x)))
        grid = Grid2D(grid.nx * cfg.pad_factor, grid.ny * cfg.pad_factor, grid.pitch_x, grid.pitch_y)
    spectrum = fft2_centered(ComplexField(grid, values, field.units))
    k = cfg.k
    angular = Grid2D(grid.nx, grid.ny, spectrum.grid.pitch_x / k * 1e3, spectrum.grid.pitch_y / k * 1e3,
                     units="mrad")
    return ComplexField(angular, spectrum.values, field.units)


def measure_waist(intensity: RealMap) -> float:
    """ 1/e^2 intensity radius along y (2 sigma of a Gaussian fit of the y marginal), map units """
    marginal = intensity.values.sum(axis=1)
    fit = fit_gaussian_1d(intensity.grid.y, marginal)
    return 2.0 * fit.sigma


def waist_curve_grid() -> Grid2D:
    return Grid2D(**WAIST_GRID)


def simulate_waist_curve(model: WaistFitModel, powers, cfg: ImagingConfig,
                         grid: Grid2D | None = None) -> np.ndarray:
    """
    Far-field waist (mrad) for each SSM power p.

    The SSM imprints phi(y) = phase_scale * p * y_mm^2 with the decoherence envelope
    exp(-gamma phi^2) on a Gaussian spin-wave of waist w_sw, behind the physical lens.
    """
    grid = grid or waist_curve_grid()
    y_mm = grid.y * 1e-3
    envelope = np.exp(-(grid.y / model.w_sw_um) ** 2)
    physical = lens_phase(grid, model.f_ph_mm / cfg.magnification ** 2, cfg.wavelength_nm).phase
    across = np.exp(-(grid.x / model.w_sw_um) ** 2)
    waists = []
    for power in np.atleast_1d(np.asarray(powers, dtype=float)):
        ssm = model.phase_scale * power * y_mm ** 2
        column = envelope * np.exp(-model.gamma * ssm ** 2) * np.exp(1j * (ssm + physical))
        far = to_far_field(ComplexField(grid, np.outer(column, across)), cfg)
        waists.append(measure_waist(far.intensity()))
    return np.array(waists)


def fit_waist_model(powers, observed_w0, cfg: ImagingConfig, initial: WaistFitModel,
                    grid: Grid2D | None = None) -> WaistFit:
    """
    Least-squares fit of simulate_waist_curve to measured waists, relative residuals.

    Args:
        powers: SSM powers, at least 8 spanning the compensation dip.
        observed_w0: Measured waists in mrad.
        cfg (ImagingConfig): Imaging setup.
        initial (WaistFitModel): Starting point; f_ph keeps its sign.

    Returns:
        WaistFit: Fitted model, standard errors and covariance.

    Raises:
        InvalidOpticsException: Fewer than 8 points.
        WaistFitFailureException: No convergence, best-so-far model attached.
    """
    powers = np.asarray(powers, dtype=float)
    observed = np.asarray(observed_w0, dtype=float)
    if powers.size < MIN_WAIST_POINTS or powers.shape != observed.shape:
        raise InvalidOpticsException(
            f"need at least {MIN_WAIST_POINTS} (power, w0) pairs, got {powers.size} powers and {observed.size} waists")

    def residuals(params):
        try:
            model = WaistFitModel(*params)
            return simulate_waist_curve(model, powers, cfg, grid) / observed - 1.0
        except (FitFailureException, AliasingException):
            return np.full(observed.shape, 1e3)

    sign = np.sign(initial.f_ph_mm)
    focal_bounds = (-np.inf, -1.0) if sign < 0 else (1.0, np.inf)
    lower = [1.0, 0.0, focal_bounds[0], -np.inf]
    upper = [np.inf, np.inf, focal_bounds[1], np.inf]
    p0 = initial.as_vector()
    p0[1] = max(p0[1], 1e-6)
    result = least_squares(residuals, p0, bounds=(lower, upper), method="trf", diff_step=1e-3,
                           max_nfev=WAIST_FIT_MAX_EVALUATIONS)
    best = WaistFitModel(*result.x)
    if result.status <= 0:
        raise WaistFitFailureException(f"waist model fit did not converge: {result.message}", best)

    dof = max(observed.size - result.x.size, 1)
    variance = 2.0 * result.cost / dof
    covariance = np.linalg.pinv(result.jac.T @ result.jac) * variance
    errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    names = ["w_sw_um", "gamma", "f_ph_mm", "phase_scale"]
    logger.info("waist model fit: w_sw=%.1f um, gamma=%.4f, f_ph=%.0f mm, scale=%.3f (%d evaluations)",
                *result.x, result.nfev)
    return WaistFit(best, dict(zip(names, errors)), covariance,
                    float(np.sqrt(np.mean(result.fun ** 2))), int(result.nfev))


def write_waist_csv(powers, w0_mrad, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"power": powers, "w0_mrad": w0_mrad}).to_csv(path, index=False)
    return path


def read_waist_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    table = pd.read_csv(path)
    missing = [column for column in WAIST_CSV_COLUMNS if column not in table.columns]
    if missing:
        raise InvalidOpticsException(f"{path}: missing column(s) {missing}")
    return table["power"].to_numpy(), table["w0_mrad"].to_numpy()


def write_waist_fit_json(fit: WaistFit, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(fit.to_dict(), sort_keys=True, indent=2), encoding="utf-8")
    return path
