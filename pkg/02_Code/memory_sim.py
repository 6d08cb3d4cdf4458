"""
This file contains the quantum memory model: write-in of a signal as a spin-wave
state, SSM phase imprinting on explicit longitudinal slices and (split) readout.

The spin-wave carrier K_sw is taken as zero: the transverse envelope lives in the
frame of the readout optical carrier.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from field_core import ComplexField, SsmLabException, read_map, write_map
from ssm_model import DEFAULT_SLICES, IntensityRealization, SsmPulse

logger = logging.getLogger(__name__)

POPULATION_TOLERANCE = 1e-12

# Hook of split_readout_sequence: (readout index, previous fields) -> pulse to apply or None
ModulationHook = Callable[[int, list], Optional[tuple[SsmPulse, IntensityRealization]]]


class DimensionMismatchException(SsmLabException):
    """ Raised whenever a realization does not match the slices of a state """
    pass


class InsufficientPopulationException(SsmLabException):
    """ Raised whenever a readout asks for more than what is left in the memory """
    pass


@dataclass(frozen=True, eq=False)
class SpinWaveState:
    """
    Stored coherence: transverse envelope S(x, y), accumulated phase per (y, z) slice
    and the fraction of the excitation still in the memory.
    """
    transverse: ComplexField
    slice_phases: np.ndarray
    population: float = 1.0

    def __post_init__(self) -> None:
        phases = np.asarray(self.slice_phases, dtype=float)
        if phases.ndim != 2 or phases.shape[0] != self.transverse.grid.ny:
            raise DimensionMismatchException(
                f"slice phases {phases.shape} do not match ny={self.transverse.grid.ny}")
        if not np.all(np.isfinite(phases)):
            raise DimensionMismatchException("slice phases hold non-finite values")
        if not -POPULATION_TOLERANCE <= self.population <= 1.0 + POPULATION_TOLERANCE:
            raise InsufficientPopulationException(f"population {self.population} outside [0, 1]")
        object.__setattr__(self, "slice_phases", phases)
        object.__setattr__(self, "population", float(np.clip(self.population, 0.0, 1.0)))

    @property
    def n_slices(self) -> int:
        return self.slice_phases.shape[1]

    def slice_average(self) -> np.ndarray:
        """ (1/Nz) sum_z exp(i phase(y, z)), one complex factor per y line """
        return np.exp(1j * self.slice_phases).mean(axis=1)


def write_in(signal: ComplexField, nz: int = DEFAULT_SLICES) -> SpinWaveState:
    """ Maps the signal onto a fresh spin-wave with flat slice phases """
    return SpinWaveState(signal, np.zeros((signal.grid.ny, nz)), 1.0)


def apply_ssm(state: SpinWaveState, pulse: SsmPulse, realization: IntensityRealization) -> SpinWaveState:
    """
    Adds sign * alpha * T * I(y, z) to the slice phases; the envelope is untouched.

    Raises:
        DimensionMismatchException: The realization is not (ny, Nz) of the state.
    """
    if realization.intensity.shape != state.slice_phases.shape:
        raise DimensionMismatchException(
            f"realization {realization.intensity.shape} does not match state slices {state.slice_phases.shape}")
    phases = state.slice_phases + pulse.phase_per_intensity * realization.intensity
    return replace(state, slice_phases=phases)


def readout(state: SpinWaveState, fraction: float = 1.0, storage_time_us: float = 0.0,
            decay_per_us: float = 1.0) -> tuple[ComplexField, SpinWaveState]:
    """
    Converts a fraction of the stored excitation into an optical field.

    Args:
        state (SpinWaveState): Memory content.
        fraction (float): Share of the initial excitation to read, 0 < fraction <= population.
        storage_time_us (float): Time since write-in.
        decay_per_us (float): Amplitude kept per microsecond of storage, 1 is lossless.

    Returns:
        tuple[ComplexField, SpinWaveState]: The readout field and the depleted state.

    Raises:
        InsufficientPopulationException: fraction out of range or above the population.
    """
    if not 0 < fraction <= 1:
        raise InsufficientPopulationException(f"fraction={fraction} must lie in (0, 1]")
    if fraction > state.population + POPULATION_TOLERANCE:
        raise InsufficientPopulationException(
            f"cannot read {fraction:.3f} with only {state.population:.3f} left in the memory")
    if not 0 < decay_per_us <= 1 or storage_time_us < 0:
        raise InsufficientPopulationException(
            f"invalid storage: decay_per_us={decay_per_us}, storage_time_us={storage_time_us}")

    factor = np.sqrt(fraction) * decay_per_us ** storage_time_us
    values = factor * state.transverse.values * state.slice_average()[:, None]
    field = state.transverse.with_values(values)
    remaining = max(state.population - fraction, 0.0)
    logger.debug("readout of %.3f, %.3f left in the memory", fraction, remaining)
    return field, replace(state, population=remaining)


def split_readout_sequence(state: SpinWaveState, fractions: Sequence[float],
                           modulation_hook: ModulationHook | None = None,
                           storage_times_us: Sequence[float] | None = None,
                           decay_per_us: float = 1.0) -> tuple[list[ComplexField], SpinWaveState]:
    """
    Successive partial readouts. Before readout n >= 1 the hook sees the fields read
    so far and may return an (SsmPulse, IntensityRealization) applied to the state.
    """
    times = list(storage_times_us) if storage_times_us is not None else [0.0] * len(fractions)
    if len(times) != len(fractions):
        raise DimensionMismatchException(f"{len(fractions)} fractions but {len(times)} storage times")
    fields = []
    for index, (fraction, time_us) in enumerate(zip(fractions, times)):
        if index > 0 and modulation_hook is not None:
            modulation = modulation_hook(index, list(fields))
            if modulation is not None:
                state = apply_ssm(state, *modulation)
        field, state = readout(state, fraction, time_us, decay_per_us)
        fields.append(field)
    return fields, state


def write_state(state: SpinWaveState, directory: str | Path) -> Path:
    """ transverse.c64 (+ sidecar), slice_phases.f32 and state.json in one directory """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_map(state.transverse, directory / "transverse.c64")
    np.ascontiguousarray(state.slice_phases, dtype="<f4").tofile(directory / "slice_phases.f32")
    manifest = {"population": state.population, "ny": state.slice_phases.shape[0], "nz": state.n_slices}
    (directory / "state.json").write_text(json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8")
    return directory


def read_state(directory: str | Path) -> SpinWaveState:
    directory = Path(directory)
    manifest = json.loads((directory / "state.json").read_text(encoding="utf-8"))
    transverse = read_map(directory / "transverse.c64")
    phases = np.fromfile(directory / "slice_phases.f32", dtype="<f4").reshape(manifest["ny"], manifest["nz"])
    return SpinWaveState(transverse, phases.astype(float), manifest["population"])
