import numpy as np
import pytest

from field_core import Grid2D, gaussian_field
from memory_sim import (DimensionMismatchException, InsufficientPopulationException, apply_ssm, read_state, readout,
                        split_readout_sequence, write_in, write_state)
from ssm_model import (PhaseProfile1D, SsmNoiseModel, SsmPulse, lens_phase, phase_to_intensity, realize_noise,
                       sawtooth_phase)

GRID = Grid2D(32, 64, 3.25, 3.25)
SIGNAL = gaussian_field(GRID, 40.0, 40.0)


def imprint(state, profile, sigma_rel, seed=0):
    pulse = SsmPulse(profile, noise=SsmNoiseModel(sigma_rel=sigma_rel))
    realization = realize_noise(phase_to_intensity(profile, pulse), pulse.noise, state.n_slices, seed)
    return apply_ssm(state, pulse, realization)


def test_write_in_then_full_readout_returns_the_signal():
    state = write_in(SIGNAL, 32)
    field, depleted = readout(state, 1.0)
    np.testing.assert_allclose(field.values, SIGNAL.values)
    assert depleted.population == 0.0
    assert state.population == 1.0


def test_noiseless_ssm_imprints_the_profile():
    profile = lens_phase(GRID, 50.0)
    state = imprint(write_in(SIGNAL, 32), profile, 0.0)
    field, _ = readout(state)
    np.testing.assert_allclose(field.values, SIGNAL.values * np.exp(1j * profile.as_map(GRID)), atol=1e-12)


def test_noisy_ssm_attenuates_by_the_decoherence_envelope():
    phase = 1.0
    profile = PhaseProfile1D(GRID.y, np.full(GRID.ny, phase))
    state = imprint(write_in(SIGNAL, 256), profile, 0.29, seed=7)
    attenuation = np.abs(state.slice_average())
    assert attenuation.mean() == pytest.approx(np.exp(-0.5 * (0.29 * phase) ** 2), abs=0.01)
    np.testing.assert_allclose(np.angle(state.slice_average()).mean(), phase, atol=0.01)


def test_partial_readouts_deplete_the_memory():
    state = write_in(SIGNAL, 16)
    field, state = readout(state, 0.25)
    np.testing.assert_allclose(np.abs(field.values), 0.5 * np.abs(SIGNAL.values))
    assert state.population == pytest.approx(0.75)
    _, state = readout(state, 0.75)
    with pytest.raises(InsufficientPopulationException):
        readout(state, 0.1)
    with pytest.raises(InsufficientPopulationException):
        readout(write_in(SIGNAL, 16), 0.0)


def test_storage_decay():
    field, _ = readout(write_in(SIGNAL, 16), 1.0, storage_time_us=2.0, decay_per_us=0.9)
    np.testing.assert_allclose(np.abs(field.values), 0.81 * np.abs(SIGNAL.values))


def test_realization_must_match_the_slices():
    profile = lens_phase(GRID, 50.0)
    pulse = SsmPulse(profile)
    realization = realize_noise(phase_to_intensity(profile, pulse), pulse.noise, 64, seed=0)
    with pytest.raises(DimensionMismatchException):
        apply_ssm(write_in(SIGNAL, 32), pulse, realization)


def test_split_readout_sequence_calls_the_hook_between_readouts():
    calls = []
    profile = PhaseProfile1D(GRID.y, np.full(GRID.ny, np.pi))
    pulse = SsmPulse(profile, noise=SsmNoiseModel(sigma_rel=0.0))

    def hook(index, fields):
        calls.append((index, len(fields)))
        return pulse, realize_noise(phase_to_intensity(profile, pulse), pulse.noise, 32, seed=index)

    fields, state = split_readout_sequence(write_in(SIGNAL, 32), [0.5, 0.5], hook)
    assert calls == [(1, 1)]
    assert state.population == pytest.approx(0.0)
    np.testing.assert_allclose(fields[1].values, -fields[0].values, atol=1e-12)


def test_split_readout_sequence_without_hook_and_with_storage_times():
    fields, _ = split_readout_sequence(write_in(SIGNAL, 16), [0.5, 0.5], None, [0.0, 1.0], decay_per_us=0.5)
    np.testing.assert_allclose(np.abs(fields[1].values), 0.5 * np.abs(fields[0].values))
    with pytest.raises(DimensionMismatchException):
        split_readout_sequence(write_in(SIGNAL, 16), [0.5, 0.5], None, [1.0])


def test_sawtooth_shifts_the_readout_spectrum():
    gradient = 2 * np.pi / (GRID.ny * GRID.pitch_y / 8)
    state = imprint(write_in(SIGNAL, 16), sawtooth_phase(GRID, gradient), 0.0)
    field, _ = readout(state)
    np.testing.assert_allclose(field.values, SIGNAL.values * np.exp(1j * gradient * GRID.y)[:, None], atol=1e-12)


def test_write_and_read_state(tmp_path):
    state = imprint(write_in(SIGNAL, 32), lens_phase(GRID, 80.0), 0.06, seed=3)
    _, state = readout(state, 0.4)
    loaded = read_state(write_state(state, tmp_path / "state"))
    assert loaded.population == pytest.approx(0.6)
    assert loaded.n_slices == 32
    np.testing.assert_allclose(loaded.slice_phases, state.slice_phases, rtol=1e-6)
    np.testing.assert_allclose(loaded.transverse.values, state.transverse.values, atol=1e-7)
