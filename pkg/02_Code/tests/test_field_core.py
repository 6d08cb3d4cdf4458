import logging

import numpy as np
import pytest

from field_core import (ComplexField, FitFailureException, Grid2D, InvalidGridException, InvalidMapException,
                        RealMap, Roi, UndefinedFidelityException, efficiency, fft2_centered, fit_gaussian_1d,
                        fit_gaussian_2d, gaussian_field, ifft2_centered, overlap_fidelity, phase_fidelity,
                        read_map, roi_from_readout, wavenumber, write_map)


@pytest.mark.parametrize("nx, ny", [(7, 8), (8, 9), (6, 8), (8, 0)])
def test_grid_rejects_odd_or_small_sizes(nx, ny):
    with pytest.raises(InvalidGridException):
        Grid2D(nx, ny, 1.0, 1.0)


def test_grid_rejects_non_positive_pitch():
    with pytest.raises(InvalidGridException, match="pitch_x"):
        Grid2D(8, 8, -3.25, 3.25)


def test_grid_is_centered_on_index_half_n():
    grid = Grid2D(16, 8, 2.0, 3.0)
    assert grid.shape == (8, 16)
    assert grid.x[8] == 0.0 and grid.y[4] == 0.0
    assert grid.index_of(0.0, 0.0) == (4, 8)
    assert grid.index_of(4.1, -3.2) == (3, 10)
    X, Y = grid.coordinates()
    assert X.shape == Y.shape == grid.shape


def test_reciprocal_grid_pitch_and_units():
    grid = Grid2D(64, 32, 3.25, 2.0)
    spectral = grid.reciprocal()
    assert spectral.units == "rad/um"
    assert spectral.pitch_x == pytest.approx(2 * np.pi / (64 * 3.25))
    assert spectral.pitch_y == pytest.approx(2 * np.pi / (32 * 2.0))
    back = spectral.reciprocal()
    assert back.units == "um"
    assert back.pitch_x == pytest.approx(3.25) and back.pitch_y == pytest.approx(2.0)


def test_map_shape_must_match_grid():
    grid = Grid2D(8, 8, 1.0, 1.0)
    with pytest.raises(InvalidMapException):
        RealMap(grid, np.zeros((8, 10)))
    with pytest.raises(InvalidMapException):
        ComplexField(grid, np.zeros((10, 8)))


def test_gaussian_field_waist_definition():
    grid = Grid2D(256, 256, 2.5, 2.5)
    field = gaussian_field(grid, 100.0, 100.0)
    assert field.values[128, 128] == pytest.approx(1.0)
    assert field.values[128 + 40, 128].real == pytest.approx(np.exp(-1.0))


def test_gaussian_field_is_separable():
    grid = Grid2D(64, 32, 3.25, 3.25)
    field = gaussian_field(grid, 40.0, 25.0, center=(6.5, -3.25))
    gx = np.exp(-((grid.x - 6.5) / 40.0) ** 2)
    gy = np.exp(-((grid.y + 3.25) / 25.0) ** 2)
    np.testing.assert_allclose(field.values.real, np.outer(gy, gx), atol=1e-14)


def test_gaussian_field_rejects_bad_arguments():
    grid = Grid2D(16, 16, 1.0, 1.0)
    with pytest.raises(InvalidMapException):
        gaussian_field(grid, 0.0, 1.0)
    with pytest.raises(InvalidMapException):
        gaussian_field(grid, 2.0, 2.0, center=(100.0, 0.0))


def test_fft_round_trip_and_parseval():
    grid = Grid2D(64, 32, 3.25, 3.25)
    rng = np.random.default_rng(3)
    field = ComplexField(grid, rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape))
    spectrum = fft2_centered(field)
    assert spectrum.grid.units == "rad/um"
    back = ifft2_centered(spectrum)
    assert back.grid.units == "um"
    assert np.max(np.abs(back.values - field.values)) <= 1e-12
    assert np.sum(np.abs(spectrum.values) ** 2) == pytest.approx(np.sum(np.abs(field.values) ** 2), rel=1e-12)


def test_fft_of_gaussian_has_waist_two_over_w():
    grid = Grid2D(256, 256, 2.5, 2.5)
    waist = 50.0
    spectrum = fft2_centered(gaussian_field(grid, waist, waist))
    column = np.abs(spectrum.values[:, 128])
    ky = spectrum.grid.y
    np.testing.assert_allclose(column / column.max(), np.exp(-ky ** 2 * waist ** 2 / 4), atol=1e-6)
    assert np.argmax(np.abs(spectrum.values)) == np.ravel_multi_index((128, 128), grid.shape)


def test_fit_gaussian_2d_recovers_noiseless_widths():
    grid = Grid2D(128, 128, 1.0, 1.0)
    intensity = gaussian_field(grid, 30.0, 20.0, center=(5.0, -4.0)).intensity()
    fit = fit_gaussian_2d(intensity)
    assert fit.sigma_x == pytest.approx(15.0, rel=1e-4)
    assert fit.sigma_y == pytest.approx(10.0, rel=1e-4)
    assert fit.center == pytest.approx((5.0, -4.0), abs=1e-4)
    np.testing.assert_allclose(fit.evaluate(grid).values, intensity.values, atol=1e-6)


def test_fit_gaussian_2d_with_additive_noise():
    grid = Grid2D(128, 128, 1.0, 1.0)
    intensity = gaussian_field(grid, 30.0, 30.0).intensity()
    noisy = RealMap(grid, intensity.values + 0.05 * np.random.default_rng(1).normal(size=grid.shape))
    fit = fit_gaussian_2d(noisy)
    assert fit.sigma_x == pytest.approx(15.0, rel=0.02)
    assert fit.sigma_y == pytest.approx(15.0, rel=0.02)


@pytest.mark.parametrize("values", [np.ones((16, 16)), np.zeros((16, 16))])
def test_fit_gaussian_2d_rejects_maps_without_lobe(values):
    with pytest.raises(FitFailureException):
        fit_gaussian_2d(RealMap(Grid2D(16, 16, 1.0, 1.0), values))


def test_fit_gaussian_1d():
    axis = np.linspace(-50, 50, 201)
    profile = 3.0 * np.exp(-(axis - 4.0) ** 2 / (2 * 6.0 ** 2)) + 0.5
    fit = fit_gaussian_1d(axis, profile)
    assert fit.sigma == pytest.approx(6.0, rel=1e-5)
    assert fit.center == pytest.approx(4.0, abs=1e-5)
    assert fit.offset == pytest.approx(0.5, abs=1e-5)


def test_roi_from_readout_bounds_two_sigmas():
    grid = Grid2D(128, 128, 1.0, 1.0)
    roi = roi_from_readout(gaussian_field(grid, 40.0, 40.0).intensity(), 2.0)
    assert roi == Roi(24, 104, 24, 104)
    assert roi.shape == (81, 81)


def test_roi_from_readout_is_clamped_to_the_grid():
    grid = Grid2D(128, 128, 1.0, 1.0)
    roi = roi_from_readout(gaussian_field(grid, 40.0, 40.0).intensity(), 10.0)
    assert roi == Roi.full(grid)


def test_roi_mask_and_crop():
    grid = Grid2D(8, 8, 1.0, 1.0)
    roi = Roi(1, 3, 2, 5)
    assert roi.mask(grid).sum() == 12
    assert roi.crop(np.arange(64).reshape(8, 8)).shape == roi.shape == (3, 4)


def test_overlap_fidelity_identities():
    grid = Grid2D(64, 64, 1.0, 1.0)
    roi = Roi.full(grid)
    first = gaussian_field(grid, 10.0, 10.0).intensity()
    second = gaussian_field(grid, 10.0, 10.0, center=(10.0, 0.0)).intensity()
    assert overlap_fidelity(first, first, roi) == pytest.approx(1.0)
    assert overlap_fidelity(RealMap(grid, 7.0 * first.values), first, roi) == pytest.approx(1.0)
    assert overlap_fidelity(first, second, roi) == pytest.approx(overlap_fidelity(second, first, roi))
    assert overlap_fidelity(first, second, roi) < 1.0


def test_overlap_fidelity_of_offset_gaussians_matches_closed_form():
    grid = Grid2D(256, 256, 0.5, 0.5)
    waist = 10.0
    first = gaussian_field(grid, waist, waist).intensity()
    second = gaussian_field(grid, waist, waist, center=(waist, 0.0)).intensity()
    # intensities exp(-2 r^2 / w^2); amplitude overlap exp(-d^2 / (2 w^2))
    expected = np.exp(-0.5)
    assert overlap_fidelity(first, second, Roi.full(grid)) == pytest.approx(expected, abs=1e-4)


def test_overlap_fidelity_errors():
    grid = Grid2D(8, 8, 1.0, 1.0)
    roi = Roi.full(grid)
    ones = RealMap(grid, np.ones(grid.shape))
    with pytest.raises(UndefinedFidelityException):
        overlap_fidelity(RealMap(grid, np.zeros(grid.shape)), ones, roi)
    with pytest.raises(InvalidMapException):
        overlap_fidelity(RealMap(grid, -np.ones(grid.shape)), ones, roi)
    with pytest.raises(InvalidMapException):
        overlap_fidelity(ones, RealMap(Grid2D(8, 8, 2.0, 2.0), np.ones((8, 8))), roi)


def test_phase_fidelity_ignores_the_sign_of_the_phase():
    grid = Grid2D(16, 16, 1.0, 1.0)
    phase = RealMap(grid, np.linspace(-2.0, 3.0, 256).reshape(16, 16))
    mirrored = RealMap(grid, -phase.values)
    assert phase_fidelity(phase, mirrored, Roi.full(grid)) == pytest.approx(1.0)


def test_efficiency(caplog):
    grid = Grid2D(16, 16, 1.0, 1.0)
    roi = Roi.full(grid)
    intensity0 = gaussian_field(grid, 4.0, 4.0).intensity()
    assert efficiency(intensity0, intensity0, roi) == pytest.approx(1.0)
    assert efficiency(RealMap(grid, 0.5 * intensity0.values), intensity0, roi) == pytest.approx(0.5)
    with caplog.at_level(logging.WARNING):
        assert efficiency(RealMap(grid, 2.0 * intensity0.values), intensity0, roi) == pytest.approx(2.0)
    assert "exceeds 1" in caplog.text


def test_write_and_read_maps(tmp_path):
    grid = Grid2D(16, 8, 3.25, 2.0)
    phase = RealMap(grid, np.linspace(-np.pi, np.pi, 128).reshape(8, 16), "rad")
    path = write_map(phase, tmp_path / "phase.f32")
    assert path.stat().st_size == 128 * 4
    loaded = read_map(path)
    assert isinstance(loaded, RealMap)
    assert loaded.grid == grid and loaded.units == "rad"
    np.testing.assert_allclose(loaded.values, phase.values, rtol=1e-6)

    field = gaussian_field(grid, 5.0, 5.0)
    field = field.with_values(field.values * np.exp(0.3j))
    loaded = read_map(write_map(field, tmp_path / "field.c64"))
    assert isinstance(loaded, ComplexField)
    np.testing.assert_allclose(loaded.values, field.values, atol=1e-7)


def test_far_field_maps_keep_their_grid_units(tmp_path):
    angular = Grid2D(16, 8, 0.05, 0.05, "mrad")
    loaded = read_map(write_map(RealMap(angular, np.ones(angular.shape)), tmp_path / "far.f32"))
    assert loaded.grid.units == "mrad"
    assert loaded.grid == angular


def test_wavenumber():
    assert wavenumber(780.0) == pytest.approx(8.0554, rel=1e-4)
