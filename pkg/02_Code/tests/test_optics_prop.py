import numpy as np
import pytest

from field_core import Grid2D, gaussian_field
from optics_prop import (AliasingException, ImagingConfig, InvalidOpticsException, PhysicalLens, WaistFitModel,
                         apply_physical_lens, effective_focal_length, fit_waist_model, max_phase_step,
                         measure_waist, read_waist_csv, simulate_waist_curve, to_far_field, write_waist_csv,
                         write_waist_fit_json)
from ssm_model import lens_phase

CFG = ImagingConfig()


def test_effective_focal_length():
    assert effective_focal_length(PhysicalLens(-2000.0), CFG) == pytest.approx(-125.0)
    assert effective_focal_length(PhysicalLens(800.0), ImagingConfig(magnification=2.0)) == pytest.approx(200.0)


def test_invalid_optics():
    with pytest.raises(InvalidOpticsException):
        ImagingConfig(magnification=0.0)
    with pytest.raises(InvalidOpticsException):
        ImagingConfig(pad_factor=0)
    with pytest.raises(InvalidOpticsException):
        PhysicalLens(0.0)
    with pytest.raises(InvalidOpticsException):
        PhysicalLens(100.0, axis="x")
    with pytest.raises(InvalidOpticsException):
        WaistFitModel(w_sw_um=-1.0)


def test_identity_lens_and_far_field_position():
    field = gaussian_field(Grid2D(32, 32, 3.25, 3.25), 20.0, 20.0)
    np.testing.assert_array_equal(apply_physical_lens(field, PhysicalLens(), CFG).values, field.values)
    assert CFG.far_field_position(8.3) == pytest.approx(0.415)


@pytest.mark.parametrize("pad_factor", [1, 2])
def test_far_field_conserves_energy(pad_factor):
    grid = Grid2D(64, 128, 3.25, 3.25)
    field = gaussian_field(grid, 60.0, 40.0)
    field = field.with_values(field.values * np.exp(1j * lens_phase(grid, 200.0).as_map(grid)))
    far = to_far_field(field, ImagingConfig(pad_factor=pad_factor))
    assert far.grid.units == "mrad"
    assert far.grid.shape == (128 * pad_factor, 64 * pad_factor)
    assert np.sum(np.abs(far.values) ** 2) == pytest.approx(np.sum(np.abs(field.values) ** 2), rel=1e-12)


def test_far_field_waist_of_a_flat_gaussian():
    grid = Grid2D(64, 512, 3.25, 3.25)
    far = to_far_field(gaussian_field(grid, 30.0, 30.0), CFG)
    expected = 780e-3 / (np.pi * 30.0) * 1e3
    assert expected == pytest.approx(8.28, abs=0.01)
    assert measure_waist(far.intensity()) == pytest.approx(expected, rel=0.005)


def test_aliasing_guard_names_the_gradient():
    grid = Grid2D(32, 256, 3.25, 3.25)
    field = gaussian_field(grid, 150.0, 150.0)
    field = field.with_values(field.values * np.exp(1j * lens_phase(grid, 1.0).as_map(grid)))
    assert max_phase_step(field) > np.pi / 2
    with pytest.raises(AliasingException, match="rad/sample"):
        to_far_field(field, CFG)


def test_ssm_lens_compensates_the_physical_lens():
    grid = Grid2D(32, 512, 3.25, 3.25)
    signal = gaussian_field(grid, 150.0, 150.0)
    lens = PhysicalLens(-2000.0)
    flat = measure_waist(to_far_field(signal, CFG).intensity())
    aberrated = measure_waist(to_far_field(apply_physical_lens(signal, lens, CFG), CFG).intensity())
    ssm = signal.with_values(signal.values * np.exp(1j * lens_phase(grid, 125.0).as_map(grid)))
    compensated = measure_waist(to_far_field(apply_physical_lens(ssm, lens, CFG), CFG).intensity())
    assert aberrated > 1.1 * flat
    assert compensated == pytest.approx(flat, rel=0.01)


def test_waist_curve_dips_where_the_quadratic_phases_cancel():
    model = WaistFitModel(w_sw_um=150.0, gamma=0.0, f_ph_mm=-2000.0, phase_scale=20.0)
    powers = np.linspace(0.0, 4.0, 41)
    waists = simulate_waist_curve(model, powers, CFG)
    # 20 * p * 1e-6 = k / (2 * 125e3)
    cancelling = np.pi / 0.78 / 125e3 / 20e-6
    assert abs(powers[np.argmin(waists)] - cancelling) <= 0.1
    baseline = simulate_waist_curve(WaistFitModel(150.0, 0.042, -2000.0, 20.0), [0.0], CFG)
    assert baseline[0] == pytest.approx(waists[0], rel=1e-9)


def test_fit_waist_model_recovers_noiseless_parameters():
    truth = WaistFitModel(150.0, 0.042, -2000.0, 20.0)
    powers = np.linspace(0.0, 8.0, 33)
    observed = simulate_waist_curve(truth, powers, CFG)
    initial = WaistFitModel(157.5, 0.04, -2100.0, 19.0)
    fit = fit_waist_model(powers, observed, CFG, initial)
    assert fit.model.w_sw_um == pytest.approx(150.0, rel=0.02)
    assert fit.model.f_ph_mm == pytest.approx(-2000.0, rel=0.02)
    assert fit.model.phase_scale == pytest.approx(20.0, rel=0.02)
    assert fit.model.gamma == pytest.approx(0.042, rel=0.2)
    assert fit.covariance.shape == (4, 4)
    assert set(fit.std_errors) == {"w_sw_um", "gamma", "f_ph_mm", "phase_scale"}


def test_fit_waist_model_needs_eight_points():
    with pytest.raises(InvalidOpticsException):
        fit_waist_model(np.arange(5.0), np.ones(5), CFG, WaistFitModel())


def test_waist_files(tmp_path):
    powers = np.linspace(0.0, 1.0, 5)
    path = write_waist_csv(powers, 2.0 + powers, tmp_path / "waist.csv")
    assert path.read_text().splitlines()[0] == "power,w0_mrad"
    loaded_powers, loaded_waists = read_waist_csv(path)
    np.testing.assert_allclose(loaded_waists, 2.0 + powers)
    (tmp_path / "bad.csv").write_text("p,w\n1,2\n")
    with pytest.raises(InvalidOpticsException, match="missing column"):
        read_waist_csv(tmp_path / "bad.csv")


def test_waist_fit_json(tmp_path):
    truth = WaistFitModel()
    powers = np.linspace(0.0, 8.0, 9)
    observed = simulate_waist_curve(truth, powers, CFG)
    fit = fit_waist_model(powers, observed, CFG, truth)
    content = write_waist_fit_json(fit, tmp_path / "fit.json").read_text()
    for key in ("w_sw_um", "gamma", "f_ph_mm", "phase_scale", "covariances"):
        assert f'"{key}"' in content
