import numpy as np
import pandas as pd

from fringe_lab import AnalysisResult
from optics_prop import WaistFitModel, fit_waist_model, simulate_waist_curve, write_waist_csv, write_waist_fit_json
from scenarios.baseScenario.BaseScenario import BaseScenario
from scenarios.baseScenario.acceptance import reported, within_relative

PARAMETERS = ("w_sw_um", "gamma", "f_ph_mm", "phase_scale")


class WaistCurve(BaseScenario):
    """
    Closed loop on the far-field waist versus SSM power: data generated from a
    known model with relative measurement noise, then fitted from a perturbed
    starting point.
    """
    name = "waist-curve"
    description = "Far-field waist versus SSM power, model fit recovering w_sw, gamma, f_ph and the phase scale"

    def simulate(self, config, out_dir):
        settings = config.waist_curve
        truth = settings.truth()
        rng = np.random.default_rng(self.derived_seed(config, 0))
        powers = np.linspace(0.0, settings.p_max, settings.n_points)

        with self.stage("waist curve"):
            clean = simulate_waist_curve(truth, powers, config.imaging)
            observed = clean * (1.0 + settings.noise_rel * rng.standard_normal(powers.size))

        signs = rng.choice([-1.0, 1.0], size=len(PARAMETERS))
        initial = WaistFitModel(*(truth.as_vector() * (1.0 + settings.initial_perturbation * signs)))
        with self.stage("model fit"):
            fit = fit_waist_model(powers, observed, config.imaging, initial)

        with self.stage("export"):
            write_waist_csv(powers, observed, out_dir / "waist_curve.csv")
            write_waist_fit_json(fit, out_dir / "waist_fit.json")
            fitted = simulate_waist_curve(fit.model, powers, config.imaging)
            self.save_table(out_dir, "waist_curve_model", pd.DataFrame(
                {"power": powers, "w0_true_mrad": clean, "w0_observed_mrad": observed, "w0_fit_mrad": fitted}))

        recovered = fit.model.as_vector()
        metrics = [within_relative(name, value, true_value, 0.05)
                   for name, value, true_value in zip(PARAMETERS, recovered, truth.as_vector())]
        metrics.append(reported("residual_rms", fit.residual_rms))
        dip = int(np.argmin(observed))
        extras = {f"fit_{name}": float(value) for name, value in zip(PARAMETERS, recovered)}
        extras.update({f"err_{name}": float(fit.std_errors[name]) for name in PARAMETERS})
        extras["dip_power"] = float(powers[dip])
        return AnalysisResult(gamma=fit.model.gamma, gamma_err=float(fit.std_errors["gamma"]),
                              focal_mm=fit.model.f_ph_mm, focal_err_mm=float(fit.std_errors["f_ph_mm"]),
                              extras=extras), metrics
