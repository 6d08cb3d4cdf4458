import logging

import numpy as np
import pandas as pd

from field_core import RealMap, efficiency, phase_fidelity
from fringe_lab import (AnalysisResult, align_global_phase, extract_phase, fit_parabola_phase,
                        readout_intensity_map, summarize_focal_fits)
from scenarios.baseScenario.NearFieldScenario import NearFieldScenario
from scenarios.baseScenario.acceptance import at_least, at_most, reported
from ssm_model import lens_phase

logger = logging.getLogger(__name__)


class SsmLens(NearFieldScenario):
    """
    Cylindrical SSM lenses of several focal lengths retrieved interferometrically.
    Each repeat records one reference run and one modulated run per focal length;
    the focal length comes from a parabolic fit of the phase map.
    """
    name = "ssm-lens"
    description = "Interferometric retrieval of SSM lenses, parabolic focal fits and phase-map fidelity"
    defaults = {"n_frames": 100, "n_repeats": 3}

    def simulate(self, config, out_dir):
        wavelength = config.imaging.wavelength_nm
        with self.stage("setup"):
            setup = self.setup(config)
            roi = self.readout_roi(setup, config, self.derived_seed(config, 0))
            plain = self.ssm_readout(setup.signal, None, config, None)

        rows = []
        fits = {focal: [] for focal in config.pulse.focal_lengths_mm}
        last_phase = None
        for repeat in range(config.n_repeats):
            with self.stage(f"reference run {repeat}"):
                reference_run = self.record(setup, [plain], config, f"reference_{repeat}",
                                            self.derived_seed(config, 1, repeat), out_dir=out_dir)
            for index, focal in enumerate(config.pulse.focal_lengths_mm):
                label = f"lens_{focal:g}mm_{repeat}"
                with self.stage(f"{label} run"):
                    profile = lens_phase(setup.grid, focal, wavelength)
                    modulated = self.ssm_readout(setup.signal, profile, config,
                                                 self.derived_seed(config, 2, repeat, index))
                    run = self.record(setup, [modulated], config, label, self.derived_seed(config, 3, repeat, index),
                                      window=reference_run.window, out_dir=out_dir)
                with self.stage(f"{label} analysis"):
                    extracted = extract_phase(run.averaged, reference_run.averaged, roi)
                    fit = fit_parabola_phase(extracted.phase, wavelength, roi)
                    truth = RealMap(setup.grid, profile.as_map(setup.grid), "rad")
                    fidelity = phase_fidelity(align_global_phase(extracted.phase, truth, roi), truth, roi)
                    eta = efficiency(readout_intensity_map(run.averaged), readout_intensity_map(reference_run.averaged),
                                     roi)
                fits[focal].append(fit)
                last_phase = extracted.phase
                rows.append({"focal_true_mm": focal, "repeat": repeat, "focal_fit_mm": fit.focal_mm,
                             "focal_err_mm": fit.focal_err_mm, "y0_um": fit.y0_um, "fidelity": fidelity,
                             "efficiency": eta})
                logger.info("%s: f = %.1f +/- %.1f mm, fidelity %.4f, efficiency %.3f", label, fit.focal_mm,
                            fit.focal_err_mm, fidelity, eta)

        table = pd.DataFrame(rows)
        with self.stage("export"):
            self.save_table(out_dir, "ssm_lens_fits", table)
            self.save_map(out_dir, "phase_last", last_phase)

        metrics = []
        extras = {}
        for focal in config.pulse.focal_lengths_mm:
            with self.stage(f"summary {focal:g} mm"):
                mean, spread = summarize_focal_fits(fits[focal])
            subset = table[table["focal_true_mm"] == focal]
            metrics.append(at_most(f"focal_rel_error_{focal:g}mm", abs(mean - focal) / abs(focal), 0.05, "[PAPER]"))
            metrics.append(at_least(f"fidelity_{focal:g}mm", subset["fidelity"].min(), 0.95, "[PAPER]"))
            metrics.append(at_least(f"efficiency_{focal:g}mm", subset["efficiency"].min(), 0.80, "[PAPER]"))
            metrics.append(reported(f"focal_std_{focal:g}mm", spread))
            extras[f"focal_{focal:g}mm"] = {"mean_mm": mean, "std_mm": spread}
        result = AnalysisResult(phase_map=last_phase, fidelity=float(table["fidelity"].min()),
                                efficiency=float(table["efficiency"].min()),
                                focal_mm=float(np.mean(table["focal_fit_mm"])) if len(fits) == 1 else None,
                                extras=extras)
        return result, metrics
