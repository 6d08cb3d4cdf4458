import logging

import pandas as pd

from field_core import efficiency, gaussian_field, overlap_fidelity, roi_from_readout
from fringe_lab import AnalysisResult
from optics_prop import PhysicalLens, apply_physical_lens, effective_focal_length, measure_waist, to_far_field
from scenarios.baseScenario.BaseScenario import BaseScenario
from scenarios.baseScenario.acceptance import at_least, at_most, reported
from ssm_model import lens_phase

logger = logging.getLogger(__name__)

# |w0 compensated / w0 unaberrated - 1|, decoherence apodizes the readout by a few percent
WAIST_TOLERANCE = 0.05


class LensCompensation(BaseScenario):
    """
    Far-field check of an SSM lens cancelling the cylindrical aberration of the
    imaging path: unaberrated, aberrated and compensated readouts are compared
    in the far field with the overlap fidelity and the efficiency.
    """
    name = "lens-compensation"
    description = "SSM lens compensating a physical cylindrical lens, far-field fidelity and efficiency"
    defaults = {"noise": {"sigma_rel": 0.29}, "imaging": {"pad_factor": 2}}

    def simulate(self, config, out_dir):
        grid = config.grid.build()
        imaging = config.imaging
        spin_wave = config.spin_wave
        lens = PhysicalLens(config.pulse.physical_focal_mm)
        logger.info("physical lens %.0f mm seen as %.1f mm at the ensemble", lens.focal_f_ph_mm,
                    effective_focal_length(lens, imaging))

        with self.stage("readouts"):
            signal = gaussian_field(grid, spin_wave.waist_x_um, spin_wave.waist_y_um)
            plain = self.ssm_readout(signal, None, config, None)
            profile = lens_phase(grid, config.pulse.focal_mm, imaging.wavelength_nm)
            modulated = self.ssm_readout(signal, profile, config, self.derived_seed(config, 0))

        with self.stage("far field"):
            far0 = to_far_field(plain, imaging)
            aberrated = to_far_field(apply_physical_lens(plain, lens, imaging), imaging)
            compensated = to_far_field(apply_physical_lens(modulated, lens, imaging), imaging)
            intensity0 = far0.intensity()
            intensity_ab = aberrated.intensity()
            intensity = compensated.intensity()

        with self.stage("figures of merit"):
            roi = roi_from_readout(intensity0, config.roi_sigmas)
            fidelity = overlap_fidelity(intensity, intensity0, roi)
            fidelity_aberrated = overlap_fidelity(intensity_ab, intensity0, roi)
            eta = efficiency(intensity, intensity0, roi)
            waists = {label: measure_waist(data) for label, data in
                      (("unaberrated", intensity0), ("aberrated", intensity_ab), ("compensated", intensity))}

        with self.stage("export"):
            self.save_map(out_dir, "far_field_unaberrated", intensity0)
            self.save_map(out_dir, "far_field_aberrated", intensity_ab)
            self.save_map(out_dir, "far_field_compensated", intensity)
            angle = far0.grid.y
            self.save_table(out_dir, "far_field_profiles", pd.DataFrame({
                "angle_mrad": angle,
                "position_mm": imaging.far_field_position(angle),
                "unaberrated": intensity0.values.sum(axis=1),
                "aberrated": intensity_ab.values.sum(axis=1),
                "compensated": intensity.values.sum(axis=1),
            }))

        waist_error = abs(waists["compensated"] / waists["unaberrated"] - 1.0)
        metrics = [
            at_least("fidelity", fidelity, 0.95, "[PAPER]"),
            at_least("efficiency", eta, 0.75, "[PAPER]"),
            at_most("waist_rel_error", waist_error, WAIST_TOLERANCE),
            reported("waist_rel_error_aberrated", abs(waists["aberrated"] / waists["unaberrated"] - 1.0)),
            reported("fidelity_aberrated", fidelity_aberrated),
        ]
        extras = {f"w0_{label}_mrad": float(value) for label, value in waists.items()}
        extras["fidelity_aberrated"] = fidelity_aberrated
        result = AnalysisResult(fidelity=fidelity, efficiency=eta,
                                extras=extras)
        return result, metrics
