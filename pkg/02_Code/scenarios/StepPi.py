import pandas as pd

from field_core import RealMap, efficiency, phase_fidelity
from fringe_lab import AnalysisResult, align_global_phase, extract_phase, readout_intensity_map
from scenarios.baseScenario.NearFieldScenario import NearFieldScenario
from scenarios.baseScenario.acceptance import at_least, between, predicted_step_efficiency, reported
from ssm_model import gamma_from_sigma_rel, step_phase


class StepPi(NearFieldScenario):
    """
    Interferometric retrieval of a phase step imprinted along y: the phase map
    is compared with the imposed step, the efficiency with the decoherence
    prediction (1 + exp(-2 gamma h^2)) / 2.
    """
    name = "step-pi"
    description = "Near-field interferometric retrieval of a pi phase step, fidelity and efficiency"
    defaults = {"noise": {"sigma_rel": 0.29}, "n_frames": 200}

    def simulate(self, config, out_dir):
        pulse = config.pulse
        with self.stage("setup"):
            setup = self.setup(config)
            roi = self.readout_roi(setup, config, self.derived_seed(config, 0))
            profile = step_phase(setup.grid, 0.0, pulse.step_height_rad, pulse.step_edge_um)
            plain = self.ssm_readout(setup.signal, None, config, None)
            modulated = self.ssm_readout(setup.signal, profile, config, self.derived_seed(config, 1))

        with self.stage("reference run"):
            reference_run = self.record(setup, [plain], config, "reference", self.derived_seed(config, 2),
                                        out_dir=out_dir)
        with self.stage("modulated run"):
            modulated_run = self.record(setup, [modulated], config, "modulated", self.derived_seed(config, 3),
                                        window=reference_run.window, out_dir=out_dir)

        with self.stage("phase extraction"):
            extracted = extract_phase(modulated_run.averaged, reference_run.averaged, roi)
            target = RealMap(setup.grid, profile.as_map(setup.grid), "rad")
            aligned = align_global_phase(extracted.phase, target, roi)
            fidelity = phase_fidelity(aligned, target, roi)
            h = readout_intensity_map(modulated_run.averaged)
            h0 = readout_intensity_map(reference_run.averaged)
            eta = efficiency(h, h0, roi)

        gamma = gamma_from_sigma_rel(config.noise.sigma_rel)
        predicted = predicted_step_efficiency(gamma, pulse.step_height_rad)
        with self.stage("export"):
            self.save_map(out_dir, "phase", extracted.phase)
            self.save_map(out_dir, "h_modulated", h)
            self.save_map(out_dir, "h_reference", h0)
            self.save_table(out_dir, "phase_profile", pd.DataFrame(
                {"y_um": extracted.profile_y, "phase_rad": extracted.profile}))
            self.save_table(out_dir, "global_phases", pd.DataFrame(
                {"reference": reference_run.phases.phases, "modulated": modulated_run.phases.phases}))

        metrics = [
            at_least("fidelity", fidelity, 0.97, "[PAPER]"),
            between("efficiency", eta, 0.67, 0.82, "[PAPER]"),
            reported("efficiency_predicted", predicted),
        ]
        result = AnalysisResult(phase_map=extracted.phase, amplitude_map=modulated_run.averaged.amplitude(),
                                global_phases={"reference": reference_run.phases.phases,
                                               "modulated": modulated_run.phases.phases},
                                fidelity=fidelity, efficiency=eta,
                                extras={"efficiency_predicted": predicted,
                                        "low_confidence": extracted.low_confidence})
        return result, metrics
