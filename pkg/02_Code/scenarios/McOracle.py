import numpy as np
import pandas as pd

from fringe_lab import AnalysisResult
from scenarios.baseScenario.BaseScenario import BaseScenario
from scenarios.baseScenario.acceptance import monte_carlo_agreement, reported
from ssm_model import decoherence_envelope, gamma_from_sigma_rel, mc_decoherence_amplitude


class McOracle(BaseScenario):
    """
    Checks the closed-form decoherence law against Monte-Carlo estimates:
    |<exp(i alpha T dI)>| = exp(-(alpha T sigma)^2 / 2), then the envelope
    exp(-gamma phi^2) with gamma = sigma_rel^2 / 2 for the configured noise.
    """
    name = "mc-oracle"
    description = "Monte-Carlo check of the decoherence law and of the gamma identity"
    defaults = {"noise": {"sigma_rel": 0.29}}

    def simulate(self, config, out_dir):
        settings = config.monte_carlo
        rows = []
        metrics = []
        with self.stage("decoherence law"):
            for index, alpha_t_sigma in enumerate(settings.alpha_t_sigmas):
                estimate = mc_decoherence_amplitude(alpha_t_sigma, settings.n_samples,
                                                    self.derived_seed(config, 0, index))
                expected = float(np.exp(-0.5 * alpha_t_sigma ** 2))
                rows.append({"check": "law", "argument": alpha_t_sigma, "expected": expected,
                             "estimate": estimate.amplitude, "std_error": estimate.std_error})
                metrics.append(monte_carlo_agreement(f"law_sigma_{alpha_t_sigma:g}", estimate, expected))

        sigma_rel = config.noise.sigma_rel
        gamma = gamma_from_sigma_rel(sigma_rel)
        with self.stage("gamma identity"):
            for index, phi in enumerate(settings.phases_rad):
                estimate = mc_decoherence_amplitude(sigma_rel * phi, settings.n_samples,
                                                    self.derived_seed(config, 1, index))
                expected = float(decoherence_envelope(phi, gamma))
                rows.append({"check": "gamma", "argument": phi, "expected": expected,
                             "estimate": estimate.amplitude, "std_error": estimate.std_error})
                metrics.append(monte_carlo_agreement(f"gamma_phi_{phi:.4g}", estimate, expected))
        metrics.append(reported("gamma", gamma))

        with self.stage("export"):
            self.save_table(out_dir, "mc_oracle", pd.DataFrame(rows))
        return AnalysisResult(gamma=gamma, extras={"sigma_rel": sigma_rel, "n_samples": settings.n_samples}), metrics
