import numpy as np

from ssm_model import MonteCarloAmplitude
from ssmlab_models import Metric


def within_relative(name: str, value: float, truth: float, tolerance: float, source: str = "[DERIVED]") -> Metric:
    """ value within truth * (1 +/- tolerance) """
    bounds = sorted((truth * (1 - tolerance), truth * (1 + tolerance)))
    return Metric(name, value, bounds[0], bounds[1], source)


def within_absolute(name: str, value: float, target: float, tolerance: float, source: str = "[DERIVED]") -> Metric:
    return Metric(name, value, target - tolerance, target + tolerance, source)


def at_least(name: str, value: float, low: float, source: str = "[DERIVED]") -> Metric:
    return Metric(name, value, low, None, source)


def at_most(name: str, value: float, high: float, source: str = "[DERIVED]") -> Metric:
    return Metric(name, value, None, high, source)


def between(name: str, value: float, low: float, high: float, source: str = "[DERIVED]") -> Metric:
    return Metric(name, value, low, high, source)


def reported(name: str, value: float, source: str = "[DERIVED]") -> Metric:
    """ Figure reported without acceptance bounds """
    return Metric(name, value, None, None, source)


def monte_carlo_agreement(name: str, estimate: MonteCarloAmplitude, expected: float,
                          max_errors: float = 3.0) -> Metric:
    """ |estimate - expected| in Monte-Carlo standard errors """
    deviation = abs(estimate.amplitude - expected)
    value = 0.0 if deviation == 0 else deviation / estimate.std_error if estimate.std_error > 0 else np.inf
    return Metric(name, value, None, max_errors, "[DERIVED]")


def predicted_step_efficiency(gamma: float, height: float) -> float:
    """ Half the readout keeps its energy, the other half loses exp(-2 gamma height^2) """
    return 0.5 * (1.0 + np.exp(-2.0 * gamma * height ** 2))
