import logging
from typing import Sequence

import numpy as np
from pydantic import BaseModel

from sphs_core.errors import ConfigurationError

logger = logging.getLogger(__name__)


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size:
        raise ConfigurationError("Slope fit needs matching abscissa and ordinate lengths")
    if x.size < 2:
        raise ConfigurationError("Slope fit needs at least 2 points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ConfigurationError("Log-log fit needs positive values")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def observed_order(steps: Sequence[float], errors: Sequence[float]) -> float:
    """Observed convergence order p of errors ~ C * step^p."""
    errors = np.asarray(errors, dtype=float)
    if np.all(errors == 0):
        logger.debug("All errors are zero; reporting an infinite order")
        return float("inf")
    return loglog_slope(steps, np.maximum(errors, np.finfo(float).tiny))


class MonteCarloComparison(BaseModel):
    estimate: float
    standard_error: float
    expected: float
    n_se: float
    passed: bool


def compare_samples(samples: Sequence[float], expected: float, n_se: float = 3.0) -> MonteCarloComparison:
    """Sample mean against an exact value, passing within n_se standard errors."""
    samples = np.asarray(samples, dtype=float)
    estimate = float(np.mean(samples)) if samples.size else 0.0
    se = float(np.std(samples, ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
    if se > 0:
        passed = abs(estimate - expected) <= n_se * se
    else:
        passed = bool(np.isclose(estimate, expected, rtol=1e-10, atol=1e-12))
    return MonteCarloComparison(estimate=estimate, standard_error=se, expected=float(expected), n_se=n_se,
                                passed=bool(passed))
