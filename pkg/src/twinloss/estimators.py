"""Absorption estimators, their calibration, variances and reference bounds.

All estimators are vectorised over trials: pass arrays of probe and
reference counts (or a :class:`~twinloss.photostat.CountPair` unpacked with
``*pair``).  Variances returned by the ``*_variance`` helpers are per-trial
variances of a single estimate; ``mean_np`` is always the detected probe mean
*without* the sample.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .channels import ChannelConfig, SourceModel, source_moments, theoretical_joint_stats
from .errors import (
    ArgumentError,
    DegenerateDenominatorError,
    DegenerateInputError,
    UnsupportedCaseError,
)
from .photostat import JointStats, reduce_stats


class EstimatorKind(str, enum.Enum):
    RATIO = "ratio"
    OPTIMIZED = "optimized"
    DIFFERENTIAL = "differential"
    SINGLE_BEAM = "single_beam"


class BoundKind(str, enum.Enum):
    SNL = "snl"
    COHERENT = "coherent"
    UQL = "uql"
    BALANCED_CCB = "bccb"


@dataclass(frozen=True)
class CalibrationRecord:
    """Statistics frozen during the sample-free calibration phase."""

    gamma: float
    sigma_gamma: float
    fano_p: float
    fano_r: float
    mean_np: float
    mean_nr: float
    k_opt: float
    delta_e: float
    trials: int
    var_p: float = float("nan")
    var_r: float = float("nan")
    covariance: float = float("nan")

    def __post_init__(self):
        if not (self.mean_np > 0 and self.mean_nr > 0):
            raise DegenerateInputError("calibration means must be positive")
        if not math.isfinite(self.k_opt):
            raise DegenerateInputError("optimal weight is not finite")

    def with_weight(self, k: float) -> "CalibrationRecord":
        return replace(self, k_opt=float(k))

    def scaled_weight(self, alpha_hat: float) -> "CalibrationRecord":
        """Record whose weight minimises the variance at transmission ``1 - alpha_hat``.

        The covariance between the lossy probe and the reference shrinks by
        the sample transmission, so the calibrated weight (valid at zero loss)
        is rescaled by the same factor.
        """
        return self.with_weight(self.k_opt * (1.0 - alpha_hat))


def calibrate(n_p, n_r) -> CalibrationRecord:
    """Freeze gamma, NRF, Fano factors and the weight ``k`` from sample-free counts."""
    return calibration_from_stats(reduce_stats(n_p, n_r))


def calibration_from_stats(stats: JointStats) -> CalibrationRecord:
    if stats.reference.mean <= 0:
        raise DegenerateInputError("reference mean is zero")
    if stats.reference.variance > 0:
        k = stats.covariance / stats.reference.variance
    else:
        k = 0.0
    return CalibrationRecord(
        gamma=stats.gamma,
        sigma_gamma=stats.nrf_gamma,
        fano_p=stats.probe.fano,
        fano_r=stats.reference.fano,
        mean_np=stats.probe.mean,
        mean_nr=stats.reference.mean,
        k_opt=k,
        delta_e=0.0,
        trials=stats.samples or 0,
        var_p=stats.probe.variance,
        var_r=stats.reference.variance,
        covariance=stats.covariance,
    )


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def estimate_ratio(n_p, n_r, cal: CalibrationRecord):
    """``1 - gamma * n_p / n_r``; raises on any zero reference count."""
    n_p = np.asarray(n_p, dtype=np.float64)
    n_r = np.asarray(n_r, dtype=np.float64)
    if np.any(n_r == 0):
        raise DegenerateDenominatorError("reference count is zero")
    return _scalar_or_array(1.0 - cal.gamma * n_p / n_r)


def estimate_optimized(n_p, n_r, cal: CalibrationRecord):
    """``1 - (n_p - k * (n_r - <N_R>) + dE) / <N_P>``."""
    n_p = np.asarray(n_p, dtype=np.float64)
    n_r = np.asarray(n_r, dtype=np.float64)
    return _scalar_or_array(1.0 - (n_p - cal.k_opt * (n_r - cal.mean_nr) + cal.delta_e) / cal.mean_np)


def estimate_differential(n_p, n_r, cal: CalibrationRecord, reference_mean=None):
    """``(n_r - gamma * n_p) / <N_R>``.

    ``<N_R>`` is the calibrated reference mean unless ``reference_mean`` is
    given, e.g. the reference mean of the same acquisition.
    """
    n_p = np.asarray(n_p, dtype=np.float64)
    n_r = np.asarray(n_r, dtype=np.float64)
    norm = cal.mean_nr if reference_mean is None else float(reference_mean)
    return _scalar_or_array((n_r - cal.gamma * n_p) / norm)


def estimate_single_beam(n_p, n_r, cal: CalibrationRecord):
    """``1 - gamma * n_p / <N_R>``: the reference is replaced by its calibrated mean."""
    n_p = np.asarray(n_p, dtype=np.float64)
    return _scalar_or_array(1.0 - cal.gamma * n_p / cal.mean_nr)


_ESTIMATORS = {
    EstimatorKind.RATIO: estimate_ratio,
    EstimatorKind.OPTIMIZED: estimate_optimized,
    EstimatorKind.DIFFERENTIAL: estimate_differential,
    EstimatorKind.SINGLE_BEAM: estimate_single_beam,
}


def estimate(kind: EstimatorKind, n_p, n_r, cal: CalibrationRecord, **options) -> tuple[np.ndarray, int]:
    """Evaluate ``kind`` on every trial.

    Returns the estimates of the usable trials and the number of trials
    excluded because the ratio estimator met a zero reference count.
    ``options`` are passed to the estimator function.
    """
    kind = EstimatorKind(kind)
    n_p = np.asarray(n_p, dtype=np.float64).reshape(-1)
    n_r = np.asarray(n_r, dtype=np.float64).reshape(-1)
    if kind is EstimatorKind.RATIO:
        keep = n_r != 0
        excluded = int(keep.size - np.count_nonzero(keep))
        return np.asarray(estimate_ratio(n_p[keep], n_r[keep], cal)), excluded
    return np.asarray(_ESTIMATORS[kind](n_p, n_r, cal, **options)), 0


# Closed-form variances ------------------------------------------------------


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def _check_mean_np(mean_np: float) -> float:
    mean_np = float(mean_np)
    if not mean_np > 0:
        raise ArgumentError(f"mean probe photon number must be positive, got {mean_np}")
    return mean_np


def uql_variance(alpha: float, mean_np: float) -> float:
    return alpha * (1.0 - alpha) / mean_np


def ratio_variance(alpha: float, mean_np: float, gamma: float, sigma_gamma: float) -> float:
    """Variance of the ratio estimator for any state, to first order in 1/N."""
    t = 1.0 - alpha
    return uql_variance(alpha, mean_np) + t * t / mean_np * 2.0 * sigma_gamma / gamma


def coherent_pair_variance(alpha: float, mean_np: float, gamma: float) -> float:
    t = 1.0 - alpha
    return uql_variance(alpha, mean_np) + t * t / mean_np * (1.0 + gamma) / gamma


def uncorrelated_variance(alpha: float, mean_np: float, gamma: float, fano_p: float, fano_r: float) -> float:
    """Ratio estimator with independent probe and reference beams."""
    t = 1.0 - alpha
    return uql_variance(alpha, mean_np) + t * t / mean_np * (fano_r / gamma + fano_p)


def twb_ratio_variance(alpha: float, mean_np: float, eta: float) -> float:
    """Twin beam, equal detection efficiency ``eta`` in both arms."""
    t = 1.0 - alpha
    return uql_variance(alpha, mean_np) + 2.0 * t * t / mean_np * (1.0 - eta)


def bccb_variance(alpha: float, mean_np: float) -> float:
    """Balanced classically correlated beams (50:50 split of one beam)."""
    return (1.0 - alpha) * (2.0 - alpha) / mean_np


def optimized_variance_symmetric(alpha: float, mean_np: float, nrf: float, fano: float) -> float:
    """Optimally weighted estimator with symmetric arms (gamma = 1, F_P = F_R = F)."""
    t = 1.0 - alpha
    return uql_variance(alpha, mean_np) + t * t / mean_np * nrf * (2.0 - nrf / fano)


def twb_optimized_variance(alpha: float, mean_np: float, eta: float) -> float:
    """Optimised estimator on a twin beam with ``mu << 1`` and equal efficiencies."""
    t = 1.0 - alpha
    return uql_variance(alpha, mean_np) + t * t / mean_np * (1.0 - eta * eta)


def differential_variance(alpha: float, mean_np: float, gamma: float, sigma_gamma: float, fano_r: float) -> float:
    """Differential estimator for a source with equal local statistics in both arms."""
    return (2.0 * (1.0 - alpha) * sigma_gamma + alpha + (fano_r - 1.0) * alpha * alpha) / (gamma * mean_np)


def single_beam_variance(alpha: float, mean_np: float, fano_p: float) -> float:
    t = 1.0 - alpha
    return uql_variance(alpha, mean_np) + t * t * fano_p / mean_np


def optimized_weight_symmetric(nrf: float, fano: float) -> float:
    """Variance-minimising weight at zero loss for symmetric arms."""
    return 1.0 - nrf / fano


def optimized_variance_for_weight(alpha, mean_np, var_p, var_r, cov, k) -> float:
    """Exact variance of the weighted estimator for a fixed weight ``k``."""
    t = 1.0 - alpha
    var_probe = t * t * var_p + alpha * t * mean_np
    return (var_probe + k * k * var_r - 2.0 * k * t * cov) / (mean_np * mean_np)


def _minimized_optimized_variance(alpha, mean_np, var_p, var_r, cov) -> float:
    # Quadratic a*k^2 + b*k + c in the weight; take its vertex.
    t = 1.0 - alpha
    a = var_r
    b = -2.0 * t * cov
    if a <= 0.0:
        k = 0.0
    else:
        k = -b / (2.0 * a)
    return optimized_variance_for_weight(alpha, mean_np, var_p, var_r, cov, k)


def theory_variance(kind: EstimatorKind, src: SourceModel, cfg: ChannelConfig, alpha: float) -> float:
    """Predicted per-trial variance of ``kind`` for a source seen through ``cfg``.

    Calibration statistics are those of ``cfg`` with the sample removed;
    ``alpha`` is the sample loss during the measurement.
    """
    kind = EstimatorKind(kind)
    alpha = _check_alpha(alpha)
    stats = theoretical_joint_stats(src, cfg.with_alpha(0.0)) if _probe_mean(src, cfg) > 0 else None
    if stats is None or stats.reference.mean <= 0:
        raise UnsupportedCaseError(f"{kind.value} estimator needs non-zero probe and reference means")
    n = stats.probe.mean
    gamma = stats.gamma
    var_p, var_r, cov = stats.probe.variance, stats.reference.variance, stats.covariance
    if kind is EstimatorKind.RATIO:
        return ratio_variance(alpha, n, gamma, stats.nrf_gamma)
    if kind is EstimatorKind.OPTIMIZED:
        return _minimized_optimized_variance(alpha, n, var_p, var_r, cov)
    if kind is EstimatorKind.DIFFERENTIAL:
        t = 1.0 - alpha
        var_probe = t * t * var_p + alpha * t * n
        num = var_r + gamma * gamma * var_probe - 2.0 * gamma * t * cov
        return num / (gamma * n) ** 2
    if kind is EstimatorKind.SINGLE_BEAM:
        return single_beam_variance(alpha, n, stats.probe.fano)
    raise UnsupportedCaseError(f"no variance model for {kind}")


def _probe_mean(src: SourceModel, cfg: ChannelConfig) -> float:
    return source_moments(src)[0] * cfg.eta_p


def bound(kind: BoundKind, alpha: float, mean_np: float) -> float:
    """Reference uncertainty (standard deviation) for ``mean_np`` probe photons."""
    kind = BoundKind(kind)
    alpha = _check_alpha(alpha)
    mean_np = _check_mean_np(mean_np)
    if kind is BoundKind.SNL:
        return mean_np ** -0.5
    if kind is BoundKind.COHERENT:
        return math.sqrt((1.0 - alpha) / mean_np)
    if kind is BoundKind.UQL:
        return math.sqrt(uql_variance(alpha, mean_np))
    if kind is BoundKind.BALANCED_CCB:
        return math.sqrt(bccb_variance(alpha, mean_np))
    raise ArgumentError(f"unknown bound {kind}")


def all_bounds(alpha: float, mean_np: float) -> dict[BoundKind, float]:
    return {kind: bound(kind, alpha, mean_np) for kind in BoundKind}
