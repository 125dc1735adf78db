"""Two-beam sources, loss channels and their predicted count statistics.

Every loss in the model (sample absorption, detector inefficiency, imperfect
collection of correlated photons) is an independent binomial thinning, so a
chain of losses on one arm collapses to a single thinning with the product
survival probability.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ArgumentError, DegenerateSplitError
from .photostat import (
    CountPair,
    JointStats,
    RandomStream,
    _thermal_total,
    sample_fock_pair,
)


class SourceKind(str, enum.Enum):
    TWIN_BEAM = "twin_beam"
    COHERENT_PAIR = "coherent_pair"
    FOCK_PAIR = "fock_pair"
    SPLIT_CLASSICAL = "split_classical"
    INDEPENDENT_THERMAL = "independent_thermal"


_RELEVANT = {
    SourceKind.TWIN_BEAM: {"mean_per_mode", "modes"},
    SourceKind.INDEPENDENT_THERMAL: {"mean_per_mode", "modes"},
    SourceKind.COHERENT_PAIR: {"probe_mean", "reference_mean"},
    SourceKind.FOCK_PAIR: {"fock_n"},
    SourceKind.SPLIT_CLASSICAL: {"probe_mean", "split_tau", "input_fano"},
}
_REQUIRED = {
    SourceKind.TWIN_BEAM: {"mean_per_mode", "modes"},
    SourceKind.INDEPENDENT_THERMAL: {"mean_per_mode", "modes"},
    SourceKind.COHERENT_PAIR: {"probe_mean"},
    SourceKind.FOCK_PAIR: {"fock_n"},
    SourceKind.SPLIT_CLASSICAL: {"probe_mean", "split_tau", "input_fano"},
}
_OPTIONAL_FIELDS = ("mean_per_mode", "modes", "probe_mean", "reference_mean",
                    "fock_n", "split_tau", "input_fano")


@dataclass(frozen=True)
class SourceModel:
    """Declarative description of a two-beam photon source.

    Only the fields relevant to ``kind`` may be set.  For ``SPLIT_CLASSICAL``
    ``probe_mean`` is the mean photon number sent to the probe arm, so the
    beam before the splitter carries ``probe_mean / split_tau`` photons with
    Fano factor ``input_fano``.  ``reference_mean`` (coherent pairs only)
    defaults to ``probe_mean``.
    """

    kind: SourceKind
    mean_per_mode: Optional[float] = None
    modes: Optional[int] = None
    probe_mean: Optional[float] = None
    reference_mean: Optional[float] = None
    fock_n: Optional[int] = None
    split_tau: Optional[float] = None
    input_fano: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SourceKind(self.kind))
        given = {f for f in _OPTIONAL_FIELDS if getattr(self, f) is not None}
        extra = given - _RELEVANT[self.kind]
        missing = _REQUIRED[self.kind] - given
        if extra:
            raise ArgumentError(f"{self.kind.value} source does not take {sorted(extra)}")
        if missing:
            raise ArgumentError(f"{self.kind.value} source requires {sorted(missing)}")
        for name in ("mean_per_mode", "probe_mean", "reference_mean", "input_fano"):
            value = getattr(self, name)
            if value is not None and (not math.isfinite(value) or value < 0):
                raise ArgumentError(f"{name} must be finite and >= 0, got {value}")
        if self.modes is not None and (int(self.modes) != self.modes or self.modes < 1):
            raise ArgumentError(f"modes must be a positive integer, got {self.modes}")
        if self.fock_n is not None and (int(self.fock_n) != self.fock_n or self.fock_n < 0):
            raise ArgumentError(f"fock_n must be a non-negative integer, got {self.fock_n}")
        if self.split_tau is not None and not 0.0 < self.split_tau < 1.0:
            raise DegenerateSplitError(f"split_tau must lie strictly inside (0, 1), got {self.split_tau}")
        if self.input_fano is not None and 0.0 < self.input_fano < 1.0:
            # A sub-Poissonian input of arbitrary mean has no exact sampler here.
            raise ArgumentError("input_fano must be 0 (Fock) or >= 1")
        if self.kind is SourceKind.SPLIT_CLASSICAL and self.input_fano == 0.0:
            total = self.probe_mean / self.split_tau
            if abs(total - round(total)) > 1e-9:
                raise ArgumentError("a Fock input needs an integer photon number before the split")

    @classmethod
    def twin_beam(cls, mean_per_mode: float, modes: int) -> "SourceModel":
        return cls(SourceKind.TWIN_BEAM, mean_per_mode=mean_per_mode, modes=int(modes))

    @classmethod
    def independent_thermal(cls, mean_per_mode: float, modes: int) -> "SourceModel":
        return cls(SourceKind.INDEPENDENT_THERMAL, mean_per_mode=mean_per_mode, modes=int(modes))

    @classmethod
    def coherent_pair(cls, probe_mean: float, reference_mean: Optional[float] = None) -> "SourceModel":
        return cls(SourceKind.COHERENT_PAIR, probe_mean=probe_mean, reference_mean=reference_mean)

    @classmethod
    def fock_pair(cls, n: int) -> "SourceModel":
        return cls(SourceKind.FOCK_PAIR, fock_n=int(n))

    @classmethod
    def split_classical(cls, probe_mean: float, tau: float = 0.5, input_fano: float = 1.0) -> "SourceModel":
        return cls(SourceKind.SPLIT_CLASSICAL, probe_mean=probe_mean, split_tau=tau, input_fano=input_fano)

    @classmethod
    def twin_beam_for_mean(cls, total_mean: float, mean_per_mode: float = 2e-9) -> "SourceModel":
        """Twin beam whose arms each carry ``total_mean`` photons on average."""
        modes = max(1, int(round(total_mean / mean_per_mode)))
        return cls.twin_beam(total_mean / modes, modes)


@dataclass(frozen=True)
class ChannelConfig:
    """Efficiencies and sample loss; all values in [0, 1].

    The probe arm survives with ``(1 - alpha) * eta_p``; the reference arm
    with ``eta_coll * eta_r``.
    """

    eta_p: float = 1.0
    eta_r: float = 1.0
    eta_coll: float = 1.0
    alpha: float = 0.0

    def __post_init__(self):
        for name in ("eta_p", "eta_r", "eta_coll", "alpha"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ArgumentError(f"{name} must lie in [0, 1], got {value}")

    @property
    def probe_survival(self) -> float:
        return (1.0 - self.alpha) * self.eta_p

    @property
    def reference_survival(self) -> float:
        return self.eta_coll * self.eta_r

    def with_alpha(self, alpha: float) -> "ChannelConfig":
        return replace(self, alpha=alpha)


def _check_survival(survival: float) -> float:
    survival = float(survival)
    if not 0.0 <= survival <= 1.0:
        raise ArgumentError(f"survival probability must lie in [0, 1], got {survival}")
    return survival


def thin(count, survival: float, rng: RandomStream):
    """Binomial thinning: each photon independently survives with ``survival``."""
    survival = _check_survival(survival)
    arr = np.asarray(count, dtype=np.int64)
    if np.any(arr < 0):
        raise ArgumentError("counts must be non-negative")
    out = np.asarray(rng.binomial(arr, survival), dtype=np.int64)
    if np.ndim(count) == 0:
        return int(out)
    return out


def apply_channel(pair_or_p, n_r=None, cfg: Optional[ChannelConfig] = None, rng: Optional[RandomStream] = None):
    """Apply sample loss and detection losses to a count pair.

    Accepts ``apply_channel(CountPair, cfg, rng)`` or the array form
    ``apply_channel(n_p, n_r, cfg, rng)``.
    """
    if isinstance(pair_or_p, CountPair):
        cfg, rng = n_r, cfg
        return CountPair(
            thin(pair_or_p.n_p, cfg.probe_survival, rng),
            thin(pair_or_p.n_r, cfg.reference_survival, rng),
        )
    return thin(pair_or_p, cfg.probe_survival, rng), thin(n_r, cfg.reference_survival, rng)


def split_classical(input_count, tau: float, rng: RandomStream):
    """Split one beam on a beam splitter with probe fraction ``tau``."""
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise DegenerateSplitError(f"tau must lie strictly inside (0, 1), got {tau}")
    n = np.asarray(input_count, dtype=np.int64)
    probe = np.asarray(rng.binomial(n, tau), dtype=np.int64)
    if np.ndim(input_count) == 0:
        return CountPair(int(probe), int(n - probe))
    return probe, n - probe


def _sample_input_beam(src: SourceModel, rng: RandomStream, shape, scale=None) -> np.ndarray:
    mean = src.probe_mean / src.split_tau
    if scale is not None:
        mean = mean * scale
    fano = src.input_fano
    if fano == 0.0:
        if scale is not None:
            raise ArgumentError("a Fock input cannot be scaled by a drift")
        return np.full(shape, int(round(mean)), dtype=np.int64)
    if fano == 1.0:
        return rng.poisson(mean, size=shape).astype(np.int64)
    excess = fano - 1.0
    return rng.poisson(rng.gamma(mean / excess, excess, size=shape)).astype(np.int64)


def _scaled_thermal(src: SourceModel, rng: RandomStream, size: int, scale) -> np.ndarray:
    if scale is None:
        return _thermal_total(src.mean_per_mode, src.modes, rng, size)
    # Brightness drift: every mode's occupation is multiplied by ``scale``.
    lam = rng.gamma(float(src.modes), src.mean_per_mode, size=size) * scale
    return rng.poisson(lam).astype(np.int64)


def sample_source(src: SourceModel, rng: RandomStream, size: int, scale=None):
    """Undetected photon numbers ``(n_p, n_r)`` for ``size`` trials.

    ``scale`` optionally multiplies the source brightness per trial (an
    array of length ``size``); it emulates a drifting source and is common
    to both arms.  Drifting thermal sources are always drawn as
    Gamma-Poisson mixtures.
    """
    kind = src.kind
    if scale is not None:
        scale = np.asarray(scale, dtype=np.float64)
        if scale.shape != (size,) or np.any(scale < 0):
            raise ArgumentError("scale must be a non-negative array with one entry per trial")
    if kind is SourceKind.TWIN_BEAM:
        total = _scaled_thermal(src, rng, size, scale)
        return total, total.copy()
    if kind is SourceKind.INDEPENDENT_THERMAL:
        return _scaled_thermal(src, rng, size, scale), _scaled_thermal(src, rng, size, scale)
    if kind is SourceKind.COHERENT_PAIR:
        ref_mean = src.probe_mean if src.reference_mean is None else src.reference_mean
        s = 1.0 if scale is None else scale
        return (rng.poisson(src.probe_mean * s, size=size).astype(np.int64),
                rng.poisson(ref_mean * s, size=size).astype(np.int64))
    if kind is SourceKind.FOCK_PAIR:
        if scale is not None:
            raise ArgumentError("a Fock pair cannot be scaled by a drift")
        return sample_fock_pair(src.fock_n, size=size)
    if kind is SourceKind.SPLIT_CLASSICAL:
        return split_classical(_sample_input_beam(src, rng, size, scale), src.split_tau, rng)
    raise ArgumentError(f"unknown source kind {kind}")


def simulate_pairs(src: SourceModel, cfg: ChannelConfig, rng: RandomStream, size: int, scale=None):
    """Detected ``(n_p, n_r)`` arrays: source draw followed by the channel."""
    n_p, n_r = sample_source(src, rng, size, scale)
    return apply_channel(n_p, n_r, cfg, rng)


def source_moments(src: SourceModel) -> tuple[float, float, float, float, float]:
    """``(mean_p, mean_r, var_p, var_r, cov)`` of the undetected photon numbers."""
    kind = src.kind
    if kind in (SourceKind.TWIN_BEAM, SourceKind.INDEPENDENT_THERMAL):
        mean = src.modes * src.mean_per_mode
        var = mean * (1.0 + src.mean_per_mode)
        cov = var if kind is SourceKind.TWIN_BEAM else 0.0
        return mean, mean, var, var, cov
    if kind is SourceKind.COHERENT_PAIR:
        ref_mean = src.probe_mean if src.reference_mean is None else src.reference_mean
        return src.probe_mean, ref_mean, src.probe_mean, ref_mean, 0.0
    if kind is SourceKind.FOCK_PAIR:
        return float(src.fock_n), float(src.fock_n), 0.0, 0.0, 0.0
    if kind is SourceKind.SPLIT_CLASSICAL:
        tau = src.split_tau
        m = src.probe_mean / tau
        v = src.input_fano * m
        # Multinomial partition of a random total.
        return (tau * m, (1 - tau) * m,
                tau * tau * v + tau * (1 - tau) * m,
                (1 - tau) ** 2 * v + tau * (1 - tau) * m,
                tau * (1 - tau) * (v - m))
    raise ArgumentError(f"unknown source kind {kind}")


def thinned_moments(mean_p, mean_r, var_p, var_r, cov, q_p, q_r):
    """Moments after independent binomial thinning of each arm."""
    return (
        q_p * mean_p,
        q_r * mean_r,
        q_p * q_p * var_p + q_p * (1 - q_p) * mean_p,
        q_r * q_r * var_r + q_r * (1 - q_r) * mean_r,
        q_p * q_r * cov,
    )


def theoretical_joint_stats(src: SourceModel, cfg: ChannelConfig) -> JointStats:
    """Closed-form statistics of the detected pair for any source and channel."""
    moments = thinned_moments(*source_moments(src), cfg.probe_survival, cfg.reference_survival)
    return JointStats.from_moments(*moments)


def fano_after_loss(fano_source: float, eta: float) -> float:
    """Fano factor measured through a channel of efficiency ``eta``."""
    return eta * fano_source + 1.0 - eta


def lossy_probe_variance(mean_np: float, fano_p: float, alpha: float) -> float:
    """Variance of the probe count behind a sample of loss ``alpha``.

    ``mean_np`` and ``fano_p`` refer to the probe without the sample.
    """
    t = 1.0 - alpha
    return (t * t * (fano_p - 1.0) + t) * mean_np


def nrf_decomposition(gamma: float, nrf: float, fano_p: float, fano_r: float) -> float:
    """``sigma_gamma`` rebuilt from the unit-weight NRF and the two Fano factors.

    Follows from the NRF definition with ``Var N_R = F_R * gamma * <N_P>``
    and ``Var N_P = F_P * <N_P>``; the excess-noise term vanishes at
    ``gamma = 1``.
    """
    return 0.5 * (gamma + 1.0) * nrf + 0.5 * (gamma - 1.0) * (fano_p - fano_r)


def split_relations(tau: float) -> tuple[float, float]:
    """``(gamma, sigma_gamma)`` of a beam split with probe fraction ``tau``."""
    if not 0.0 < tau < 1.0:
        raise DegenerateSplitError(f"tau must lie strictly inside (0, 1), got {tau}")
    return 1.0 / tau - 1.0, 0.5 / tau


def twin_beam_nrf(gamma: float, eta_r: float, eta_coll: float = 1.0) -> float:
    """Noise reduction factor of a detected twin beam."""
    return 0.5 * (1.0 + gamma) - eta_r * eta_coll
