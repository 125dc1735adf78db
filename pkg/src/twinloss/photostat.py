"""Photon-number samplers and joint count statistics.

Samplers take a :class:`numpy.random.Generator` as their random stream and
return either a scalar (``size=None``) or an ``int64`` array.  Reducers work
on paired probe/reference count arrays and are single-pass over fixed-size
chunks, so very long runs can also be reduced piecewise and merged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ArgumentError, DegenerateInputError, InsufficientDataError, ShapeError

RandomStream = np.random.Generator

# Below this many modes a thermal draw is an explicit sum of per-mode
# geometric draws; at and above it a Gamma-Poisson mixture is used.
MODE_LOOP_LIMIT = 10_000

_CHUNK = 1 << 20
_MODE_BLOCK = 64


def make_stream(seed: int) -> RandomStream:
    """Return a PCG64 generator for a 64-bit seed."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ArgumentError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_streams(seed: int, count: int) -> list[RandomStream]:
    """Independent child streams derived from one master seed."""
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


@dataclass(frozen=True)
class CountPair:
    """Detected photons in the probe and reference regions for one trial."""

    n_p: int
    n_r: int

    def __post_init__(self):
        if self.n_p < 0 or self.n_r < 0:
            raise ArgumentError(f"photon counts must be non-negative, got {self}")

    def __iter__(self):
        return iter((self.n_p, self.n_r))


def pairs_to_arrays(pairs: Iterable[CountPair]) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(pairs)
    n_p = np.fromiter((p.n_p for p in pairs), dtype=np.int64, count=len(pairs))
    n_r = np.fromiter((p.n_r for p in pairs), dtype=np.int64, count=len(pairs))
    return n_p, n_r


def _check_mean(mean: float, name: str = "mean") -> float:
    mean = float(mean)
    if not math.isfinite(mean) or mean < 0:
        raise ArgumentError(f"{name} must be finite and >= 0, got {mean}")
    return mean


def _check_modes(modes: int) -> int:
    if int(modes) != modes or modes < 1:
        raise ArgumentError(f"modes must be a positive integer, got {modes}")
    return int(modes)


def _as_output(values: np.ndarray, size):
    if size is None:
        return int(values.reshape(-1)[0])
    return values


def sample_poisson(mean: float, rng: RandomStream, size=None):
    """Poisson photon number (coherent light)."""
    mean = _check_mean(mean)
    out = rng.poisson(mean, size=1 if size is None else size).astype(np.int64)
    return _as_output(out, size)


def sample_geometric(mean_per_mode: float, rng: RandomStream, size=None):
    """Single-mode thermal (Bose-Einstein) photon number by CDF inversion.

    ``P(n) = mu**n / (1 + mu)**(n + 1)``; with ``q = mu / (1 + mu)`` the
    survival function is ``q**k`` so ``floor(log(U) / log(q))`` is exact.
    """
    mu = _check_mean(mean_per_mode, "mean_per_mode")
    shape = 1 if size is None else size
    if mu == 0.0:
        return _as_output(np.zeros(shape, dtype=np.int64), size)
    u = rng.random(shape)
    log_q = math.log(mu) - math.log1p(mu)
    out = np.floor(np.log1p(-u) / log_q).astype(np.int64)
    return _as_output(out, size)


def _thermal_total(mu: float, modes: int, rng: RandomStream, shape) -> np.ndarray:
    if mu == 0.0:
        return np.zeros(shape, dtype=np.int64)
    if modes < MODE_LOOP_LIMIT:
        total = np.zeros(shape, dtype=np.int64)
        log_q = math.log(mu) - math.log1p(mu)
        flat = total.reshape(-1)
        done = 0
        while done < modes:
            block = min(_MODE_BLOCK, modes - done)
            u = rng.random((flat.size, block))
            flat += np.floor(np.log1p(-u) / log_q).astype(np.int64).sum(axis=1)
            done += block
        return total
    # Negative binomial as a Gamma-mixed Poisson.
    lam = rng.gamma(float(modes), mu, size=shape)
    return rng.poisson(lam).astype(np.int64)


def sample_thermal(mean_per_mode: float, modes: int, rng: RandomStream, size=None):
    """Total photon number of ``modes`` independent thermal modes.

    Marginal is negative binomial with mean ``M*mu`` and variance
    ``M*mu*(1 + mu)``.
    """
    mu = _check_mean(mean_per_mode, "mean_per_mode")
    modes = _check_modes(modes)
    out = _thermal_total(mu, modes, rng, 1 if size is None else size)
    return _as_output(out, size)


def sample_twb_pair(mean_per_mode: float, modes: int, rng: RandomStream, size=None):
    """Photon numbers of a multimode twin beam before any loss.

    Each mode pair carries the same photon number in both arms, so the two
    totals are equal on every draw.  Returns a :class:`CountPair` for
    ``size=None``, otherwise a ``(n_p, n_r)`` tuple of arrays.
    """
    mu = _check_mean(mean_per_mode, "mean_per_mode")
    modes = _check_modes(modes)
    total = _thermal_total(mu, modes, rng, 1 if size is None else size)
    if size is None:
        n = int(total.reshape(-1)[0])
        return CountPair(n, n)
    return total, total.copy()


def sample_fock_pair(n: int, size=None):
    """Product of two Fock states with ``n`` photons each (no fluctuations)."""
    if int(n) != n or n < 0:
        raise ArgumentError(f"Fock photon number must be a non-negative integer, got {n}")
    if size is None:
        return CountPair(int(n), int(n))
    arr = np.full(size, int(n), dtype=np.int64)
    return arr, arr.copy()


@dataclass(frozen=True)
class BeamStats:
    mean: float
    variance: float
    fano: Optional[float]  # None when the mean is zero

    @classmethod
    def from_moments(cls, mean: float, variance: float) -> "BeamStats":
        fano = variance / mean if mean > 0 else None
        return cls(float(mean), float(variance), None if fano is None else float(fano))


@dataclass(frozen=True)
class JointStats:
    """Means, variances and covariance of a probe/reference pair.

    ``gamma`` is the reference-to-probe mean ratio and ``nrf_gamma`` the
    noise reduction factor evaluated at that ``gamma``.  ``samples`` is
    ``None`` for predicted (closed-form) statistics.
    """

    probe: BeamStats
    reference: BeamStats
    covariance: float
    gamma: float
    nrf_gamma: float
    samples: Optional[int] = None

    @property
    def fano_p(self) -> Optional[float]:
        return self.probe.fano

    @property
    def fano_r(self) -> Optional[float]:
        return self.reference.fano

    @property
    def nrf(self) -> float:
        """Noise reduction factor at unit weight (sigma with gamma = 1)."""
        return noise_reduction_factor(
            self.probe.mean, self.reference.mean, self.probe.variance,
            self.reference.variance, self.covariance, 1.0,
        )

    @classmethod
    def from_moments(cls, mean_p, mean_r, var_p, var_r, cov, gamma=None, samples=None):
        if mean_p <= 0:
            raise DegenerateInputError("probe mean must be positive to define gamma")
        g = mean_r / mean_p if gamma is None else float(gamma)
        nrf = noise_reduction_factor(mean_p, mean_r, var_p, var_r, cov, g)
        return cls(
            BeamStats.from_moments(mean_p, var_p),
            BeamStats.from_moments(mean_r, var_r),
            float(cov), float(g), float(nrf), samples,
        )


def noise_reduction_factor(mean_p, mean_r, var_p, var_r, cov, gamma) -> float:
    """Variance of ``N_R - gamma*N_P`` normalised by the mean of ``N_R + gamma*N_P``."""
    denom = mean_r + gamma * mean_p
    if denom <= 0:
        raise DegenerateInputError("noise reduction factor undefined for zero total mean")
    return (var_r + gamma * gamma * var_p - 2.0 * gamma * cov) / denom


class PairMoments:
    """Streaming first and second moments of paired counts.

    Chunks are reduced with a two-pass centred sum and combined with the
    pairwise update of Chan, Golub and LeVeque, so large offsets (means near
    1e9) do not cancel catastrophically.
    """

    __slots__ = ("n", "mean_p", "mean_r", "m2_p", "m2_r", "c_pr")

    def __init__(self):
        self.n = 0
        self.mean_p = 0.0
        self.mean_r = 0.0
        self.m2_p = 0.0
        self.m2_r = 0.0
        self.c_pr = 0.0

    def update(self, n_p, n_r) -> "PairMoments":
        x = np.asarray(n_p, dtype=np.float64).reshape(-1)
        y = np.asarray(n_r, dtype=np.float64).reshape(-1)
        if x.shape != y.shape:
            raise ShapeError(f"probe and reference lengths differ: {x.size} vs {y.size}")
        for start in range(0, x.size, _CHUNK):
            xs = x[start:start + _CHUNK]
            ys = y[start:start + _CHUNK]
            part = PairMoments()
            part.n = xs.size
            part.mean_p = float(xs.mean())
            part.mean_r = float(ys.mean())
            dx = xs - part.mean_p
            dy = ys - part.mean_r
            part.m2_p = float(dx @ dx)
            part.m2_r = float(dy @ dy)
            part.c_pr = float(dx @ dy)
            self.merge(part)
        return self

    def merge(self, other: "PairMoments") -> "PairMoments":
        if other.n == 0:
            return self
        if self.n == 0:
            for name in self.__slots__:
                setattr(self, name, getattr(other, name))
            return self
        n = self.n + other.n
        dp = other.mean_p - self.mean_p
        dr = other.mean_r - self.mean_r
        w = self.n * other.n / n
        self.m2_p += other.m2_p + dp * dp * w
        self.m2_r += other.m2_r + dr * dr * w
        self.c_pr += other.c_pr + dp * dr * w
        self.mean_p += dp * other.n / n
        self.mean_r += dr * other.n / n
        self.n = n
        return self

    def to_stats(self, gamma_override: Optional[float] = None) -> JointStats:
        if self.n < 2:
            raise InsufficientDataError(f"need at least 2 pairs, got {self.n}")
        if self.mean_p <= 0:
            raise DegenerateInputError("probe mean is zero; gamma is undefined")
        dof = self.n - 1
        return JointStats.from_moments(
            self.mean_p, self.mean_r, self.m2_p / dof, self.m2_r / dof,
            self.c_pr / dof, gamma=gamma_override, samples=self.n,
        )


PairInput = Union[np.ndarray, Sequence[int]]


def reduce_stats(n_p: PairInput, n_r: PairInput, gamma_override: Optional[float] = None) -> JointStats:
    """Sample statistics (unbiased, n-1 denominators) of paired counts."""
    return PairMoments().update(n_p, n_r).to_stats(gamma_override)


def reduce_pairs(pairs: Iterable[CountPair], gamma_override: Optional[float] = None) -> JointStats:
    return reduce_stats(*pairs_to_arrays(pairs), gamma_override=gamma_override)
