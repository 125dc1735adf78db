"""Synthetic camera experiment: frames, background correction, calibration and runs.

A frame holds three flat regions of interest: the probe region, the
reference region that collects the twins of the probe photons, and a
displaced reference region that sees the same light statistics but no
quantum correlation with the probe.  Each region receives its photons
spread uniformly over its pixels plus Poisson dark counts and Gaussian read
noise.

An experiment calibrates once without the sample, then repeats the
measurement ``runs`` times.  Each run averages every estimator over its
frames; the spread of those run averages is the reported uncertainty, and
all theory values and bounds are scaled to the same run-average level.  The
per-frame spread inside the runs is kept as well (``frame_std``) next to
the per-frame prediction (``theory_frame_std``).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .channels import ChannelConfig, SourceKind, SourceModel, sample_source, thin, theoretical_joint_stats
from .errors import ArgumentError, InconsistentCalibrationError, ShapeError
from .estimators import (
    BoundKind,
    CalibrationRecord,
    EstimatorKind,
    all_bounds,
    calibrate,
    estimate,
    theory_variance,
    uncorrelated_variance,
)
from .photostat import CountPair, RandomStream

THREADS_ENV = "TWINLOSS_THREADS"


@dataclass(frozen=True)
class FrameConfig:
    roi_pixels: int = 64
    mean_photons_per_region: float = 5e5
    dark_mean: float = 1.0
    read_noise_sigma: float = 5.0
    frames_per_run: int = 200
    runs: int = 10
    calibration_frames: int = 2000
    dark_frames: int = 200

    def __post_init__(self):
        for name in ("roi_pixels", "frames_per_run", "runs", "calibration_frames", "dark_frames"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ArgumentError(f"{name} must be a positive integer, got {value}")
        if not self.mean_photons_per_region > 0:
            raise ArgumentError("mean_photons_per_region must be positive")
        if self.dark_mean < 0 or self.read_noise_sigma < 0:
            raise ArgumentError("dark_mean and read_noise_sigma must be >= 0")


@dataclass(frozen=True)
class Frame:
    region_p: np.ndarray
    region_r: np.ndarray
    region_r_displaced: np.ndarray

    def __post_init__(self):
        if not (self.region_p.shape == self.region_r.shape == self.region_r_displaced.shape):
            raise ShapeError("all three regions must have the same number of pixels")


@dataclass(frozen=True)
class FrameBatch:
    """Stack of frames; each region array has shape ``(frames, roi_pixels)``."""

    region_p: np.ndarray
    region_r: np.ndarray
    region_r_displaced: np.ndarray

    def __len__(self):
        return self.region_p.shape[0]

    def __getitem__(self, i) -> Frame:
        return Frame(self.region_p[i], self.region_r[i], self.region_r_displaced[i])

    @classmethod
    def stack(cls, frames: Sequence[Frame]) -> "FrameBatch":
        shapes = {f.region_p.shape for f in frames}
        if len(shapes) != 1:
            raise ShapeError(f"frames have mismatched region sizes: {sorted(shapes)}")
        return cls(
            np.stack([f.region_p for f in frames]),
            np.stack([f.region_r for f in frames]),
            np.stack([f.region_r_displaced for f in frames]),
        )


@dataclass(frozen=True)
class IntegratedCounts:
    """Background-corrected region sums.

    ``n_*`` are real-valued and feed the statistics; ``pairs`` carries the
    same values clamped at zero and rounded to photon numbers.
    """

    n_p: np.ndarray
    n_r: np.ndarray
    n_r_displaced: np.ndarray

    def pairs(self, displaced: bool = False) -> list[CountPair]:
        ref = self.n_r_displaced if displaced else self.n_r
        p = np.rint(np.clip(self.n_p, 0, None)).astype(np.int64)
        r = np.rint(np.clip(ref, 0, None)).astype(np.int64)
        return [CountPair(int(a), int(b)) for a, b in zip(p, r)]

    def rounded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.rint(np.clip(x, 0, None)).astype(np.int64)
                     for x in (self.n_p, self.n_r, self.n_r_displaced))


def drift_profile(frames: int, amplitude: float) -> Optional[np.ndarray]:
    """Slow source drift over one acquisition: a half-period sine hump.

    Brightness rises from 1 to ``1 + amplitude`` mid-acquisition and back,
    so its mean over the acquisition is ``1 + 2 * amplitude / pi``.
    """
    if amplitude == 0.0:
        return None
    t = (np.arange(frames) + 0.5) / frames
    return 1.0 + amplitude * np.sin(np.pi * t)


def _spread(counts: np.ndarray, pixels: int, rng: RandomStream) -> np.ndarray:
    return rng.multinomial(counts, np.full(pixels, 1.0 / pixels)).astype(np.float64)


def _background(shape, fcfg: FrameConfig, rng: RandomStream) -> np.ndarray:
    out = np.zeros(shape)
    if fcfg.dark_mean > 0:
        out += rng.poisson(fcfg.dark_mean, size=shape)
    if fcfg.read_noise_sigma > 0:
        out += rng.normal(0.0, fcfg.read_noise_sigma, size=shape)
    return out


def generate_frames(src: SourceModel, cfg: ChannelConfig, fcfg: FrameConfig,
                    rng: RandomStream, frames: int, drift: Optional[np.ndarray] = None) -> FrameBatch:
    """``frames`` camera frames of one acquisition."""
    n_p, n_r = sample_source(src, rng, frames, drift)
    n_p = thin(n_p, cfg.probe_survival, rng)
    n_r = thin(n_r, cfg.reference_survival, rng)
    # Displaced region: same marginal as the reference, independent of the probe.
    _, n_d = sample_source(src, rng, frames, drift)
    n_d = thin(n_d, cfg.reference_survival, rng)
    shape = (frames, fcfg.roi_pixels)
    regions = []
    for counts in (n_p, n_r, n_d):
        regions.append(_spread(counts, fcfg.roi_pixels, rng) + _background(shape, fcfg, rng))
    return FrameBatch(*regions)


def generate_frame(src: SourceModel, cfg: ChannelConfig, fcfg: FrameConfig, rng: RandomStream) -> Frame:
    return generate_frames(src, cfg, fcfg, rng, 1)[0]


def dark_frames(fcfg: FrameConfig, rng: RandomStream, frames: Optional[int] = None) -> np.ndarray:
    """Frames with the source blocked, shape ``(frames, roi_pixels)``."""
    frames = fcfg.dark_frames if frames is None else frames
    return _background((frames, fcfg.roi_pixels), fcfg, rng)


def estimate_background(fcfg: FrameConfig, rng: RandomStream, frames: Optional[int] = None) -> np.ndarray:
    """Per-pixel mean background from dark frames."""
    return dark_frames(fcfg, rng, frames).mean(axis=0)


def integrate_and_correct(frames, background) -> IntegratedCounts:
    """Sum each region and subtract the summed per-pixel background."""
    if isinstance(frames, Frame):
        frames = FrameBatch.stack([frames])
    elif not isinstance(frames, FrameBatch):
        frames = FrameBatch.stack(list(frames))
    pixels = frames.region_p.shape[1]
    if not (frames.region_r.shape[1] == frames.region_r_displaced.shape[1] == pixels):
        raise ShapeError("regions have mismatched pixel counts")
    background = np.broadcast_to(np.asarray(background, dtype=np.float64), (pixels,))
    offset = float(background.sum())
    return IntegratedCounts(
        frames.region_p.sum(axis=1) - offset,
        frames.region_r.sum(axis=1) - offset,
        frames.region_r_displaced.sum(axis=1) - offset,
    )


# Experiment runner ----------------------------------------------------------


@dataclass(frozen=True)
class Strategy:
    """An estimator together with the reference region it reads."""

    estimator: EstimatorKind
    displaced_reference: bool = False

    @property
    def label(self) -> str:
        if self.displaced_reference:
            return "ratio_bccb" if self.estimator is EstimatorKind.RATIO else f"{self.estimator.value}_displaced"
        return self.estimator.value


STRATEGIES = {
    "ratio": Strategy(EstimatorKind.RATIO),
    "optimized": Strategy(EstimatorKind.OPTIMIZED),
    "differential": Strategy(EstimatorKind.DIFFERENTIAL),
    "single_beam": Strategy(EstimatorKind.SINGLE_BEAM),
    "ratio_bccb": Strategy(EstimatorKind.RATIO, displaced_reference=True),
}


def parse_strategies(names: Iterable) -> list[Strategy]:
    out = []
    for name in names:
        if isinstance(name, Strategy):
            out.append(name)
            continue
        if isinstance(name, EstimatorKind):
            name = name.value
        if name not in STRATEGIES:
            raise ArgumentError(f"unknown estimator {name!r}; choose from {sorted(STRATEGIES)}")
        out.append(STRATEGIES[name])
    if not out:
        raise ArgumentError("at least one estimator must be selected")
    return out


@dataclass(frozen=True)
class TrialEnsemble:
    """Run-level estimates of one strategy and their summary.

    ``theory_std`` and ``bounds`` are standard deviations of a run average
    (per-frame values divided by ``sqrt(frames_per_run)``).
    """

    estimator: EstimatorKind
    alpha_true: float
    estimates: tuple
    empirical_mean: float
    empirical_std: float
    empirical_std_err: float
    theory_std: float
    bounds: dict = field(default_factory=dict)
    exclusions: int = 0
    displaced_reference: bool = False
    frame_std: float = float("nan")
    theory_frame_std: float = float("nan")

    @property
    def label(self) -> str:
        return Strategy(self.estimator, self.displaced_reference).label

    @classmethod
    def from_estimates(cls, strategy: Strategy, alpha_true, estimates, theory_std, bounds,
                       exclusions=0, frame_std=float("nan"),
                       theory_frame_std=float("nan")) -> "TrialEnsemble":
        est = np.asarray(estimates, dtype=np.float64)
        mean, std = summarize(est)
        return cls(strategy.estimator, float(alpha_true), tuple(float(x) for x in est), mean, std,
                   std / math.sqrt(est.size) if est.size > 1 else float("nan"),
                   float(theory_std), dict(bounds), int(exclusions),
                   strategy.displaced_reference, float(frame_std), float(theory_frame_std))


def summarize(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    std = float(values.std(ddof=1)) if values.size > 1 else float("nan")
    return mean, std


@dataclass(frozen=True)
class Calibration:
    """Calibration of the correlated and of the displaced reference region."""

    correlated: CalibrationRecord
    displaced: CalibrationRecord
    background: np.ndarray


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def calibrate_frames(src: SourceModel, cfg: ChannelConfig, fcfg: FrameConfig, rng: RandomStream,
                     frames: Optional[int] = None, background=None) -> Calibration:
    """Sample-free acquisition: estimate background, then calibrate both references."""
    if background is None:
        background = estimate_background(fcfg, rng)
    frames = fcfg.calibration_frames if frames is None else frames
    batch = generate_frames(src, cfg.with_alpha(0.0), fcfg, rng, frames)
    counts = integrate_and_correct(batch, background)
    return Calibration(
        calibrate(counts.n_p, counts.n_r),
        calibrate(counts.n_p, counts.n_r_displaced),
        np.asarray(background),
    )


def _evaluate(strategy: Strategy, counts: IntegratedCounts, cal: Calibration):
    ref = counts.n_r_displaced if strategy.displaced_reference else counts.n_r
    record = cal.displaced if strategy.displaced_reference else cal.correlated
    if strategy.estimator is EstimatorKind.OPTIMIZED:
        # Weight rescaled by a pilot estimate of the transmission from the same run.
        alpha_hat = 1.0 - float(np.mean(counts.n_p)) / record.mean_np
        record = record.scaled_weight(alpha_hat)
    if strategy.estimator is EstimatorKind.DIFFERENTIAL:
        # Normalised by the reference mean of this acquisition: only gamma
        # comes from calibration, so a common source drift cancels.
        return estimate(strategy.estimator, counts.n_p, ref, record, reference_mean=float(np.mean(ref)))
    return estimate(strategy.estimator, counts.n_p, ref, record)


def _run_once(src, cfg, fcfg, strategies, cal, rng, drift):
    batch = generate_frames(src, cfg, fcfg, rng, fcfg.frames_per_run, drift)
    counts = integrate_and_correct(batch, cal.background)
    out = []
    for strategy in strategies:
        values, excluded = _evaluate(strategy, counts, cal)
        out.append((float(values.mean()), float(values.std(ddof=1)), excluded))
    return out


def strategy_theory_variance(strategy: Strategy, src: SourceModel, cfg: ChannelConfig, alpha: float) -> float:
    """Per-frame predicted variance of a strategy."""
    if not strategy.displaced_reference:
        return theory_variance(strategy.estimator, src, cfg, alpha)
    if strategy.estimator is not EstimatorKind.RATIO:
        raise ArgumentError("only the ratio estimator is defined on the displaced reference")
    st = theoretical_joint_stats(src, cfg.with_alpha(0.0))
    return uncorrelated_variance(alpha, st.probe.mean, st.gamma, st.probe.fano, st.reference.fano)


def run_theory_variance(strategy: Strategy, src: SourceModel, cfg: ChannelConfig, alpha: float) -> float:
    """Per-frame variance that sets the spread of run averages.

    With the in-run normalisation the run average of the differential
    estimator equals ``1 - gamma * mean(N_P) / mean(N_R)``, whose spread is
    that of the ratio estimator.
    """
    if strategy.estimator is EstimatorKind.DIFFERENTIAL and not strategy.displaced_reference:
        return theory_variance(EstimatorKind.RATIO, src, cfg, alpha)
    return strategy_theory_variance(strategy, src, cfg, alpha)


def run_experiment(src: SourceModel, cfg: ChannelConfig, fcfg: FrameConfig,
                   estimator_set: Iterable = tuple(STRATEGIES), master_seed: int = 0,
                   drift_amplitude: float = 0.0) -> list[TrialEnsemble]:
    """Calibrate without the sample, then repeat the measurement ``fcfg.runs`` times.

    The sample loss is ``cfg.alpha``.  ``drift_amplitude`` adds a slow drift
    of the source brightness during every measurement run (not during
    calibration).  Runs draw from independent child streams of
    ``master_seed``, so results do not depend on the thread count.
    """
    strategies = parse_strategies(estimator_set)
    seeds = np.random.SeedSequence(int(master_seed)).spawn(fcfg.runs + 1)
    streams = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
    cal = calibrate_frames(src, cfg, fcfg, streams[0])
    drift = drift_profile(fcfg.frames_per_run, drift_amplitude)

    def job(i):
        return i, _run_once(src, cfg, fcfg, strategies, cal, streams[i + 1], drift)

    workers = min(_threads(), fcfg.runs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, range(fcfg.runs)))
    else:
        results = [job(i) for i in range(fcfg.runs)]
    results.sort(key=lambda item: item[0])

    st = theoretical_joint_stats(src, cfg.with_alpha(0.0))
    scale = math.sqrt(fcfg.frames_per_run)
    bounds = {k: v / scale for k, v in all_bounds(cfg.alpha, st.probe.mean).items()}
    ensembles = []
    for j, strategy in enumerate(strategies):
        means = [r[1][j][0] for r in results]
        frame_std = float(np.sqrt(np.mean([r[1][j][1] ** 2 for r in results])))
        excluded = sum(r[1][j][2] for r in results)
        frame_theory = math.sqrt(strategy_theory_variance(strategy, src, cfg, cfg.alpha))
        theory = math.sqrt(run_theory_variance(strategy, src, cfg, cfg.alpha)) / scale
        ensembles.append(TrialEnsemble.from_estimates(
            strategy, cfg.alpha, means, theory, bounds, excluded, frame_std, frame_theory))
    return ensembles


def invert_efficiency(cal: CalibrationRecord, eta_coll: float = 1.0) -> float:
    """Reference-arm detection efficiency from twin-beam calibration statistics.

    Solves ``sigma_gamma = (1 + gamma)/2 - eta_r * eta_coll`` for ``eta_r``.
    Only meaningful for twin-beam light.
    """
    if not 0.0 < eta_coll <= 1.0:
        raise ArgumentError(f"eta_coll must lie in (0, 1], got {eta_coll}")
    eta_r = (0.5 * (1.0 + cal.gamma) - cal.sigma_gamma) / eta_coll
    if not 0.0 <= eta_r <= 1.0:
        raise InconsistentCalibrationError(
            f"inverted efficiency {eta_r:.4f} lies outside [0, 1]; is the source a twin beam?")
    return eta_r


def default_twin_beam(fcfg: FrameConfig, cfg: ChannelConfig, mean_per_mode: float = 2e-9) -> SourceModel:
    """Twin beam whose detected probe region averages ``fcfg.mean_photons_per_region``."""
    if cfg.eta_p <= 0:
        raise ArgumentError("eta_p must be positive to reach a detected photon target")
    return SourceModel.twin_beam_for_mean(fcfg.mean_photons_per_region / cfg.eta_p, mean_per_mode)


def is_twin_beam(src: SourceModel) -> bool:
    return src.kind is SourceKind.TWIN_BEAM
