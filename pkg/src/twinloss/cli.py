"""Command-line front end: ``twinloss bounds | sweep | calibrate``.

Configuration files are flat ``key = value`` text (``#`` starts a comment)
or a JSON sidecar written by a previous sweep.  Unknown keys are rejected.
Every result file is written atomically next to a JSON sidecar holding the
fully resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .channels import ChannelConfig, SourceKind, SourceModel
from .errors import TwinLossError
from .estimators import BoundKind, all_bounds, calibration_from_stats
from .photostat import PairMoments
from .simlab import (
    STRATEGIES,
    FrameConfig,
    estimate_background,
    generate_frames,
    integrate_and_correct,
    invert_efficiency,
    run_experiment,
)

SCHEMA_VERSION = 1
SWEEP_COLUMNS = (
    "schema_version", "alpha_true", "eta_r", "estimator", "empirical_mean",
    "empirical_std", "empirical_std_err", "theory_std", "u_snl", "u_coh",
    "u_uql", "u_bccb", "exclusions", "seed",
)
BOUNDS_COLUMNS = ("alpha", "u_snl", "u_coh", "u_uql", "u_bccb")
_BOUND_COLUMN = {
    BoundKind.SNL: "u_snl", BoundKind.COHERENT: "u_coh",
    BoundKind.UQL: "u_uql", BoundKind.BALANCED_CCB: "u_bccb",
}
DEFAULT_ALPHAS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.4, 0.7)
DEFAULT_ETA_RS = (0.3, 0.43, 0.49, 0.6, 0.76, 0.9, 1.0)


class ConfigError(TwinLossError, ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass(frozen=True)
class RunConfig:
    """Everything a sweep needs; defaults reproduce the best-efficiency reference setup."""

    source: str = "twin_beam"
    mean_per_mode: float = 2e-9
    split_tau: float = 0.5
    input_fano: float = 1.0
    eta_p: float = 0.76
    eta_r: float = 0.76
    eta_coll: float = 1.0
    alpha: float = 0.02
    roi_pixels: int = 64
    mean_photons_per_region: float = 5e5
    dark_mean: float = 1.0
    read_noise_sigma: float = 5.0
    frames_per_run: int = 200
    runs: int = 10
    calibration_frames: int = 2000
    dark_frames: int = 200
    drift_amplitude: float = 0.0
    estimators: tuple = tuple(STRATEGIES)
    sweep: str = "alpha"
    alphas: tuple = DEFAULT_ALPHAS
    eta_rs: tuple = DEFAULT_ETA_RS
    seed: int = 20180724
    output: str = "sweep.csv"

    def validate(self) -> "RunConfig":
        problems = []
        if self.source not in {k.value for k in SourceKind}:
            problems.append(f"source: unknown kind {self.source!r}")
        for name in ("eta_p", "eta_r", "eta_coll", "alpha"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                problems.append(f"{name}: {value} is outside [0, 1]")
        if not self.eta_p > 0:
            problems.append("eta_p: must be positive")
        if not 0.0 < self.split_tau < 1.0:
            problems.append(f"split_tau: {self.split_tau} is outside (0, 1)")
        if self.input_fano < 0 or 0 < self.input_fano < 1:
            problems.append(f"input_fano: {self.input_fano} must be 0 or >= 1")
        if not self.mean_per_mode > 0:
            problems.append("mean_per_mode: must be positive")
        if not self.mean_photons_per_region > 0:
            problems.append("mean_photons_per_region: must be positive")
        for name in ("roi_pixels", "frames_per_run", "calibration_frames", "dark_frames"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.runs < 2:
            problems.append("runs: at least 2 runs are needed for a spread")
        if self.dark_mean < 0:
            problems.append("dark_mean: must be >= 0")
        if self.read_noise_sigma < 0:
            problems.append("read_noise_sigma: must be >= 0")
        if not 0.0 <= self.drift_amplitude < 1.0:
            problems.append("drift_amplitude: must lie in [0, 1)")
        unknown = [e for e in self.estimators if e not in STRATEGIES]
        if unknown:
            problems.append(f"estimators: unknown {unknown}; choose from {sorted(STRATEGIES)}")
        if not self.estimators:
            problems.append("estimators: empty selection")
        if self.sweep not in ("alpha", "eta_r"):
            problems.append(f"sweep: {self.sweep!r} must be 'alpha' or 'eta_r'")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas) or not self.alphas:
            problems.append("alphas: every value must lie in [0, 1]")
        if any(not 0.0 < e <= 1.0 for e in self.eta_rs) or not self.eta_rs:
            problems.append("eta_rs: every value must lie in (0, 1]")
        if not 0 <= self.seed < 2**64:
            problems.append("seed: must be an unsigned 64-bit integer")
        if problems:
            raise ConfigError(problems)
        return self

    def channel(self, alpha: Optional[float] = None, eta_r: Optional[float] = None) -> ChannelConfig:
        return ChannelConfig(self.eta_p, self.eta_r if eta_r is None else eta_r, self.eta_coll,
                             self.alpha if alpha is None else alpha)

    def frames(self) -> FrameConfig:
        return FrameConfig(self.roi_pixels, self.mean_photons_per_region, self.dark_mean,
                           self.read_noise_sigma, self.frames_per_run, self.runs,
                           self.calibration_frames, self.dark_frames)

    def source_model(self) -> SourceModel:
        """Source whose detected probe region averages ``mean_photons_per_region``."""
        total = self.mean_photons_per_region / self.eta_p
        kind = SourceKind(self.source)
        if kind is SourceKind.TWIN_BEAM:
            return SourceModel.twin_beam_for_mean(total, self.mean_per_mode)
        if kind is SourceKind.INDEPENDENT_THERMAL:
            modes = max(1, int(round(total / self.mean_per_mode)))
            return SourceModel.independent_thermal(total / modes, modes)
        if kind is SourceKind.COHERENT_PAIR:
            return SourceModel.coherent_pair(total)
        if kind is SourceKind.FOCK_PAIR:
            return SourceModel.fock_pair(int(round(total)))
        probe = total
        if self.input_fano == 0:
            probe = round(total / self.split_tau) * self.split_tau
        return SourceModel.split_classical(probe, self.split_tau, self.input_fano)

    def to_json(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
                for f in fields(self)}


_FIELD_TYPES = {f.name: f.default for f in fields(RunConfig)}


def _coerce(name: str, raw, problems: list):
    default = _FIELD_TYPES[name]
    try:
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).split(",") if s.strip()]
            if name == "estimators":
                return tuple(str(s).strip() for s in items)
            return tuple(float(s) for s in items)
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            if isinstance(raw, int):
                return raw
            text = str(raw).strip()
            try:
                return int(text)
            except ValueError:
                value = float(text)
            if value != int(value):
                raise ValueError("not an integer")
            return int(value)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError, OverflowError) as exc:
        problems.append(f"{name}: cannot parse {raw!r} ({exc})")
        return default


def parse_config_text(text: str) -> dict:
    """``key = value`` lines into a raw mapping; duplicate and malformed lines fail."""
    raw, problems = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {line!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            problems.append(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    if problems:
        raise ConfigError(problems)
    return raw


def build_config(raw: dict, overrides: Optional[dict] = None) -> RunConfig:
    """Validate a raw mapping into a :class:`RunConfig`, reporting every problem."""
    merged = dict(raw)
    merged.update(overrides or {})
    problems = [f"{key}: unknown key" for key in merged if key not in _FIELD_TYPES]
    values = {k: _coerce(k, v, problems) for k, v in merged.items() if k in _FIELD_TYPES}
    # Unparseable values fall back to their defaults so the range checks still run.
    config = RunConfig(**values)
    try:
        config.validate()
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return config


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError([f"config {p}: {exc.strerror or exc}"]) from exc
        if p.suffix == ".json":
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"config {p}: invalid JSON ({exc})"]) from exc
            raw = data.get("config", data) if isinstance(data, dict) else {}
        else:
            raw = parse_config_text(text)
    return build_config(raw, overrides)


def atomic_write(path: Path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        directory.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(out: Path) -> Path:
    return Path(out).with_suffix(".json")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else "nan"
    return str(x)


def bounds_table(alphas: Sequence[float], mean_np: float) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BOUNDS_COLUMNS)
    for a in alphas:
        b = all_bounds(a, mean_np)
        writer.writerow([_fmt(float(a))] + [_fmt(b[k]) for k in BoundKind])
    return buf.getvalue()


def cmd_bounds(alphas: Sequence[float], mean_np: float, out: Optional[str] = None) -> str:
    text = bounds_table(alphas, mean_np)
    if out is not None:
        atomic_write(Path(out), text)
    return text


def _point_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1, np.uint64)[0])


def sweep_rows(config: RunConfig) -> list[dict]:
    fcfg = config.frames()
    axis = config.alphas if config.sweep == "alpha" else config.eta_rs
    rows = []
    for i, value in enumerate(axis):
        cfg = config.channel(alpha=value) if config.sweep == "alpha" else config.channel(eta_r=value)
        src = config.source_model()
        seed = _point_seed(config.seed, i)
        for ens in run_experiment(src, cfg, fcfg, config.estimators, seed, config.drift_amplitude):
            row = {
                "schema_version": SCHEMA_VERSION,
                "alpha_true": float(cfg.alpha),
                "eta_r": float(cfg.eta_r),
                "estimator": ens.label,
                "empirical_mean": ens.empirical_mean,
                "empirical_std": ens.empirical_std,
                "empirical_std_err": ens.empirical_std_err,
                "theory_std": ens.theory_std,
                "exclusions": ens.exclusions,
                "seed": seed,
            }
            for kind, column in _BOUND_COLUMN.items():
                row[column] = float(ens.bounds[kind])
            rows.append(row)
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def cmd_sweep(config: RunConfig) -> Path:
    out = Path(config.output)
    text = rows_to_csv(sweep_rows(config))
    sidecar = {"schema_version": SCHEMA_VERSION, "package_version": __version__,
               "command": "sweep", "config": config.to_json()}
    atomic_write(sidecar_path(out), json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    atomic_write(out, text)
    return out


def calibration_report(config: RunConfig, bootstrap: int = 500) -> dict:
    """Sample-free acquisitions, pooled statistics and bootstrap errors over runs.

    Each of the ``runs`` acquisitions holds ``calibration_frames`` frames.
    """
    fcfg = config.frames()
    cfg = config.channel(alpha=0.0)
    src = config.source_model()
    seeds = np.random.SeedSequence(config.seed).spawn(config.runs + 2)
    streams = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
    background = estimate_background(fcfg, streams[0])
    per_run = []
    for rng in streams[2:]:
        counts = integrate_and_correct(generate_frames(src, cfg, fcfg, rng, fcfg.calibration_frames), background)
        per_run.append(PairMoments().update(counts.n_p, counts.n_r))

    twin = SourceKind(config.source) is SourceKind.TWIN_BEAM

    def summary(moments: Sequence[PairMoments]) -> dict:
        pooled = PairMoments()
        for m in moments:
            pooled.merge(m)
        cal = calibration_from_stats(pooled.to_stats())
        eta_r = invert_efficiency(cal, config.eta_coll) if twin else float("nan")
        return {"gamma": cal.gamma, "sigma_gamma": cal.sigma_gamma, "fano_p": cal.fano_p,
                "fano_r": cal.fano_r, "k_opt": cal.k_opt, "eta_r": eta_r,
                # gamma = eta_coll * eta_r / eta_p for a twin beam
                "eta_p": eta_r * config.eta_coll / cal.gamma if twin else float("nan"),
                "mean_np": cal.mean_np, "mean_nr": cal.mean_nr}

    central = summary(per_run)
    boot_rng = streams[1]
    samples = {key: [] for key in central}
    for _ in range(bootstrap):
        pick = boot_rng.integers(0, len(per_run), len(per_run))
        for key, value in summary([per_run[i] for i in pick]).items():
            samples[key].append(value)
    report = {"schema_version": SCHEMA_VERSION, "frames": fcfg.calibration_frames * fcfg.runs,
              "runs": fcfg.runs, "source": config.source, "values": {}, "uncertainties": {}}
    for key, value in central.items():
        report["values"][key] = value if math.isfinite(value) else None
        err = float(np.std(samples[key], ddof=1)) if math.isfinite(value) else float("nan")
        report["uncertainties"][key] = err if math.isfinite(err) else None
    return report


def cmd_calibrate(config: RunConfig, out: Optional[str] = None) -> dict:
    report = calibration_report(config)
    report["config"] = config.to_json()
    if out is not None:
        atomic_write(Path(out), json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers: {exc}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twinloss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value text file or JSON sidecar")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", help="output path")
        p.add_argument("--alpha", type=_float_list, help="comma-separated sample losses")
        p.add_argument("--eta-r", type=_float_list, help="comma-separated reference efficiencies")
        p.add_argument("--estimators", help=f"comma-separated subset of {','.join(STRATEGIES)}")

    b = sub.add_parser("bounds", help="tabulate reference uncertainty bounds")
    b.add_argument("--alpha", type=_float_list, default=[i / 20 for i in range(21)])
    b.add_argument("--mean-np", type=float, default=5e5, help="detected probe photons")
    b.add_argument("--out", help="CSV path (stdout when omitted)")

    common(sub.add_parser("sweep", help="simulate estimator uncertainty over alpha or eta_r"))
    common(sub.add_parser("calibrate", help="calibration report with no sample in the probe arm"))
    return parser


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["output"] = args.out
    if args.alpha is not None:
        if len(args.alpha) == 1 and args.command == "calibrate":
            out["alpha"] = args.alpha[0]
        out["alphas"] = tuple(args.alpha)
    if args.eta_r is not None:
        out["eta_rs"] = tuple(args.eta_r)
        out["sweep"] = "eta_r"
        if len(args.eta_r) == 1:
            out["eta_r"] = args.eta_r[0]
    if args.estimators is not None:
        out["estimators"] = args.estimators
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bounds":
            bad = [a for a in args.alpha if not 0.0 <= a <= 1.0]
            if bad or not args.mean_np > 0:
                raise ConfigError([f"alpha: {a} is outside [0, 1]" for a in bad]
                                  + ([] if args.mean_np > 0 else ["mean-np: must be positive"]))
            text = cmd_bounds(args.alpha, args.mean_np, args.out)
            if args.out is None:
                sys.stdout.write(text)
            return 0
        config = load_config(args.config, _overrides(args))
        if args.command == "sweep":
            path = cmd_sweep(config)
            print(f"wrote {path} and {sidecar_path(path)}")
            return 0
        report = cmd_calibrate(config, args.out)
        if args.out is None:
            sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return 0
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (OSError, TwinLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
