"""Command-line entry points driven by an INI run configuration.

Commands: ``solve-equilibrium``, ``assess-stability``, ``scan-k``,
``find-growing-mode`` and ``selftest``.  Exit codes: 0 stable or success,
2 unstable, 3 marginal, 1 error (with ``error.json`` in the output
directory).  Every artifact carries the hash of the resolved configuration.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .equilibrium import solve_picard, write_equilibrium
from .geometry import CrossSectionGrid, ToroidalFrame, VelocityQuadrature
from .operators import OperatorError, TrajectoryBackend
from .profiles import FAMILIES, MuProfile, make_profile
from .stability import assess, config_hash, default_backend, estimate_k0, scan_K

logger = logging.getLogger("torstab")

EXIT_OK, EXIT_ERROR, EXIT_UNSTABLE, EXIT_MARGINAL = 0, 1, 2, 3
VERDICT_EXIT = {"stable": EXIT_OK, "unstable": EXIT_UNSTABLE, "marginal": EXIT_MARGINAL}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Resolved run configuration; ``as_dict`` is what the hash covers."""

    a: float = 3.0
    n_r: int = 16
    n_theta: int = 16
    v_max: float | None = None
    n_perp: int = 48
    n_par: int = 96
    profile: dict = field(default_factory=lambda: {"family": "vacuum"})
    dt: float = 1e-2
    sample_dt: float = 0.05
    ergodic_horizon: float = 200.0
    cache_horizon: float = 40.0
    seeds_log2: int = 11
    tol_picard: float = 1e-10
    max_iter: int = 200
    damping: float = 1.0
    purely_magnetic: bool = False
    tol_eig: float | None = None
    tol_residual: float = 1e-4
    tol_vlasov: float = 1e-3
    lambda_min: float = 1e-2
    lambda_max: float = 1e2
    lambda_points: int = 9
    k_values: tuple = (0.0, 0.5, 1.0, 2.0, 4.0)
    truncation: int = 16
    panel_log2: int = 16
    seed: int = 0
    plots: bool = True

    def __post_init__(self):
        for name in ("tol_picard", "tol_residual", "tol_vlasov", "dt", "sample_dt", "ergodic_horizon",
                     "cache_horizon"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.tol_eig is not None and not self.tol_eig > 0:
            raise ConfigError("tol_eig must be positive")
        if not self.a > 1:
            raise ConfigError("major radius a must exceed 1")
        if not 0 < self.lambda_min < self.lambda_max:
            raise ConfigError("need 0 < lambda_min < lambda_max")
        if self.lambda_points < 2 or self.truncation < 1:
            raise ConfigError("lambda_points >= 2 and truncation >= 1 are required")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.build_profile()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["k_values"] = list(self.k_values)
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.as_dict())

    def grid(self) -> CrossSectionGrid:
        return CrossSectionGrid(ToroidalFrame(self.a), self.n_r, self.n_theta)

    def build_profile(self) -> MuProfile:
        spec = dict(self.profile)
        family = spec.pop("family", "vacuum")
        if family not in FAMILIES:
            raise ConfigError(f"unknown profile family {family!r}")
        kw = {k: spec.pop(k) for k in ("gamma", "c_mu", "tilt", "ratio") if k in spec}
        if "K" in spec:
            kw["k"] = spec.pop("K")
        try:
            return make_profile(family, **kw, **spec)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def rule(self, profile) -> VelocityQuadrature | None:
        if self.v_max is None:
            return None
        return VelocityQuadrature.cylindrical(self.v_max, self.n_perp, self.n_par)

    def trajectory_settings(self) -> dict:
        return {"seeds_log2": self.seeds_log2, "seed": int(self.seed % 2**32), "dt": self.dt,
                "sample_dt": self.sample_dt, "ergodic_horizon": self.ergodic_horizon,
                "cache_horizon": self.cache_horizon}

    def lambda_grid(self) -> np.ndarray:
        return np.logspace(np.log10(self.lambda_min), np.log10(self.lambda_max), self.lambda_points)


_FLOAT_KEYS = {
    ("frame", "a"): "a",
    ("velocity", "v_max"): "v_max",
    ("trajectory", "dt"): "dt",
    ("trajectory", "sample_dt"): "sample_dt",
    ("trajectory", "ergodic_horizon"): "ergodic_horizon",
    ("trajectory", "cache_horizon"): "cache_horizon",
    ("solver", "tol_picard"): "tol_picard",
    ("solver", "damping"): "damping",
    ("solver", "tol_eig"): "tol_eig",
    ("solver", "tol_residual"): "tol_residual",
    ("solver", "tol_vlasov"): "tol_vlasov",
    ("lambda", "min"): "lambda_min",
    ("lambda", "max"): "lambda_max",
}
_INT_KEYS = {
    ("grid", "n_r"): "n_r",
    ("grid", "n_theta"): "n_theta",
    ("velocity", "n_perp"): "n_perp",
    ("velocity", "n_par"): "n_par",
    ("trajectory", "seeds_log2"): "seeds_log2",
    ("solver", "max_iter"): "max_iter",
    ("lambda", "points"): "lambda_points",
    ("mode", "truncation"): "truncation",
    ("mode", "panel_log2"): "panel_log2",
    ("run", "seed"): "seed",
}
_BOOL_KEYS = {("solver", "purely_magnetic"): "purely_magnetic", ("run", "plots"): "plots"}


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse an INI file into a :class:`RunConfig`; unknown keys are errors."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
    kw = {}
    known = set(_FLOAT_KEYS) | set(_INT_KEYS) | set(_BOOL_KEYS)
    try:
        for sec in parser.sections():
            for key, raw in parser.items(sec):
                loc = (sec, key)
                if sec == "profile":
                    continue
                if sec == "scan" and key == "k":
                    kw["k_values"] = tuple(float(x) for x in raw.replace(",", " ").split())
                elif loc in _FLOAT_KEYS:
                    kw[_FLOAT_KEYS[loc]] = None if raw.strip().lower() in ("", "auto", "none") else float(raw)
                elif loc in _INT_KEYS:
                    kw[_INT_KEYS[loc]] = int(raw)
                elif loc in _BOOL_KEYS:
                    kw[_BOOL_KEYS[loc]] = parser.getboolean(sec, key)
                elif loc not in known:
                    raise ConfigError(f"unknown config key [{sec}] {key}")
        if parser.has_section("profile"):
            prof = {}
            for key, raw in parser.items("profile"):
                name = "K" if key == "k" else key
                prof[name] = raw.strip() if key == "family" else float(raw)
            kw["profile"] = prof
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc
    kw.update(overrides or {})
    return RunConfig(**kw)


# ---------------------------------------------------------------- commands


def _write_json(path: Path, data: dict):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_json_default)


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _solve(cfg: RunConfig):
    profile = cfg.build_profile()
    eq = solve_picard(profile, cfg.grid(), tol=cfg.tol_picard, max_iter=cfg.max_iter,
                      purely_magnetic=cfg.purely_magnetic, damping=cfg.damping, rule=cfg.rule(profile))
    return profile, eq


def cmd_solve_equilibrium(cfg: RunConfig, out: Path) -> int:
    _, eq = _solve(cfg)
    write_equilibrium(eq, out / "equilibrium", cfg.hash)
    if cfg.plots:
        from .plotting import plot_equilibrium

        plot_equilibrium(eq, out / "equilibrium.png", cfg.hash)
    return EXIT_OK


def cmd_assess_stability(cfg: RunConfig, out: Path) -> int:
    profile, eq = _solve(cfg)
    write_equilibrium(eq, out / "equilibrium", cfg.hash)
    backend = default_backend(eq, profile, **cfg.trajectory_settings())
    report = assess(eq, profile, backend=backend, tol_eig=cfg.tol_eig, hash_value=cfg.hash)
    _write_json(out / "report.json", report.to_dict())
    if cfg.plots:
        from .plotting import plot_equilibrium

        plot_equilibrium(eq, out / "equilibrium.png", cfg.hash)
    logger.info("verdict %s, kappa %.6g (tolerance %.3g)", report.verdict, report.kappa, report.tol_eig)
    return VERDICT_EXIT[report.verdict]


SCAN_COLUMNS = ("K", "witness_form", "one", "I", "II", "III", "kappa", "sup_a_phi", "verdict",
                "picard_iterations", "seconds", "error")


def cmd_scan_k(cfg: RunConfig, out: Path) -> int:
    profile = cfg.build_profile()
    rows = scan_K(profile, cfg.k_values, cfg.grid(), purely_magnetic=cfg.purely_magnetic, tol=cfg.tol_picard)
    with open(out / "scan.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash}\n")
        writer = csv.DictWriter(fh, fieldnames=SCAN_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    summary = {"config_hash": cfg.hash, "k0_estimate": estimate_k0(rows), "rows": len(rows),
               "failed_rows": sum("error" in r for r in rows),
               "sup_a_phi_max": max((r.get("sup_a_phi", 0.0) for r in rows), default=0.0)}
    _write_json(out / "scan.json", summary)
    if cfg.plots:
        from .plotting import plot_scan

        plot_scan(rows, out / "scan.png", cfg.hash)
    return EXIT_ERROR if summary["failed_rows"] == len(rows) else EXIT_OK


def cmd_find_growing_mode(cfg: RunConfig, out: Path) -> int:
    from .modefinder import ModeProblem, ModeSearchError, find_crossing, reconstruct_and_verify

    profile, eq = _solve(cfg)
    backend = TrajectoryBackend(eq, profile, with_vector=True, **cfg.trajectory_settings())
    problem = ModeProblem(eq, profile, backend, n=cfg.truncation)
    try:
        crossing = find_crossing(problem, cfg.lambda_grid())
    except ModeSearchError as exc:
        _write_json(out / "spectrum.json", {"config_hash": cfg.hash, "table": exc.table})
        raise
    mode = reconstruct_and_verify(problem, crossing, maxwell_tol=cfg.tol_residual, vlasov_tol=cfg.tol_vlasov,
                                  panel_log2=cfg.panel_log2)
    mode.write_json(out / "mode.json", cfg.hash)
    mode.write_fields_csv(eq.grid, out / "mode_fields.csv", cfg.hash)
    _write_json(out / "spectrum.json", {"config_hash": cfg.hash, "table": crossing["table"]})
    if cfg.plots:
        from .plotting import plot_mode, plot_spectrum

        plot_spectrum(crossing["table"], cfg.truncation, out / "spectrum.png", cfg.hash, mode.lam)
        plot_mode(mode, eq.grid, out / "mode.png", cfg.hash)
    if not mode.accepted:
        raise RuntimeError(f"mode candidate at lambda {mode.lam:.6g} failed its residual checks")
    return EXIT_OK


def cmd_selftest(cfg: RunConfig, out: Path) -> int:
    from .selftest import run_selftest

    result = run_selftest()
    result["config_hash"] = cfg.hash
    _write_json(out / "selftest.json", result)
    for c in result["checks"]:
        print(f"{'PASS' if c['ok'] else 'FAIL'}  {c['name']}: {c['value']:.3g} (limit {c['limit']:.3g})")
    return EXIT_OK if result["passed"] else EXIT_ERROR


COMMANDS = {
    "solve-equilibrium": cmd_solve_equilibrium,
    "assess-stability": cmd_assess_stability,
    "scan-k": cmd_scan_k,
    "find-growing-mode": cmd_find_growing_mode,
    "selftest": cmd_selftest,
}


def _set_threads(n: int | None):
    if not n:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="torstab", description="Spectral stability of toroidal Vlasov-Maxwell equilibria")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=None, help="worker threads for the trajectory kernels")
    p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed overriding [run] seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, cfg: RunConfig, out: Path) -> int:
    """Run one command; failures become exit code 1 with ``error.json``."""
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        code = COMMANDS[command](cfg, out)
    except Exception as exc:  # every failure is reported as a structured error
        err = {"config_hash": cfg.hash, "command": command, "error": type(exc).__name__, "message": str(exc),
               "traceback": traceback.format_exc()}
        if isinstance(exc, OperatorError) and exc.spectrum is not None:
            err["spectrum"] = np.asarray(exc.spectrum).tolist()
        for attr in ("guidance", "history"):
            if getattr(exc, attr, None):
                err[attr] = getattr(exc, attr)
        _write_json(out / "error.json", err)
        logger.error("%s failed: %s", command, exc)
        return EXIT_ERROR
    logger.info("%s finished in %.1f s (exit %d)", command, time.perf_counter() - t0, code)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"seed": args.seed} if args.seed is not None else {}
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        args.out.mkdir(parents=True, exist_ok=True)
        _write_json(args.out / "error.json", {"error": "ConfigError", "message": str(exc)})
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _set_threads(args.threads)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "config.json", {"config_hash": cfg.hash, "config": cfg.as_dict()})
    return run(args.command, cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
