"""Command-line front end.

    anisofield simulate|verify|estimate --config <path> [--seed S] [--out DIR] [--threads T]

Exit codes: 0 pass, 1 statistical violation, 2 invalid config, 3 I/O error.
The default output directory comes from ``ANISOFIELD_OUT_DIR`` (else the
current directory).
"""
import argparse
import json
import math
import os
import sys

import numpy as np

from . import io as fio
from .lepage import (AlphaField, HarmonizableOS, IsotropicMixture, density_from_dict,
                     envelope_integral, fdd_invariance_test, kernel_from_dict,
                     simulate_field)
from .quasi_metric import NumericError, QuasiMetricSpec, ScalingMatrix
from .regularity import directional_exponents, fit_report, holder_membership, modulus_profile
from .shot_noise import rate_study
from .subgaussian import SOURCES, mgf_check, sup_partial_sum_tail, tail_check

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "ANISOFIELD_OUT_DIR"
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema

_TOP = {"schema_version", "seed", "matrix", "kernel", "density", "alpha", "grid", "N",
        "source", "apply_d_alpha", "verify", "estimate", "output"}
_BLOCKS = {
    "kernel": {"kind", "H", "psi", "beta1", "beta2"},
    "density": {"kind", "alpha0", "r0", "zeta", "d", "scale", "matrix"},
    "alpha": {"kind", "value", "c0", "c", "lo", "hi"},
    "grid": {"box", "resolution"},
    "output": {"prefix"},
    "estimate": {"input", "spec", "eta", "k_range", "axes", "budget", "beta"},
}
_SUITES = {
    "tails": {"suite", "source", "t_grid", "M"},
    "mgf": {"suite", "source", "z_grid", "M"},
    "supsum": {"suite", "source", "ratio", "N_max", "t", "M"},
    "fdd": {"suite", "density_b", "points", "char_args", "M", "N", "min_pass_fraction"},
    "rate": {"suite", "alpha_grid", "pprime", "p", "N_ref", "checkpoints", "replications",
             "quantile", "max_change"},
    "envelope": {"suite", "h_grid", "slope_tol", "max_spread"},
}


def _check_keys(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(block) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


class Run:
    """A validated configuration with its constructed objects."""

    def __init__(self, config, command):
        self.config = config
        self.command = command
        _check_keys(config, _TOP, "config")
        if config.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
        for name, allowed in _BLOCKS.items():
            if name in config:
                _check_keys(config[name], allowed, name)
        self.seed = int(config.get("seed", 0))
        self.source = config.get("source", "complex_gaussian")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}")
        self.prefix = config.get("output", {}).get("prefix", "field")
        self.matrix = None
        self.kernel = None
        self.density = None
        self.alpha = None
        if "kernel" in config or command == "simulate":
            self._build_field_objects()
        if command == "verify":
            self._validate_verify()
        if command == "estimate":
            self._validate_estimate()

    def _build_field_objects(self):
        c = self.config
        for key in ("kernel", "density", "alpha", "grid", "N"):
            if key not in c:
                raise ConfigError(f"missing required block {key!r}")
        try:
            self.matrix = ScalingMatrix(np.asarray(c.get("matrix", [[1.0]]), dtype=np.float64))
            self.kernel = kernel_from_dict(c["kernel"], self.matrix)
            dens = dict(c["density"])
            if dens.get("kind") == "isotropic_mixture":
                dens.setdefault("d", self.matrix.d)
            self.density = density_from_dict(dens, self.matrix)
            self.alpha = AlphaField.from_dict(c["alpha"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.density.d != self.kernel.d:
            raise ConfigError("density dimension differs from the kernel dimension")
        grid = c["grid"]
        try:
            self.box = np.asarray(grid["box"], dtype=np.float64).reshape(-1, 2)
            self.resolution = tuple(int(r) for r in grid["resolution"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid grid block: {exc}") from exc
        if len(self.box) != self.kernel.d or len(self.resolution) != self.kernel.d:
            raise ConfigError("grid dimension differs from the kernel dimension")
        if any(r < 1 for r in self.resolution) or np.any(self.box[:, 1] < self.box[:, 0]):
            raise ConfigError("grid needs positive resolutions and low <= high")
        try:
            a, b = self.alpha.range_on(self.box)
            self.kernel.check_alpha(np.array([a, b]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.N = int(c["N"])
        if self.N < 1:
            raise ConfigError("N must be positive")
        if c.get("apply_d_alpha") and self.source != "complex_gaussian":
            raise ConfigError("apply_d_alpha requires the complex_gaussian source")

    def _validate_verify(self):
        v = self.config.get("verify")
        if v is None:
            raise ConfigError("missing 'verify' block")
        suite = v.get("suite") if isinstance(v, dict) else None
        if suite not in _SUITES:
            raise ConfigError(f"verify.suite must be one of {sorted(_SUITES)}")
        _check_keys(v, _SUITES[suite], f"verify ({suite})")
        if v.get("source", self.source) not in SOURCES:
            raise ConfigError(f"unknown source {v.get('source')!r}")
        if suite in ("fdd", "envelope") and self.kernel is None:
            raise ConfigError(f"the {suite} suite needs kernel, density, alpha, grid and N blocks")
        if suite == "envelope" and not isinstance(self.kernel, HarmonizableOS):
            raise ConfigError("the envelope suite needs the harmonizable_os kernel")
        if suite in ("fdd", "envelope") and not self.alpha.is_constant:
            raise ConfigError(f"the {suite} suite needs a constant alpha")
        if suite == "fdd":
            try:
                dens = dict(v.get("density_b", self.config["density"]))
                if dens.get("kind") == "isotropic_mixture":
                    dens.setdefault("d", self.matrix.d)
                self.density_b = density_from_dict(dens, self.matrix)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"verify.density_b: {exc}") from exc
            if int(v.get("M", 1000)) < 1000:
                raise ConfigError("fdd suite needs M >= 1000")
        if suite == "rate":
            from .shot_noise import check_pprime

            grid = v.get("alpha_grid", [0.5, 1.5, 64])
            try:
                check_pprime(float(v.get("pprime", 8)), float(grid[1]), float(v.get("p", 1.0)))
            except ValueError as exc:
                raise ConfigError(f"rate suite: {exc} (admissible interval of the rate theorem)") from exc
        if suite in ("tails",) and int(v.get("M", 10 ** 6)) < 10_000:
            raise ConfigError("tails suite needs M >= 10**4")

    def _validate_estimate(self):
        e = self.config.get("estimate")
        if e is None:
            raise ConfigError("missing 'estimate' block")
        if "input" not in e and self.kernel is None:
            raise ConfigError("estimate needs an input grid or an inline simulation block")
        try:
            self.spec = QuasiMetricSpec.from_dict(e.get("spec", {"kind": "euclidean"}))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"estimate.spec: {exc}") from exc

    def hashed_config(self):
        """The config with the effective seed; threads and paths are excluded."""
        cfg = dict(self.config)
        cfg["seed"] = self.seed
        return cfg


# ---------------------------------------------------------------------------
# commands


def _simulate(run, threads):
    return simulate_field(run.kernel, run.density, run.alpha, run.box, run.resolution, run.N,
                          run.seed, source=run.source,
                          apply_d_alpha=bool(run.config.get("apply_d_alpha", False)),
                          threads=threads)


def cmd_simulate(run, out_dir, threads):
    field = _simulate(run, threads)
    chash = fio.config_hash(run.hashed_config())
    field.metadata["config_hash"] = chash
    field.metadata.pop("backend", None)
    paths = fio.write_field(field, out_dir, run.prefix, run.hashed_config(), chash)
    return EXIT_PASS, {"files": list(paths)}


def _z_list(raw):
    return [complex(z[0], z[1]) if isinstance(z, (list, tuple)) else complex(z) for z in raw]


def cmd_verify(run, out_dir, threads):
    v = run.config["verify"]
    suite = v["suite"]
    seed = run.seed
    source = v.get("source", run.source)
    report = {"suite": suite}
    if suite == "tails":
        rows = tail_check(source, v.get("t_grid", [1, 2, 3, 4]), int(v.get("M", 10 ** 6)), seed)
        report["rows"] = [r.to_dict() for r in rows]
        passed = not any(r.violated for r in rows)
    elif suite == "mgf":
        rows = mgf_check(source, _z_list(v.get("z_grid", [[0.5, 0], [1, 1], [0, 2]])),
                         int(v.get("M", 10 ** 6)), seed)
        report["rows"] = [r.to_dict() for r in rows]
        passed = not any(r.violated for r in rows)
    elif suite == "supsum":
        ratio = float(v.get("ratio", 0.5))
        n = int(v.get("N_max", 50))
        row = sup_partial_sum_tail(ratio ** np.arange(1, n + 1), source, float(v.get("t", 6.0)),
                                   int(v.get("M", 10 ** 6)), n, seed)
        report["rows"] = [row.to_dict()]
        passed = not row.violated
    elif suite == "fdd":
        a = run.alpha.c0
        pts = np.asarray(v.get("points", [[0.5] * run.kernel.d]), dtype=np.float64)
        rep = fdd_invariance_test(run.kernel, run.density, run.density_b, a, pts,
                                  int(v.get("M", 1000)), _z_list(v.get("char_args", [1.0])),
                                  int(v.get("N", run.N)), seed=seed, source=run.source,
                                  min_pass_fraction=float(v.get("min_pass_fraction", 14 / 15)),
                                  threads=threads)
        report.update(rep.to_dict())
        passed = rep.passed
    elif suite == "rate":
        lo, hi, n = v.get("alpha_grid", [0.5, 1.5, 64])
        ck = v.get("checkpoints", [2 ** k for k in range(4, 14)])
        st = rate_study(seed, int(v.get("replications", 100)), np.linspace(lo, hi, int(n)), ck,
                        int(v.get("N_ref", 10 ** 5)), float(v.get("pprime", 8)),
                        p=float(v.get("p", 1.0)), quantile=float(v.get("quantile", 0.95)),
                        threads=threads)
        report.update(st.to_dict())
        report["max_change"] = float(v.get("max_change", 0.25))
        passed = st.change < report["max_change"]
    else:
        h = v.get("h_grid", [2.0 ** -k for k in range(4, 11)])
        env = envelope_integral(run.kernel, run.density, run.alpha.c0, h)
        report.update(env.to_dict())
        tol = float(v.get("slope_tol", 0.1))
        spread = float(v.get("max_spread", 3.0))
        passed = abs(env.slope - env.predicted_slope) <= tol and env.ratio_spread <= spread
    report["passed"] = bool(passed)
    chash = fio.config_hash(run.hashed_config())
    report["config_hash"] = chash
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{run.prefix}_verify_{suite}.json")
    fio.write_json(report, path)
    return (EXIT_PASS if passed else EXIT_FAIL), {"files": [path], "passed": passed}


def cmd_estimate(run, out_dir, threads):
    e = run.config["estimate"]
    if "input" in e:
        field = fio.read_field_csv(e["input"])
    else:
        field = _simulate(run, threads)
    eta = float(e.get("eta", 0.0))
    k_range = e.get("k_range")
    report = modulus_profile(field, run.spec, budget=int(e.get("budget", 200_000)), seed=run.seed)
    notes = []
    if np.all(report.sups == 0):
        notes.append("zero increments: field is constant, exponent undefined")
    else:
        try:
            fit_report(report, eta, k_range=k_range)
        except NumericError as exc:
            notes.append(f"exponent fit failed: {exc}")
    axes = e.get("axes")
    if axes is not None:
        for a in axes:
            if field.resolution[a] >= 128:
                report.directional.update(directional_exponents(field, [a], eta, k_range))
            else:
                notes.append(f"axis {a} has fewer than 128 points; no directional exponent")
    if "beta" in e:
        hr = holder_membership(field, run.spec, float(e["beta"]), eta, seed=run.seed)
        report.holder_C = hr.C
        report.metadata["holder"] = hr.to_dict()
    chash = fio.config_hash(run.hashed_config())
    report.metadata.update({"config_hash": chash, "notes": notes})
    os.makedirs(out_dir, exist_ok=True)
    jpath = os.path.join(out_dir, f"{run.prefix}_estimate.json")
    cpath = os.path.join(out_dir, f"{run.prefix}_estimate.csv")
    with open(jpath, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(cpath, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash: {chash}\n" + report.to_csv())
    return EXIT_PASS, {"files": [jpath, cpath], "notes": notes}


COMMANDS = {"simulate": cmd_simulate, "verify": cmd_verify, "estimate": cmd_estimate}


def build_parser():
    p = argparse.ArgumentParser(prog="anisofield",
                                description="Simulate and verify anisotropic stable random fields.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None,
                   help=f"output directory (default: ${OUT_ENV} or the current directory)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: all cores)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    out_dir = args.out or os.environ.get(OUT_ENV) or os.getcwd()
    threads = args.threads or os.cpu_count() or 1
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"anisofield: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"anisofield: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.seed is not None and isinstance(config, dict):
        config["seed"] = args.seed
    try:
        run = Run(config, args.command)
    except ConfigError as exc:
        print(f"anisofield: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code, info = COMMANDS[args.command](run, out_dir, threads)
    except OSError as exc:
        print(f"anisofield: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        if args.command == "estimate" and "input" in run.config["estimate"]:
            print(f"anisofield: unreadable input grid: {exc}", file=sys.stderr)
            return EXIT_IO
        raise
    for f in info.get("files", []):
        print(f)
    return code


if __name__ == "__main__":
    sys.exit(main())
