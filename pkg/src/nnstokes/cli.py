"""Command-line front end: ``nnstokes <study> [options]``.

Settings come from built-in defaults, then an optional JSON config file,
then command-line flags (flags win). Exit status: 0 when every assertion
passes, 1 when an assertion fails, 2 when a solve fails, 3 for rejected
configuration or output directories.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .constitutive import SHIPPED_MODELS, ModelError, StressModel
from .experiments import STUDIES, Tolerances, levels_up_to
from .stokes import SolverConfig, SolverError

log = logging.getLogger("nnstokes")

EXIT_OK, EXIT_ASSERT, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2, 3

DEFAULT_GRID = {"mms": 64, "truncation": 64, "uniqueness": 64, "roughness": 128,
                "inhomogeneous": 128, "weights-check": 256, "constitutive-check": 0}

CONVERGENCE_STUDIES = ("mms", "roughness", "inhomogeneous")

FAMILY_DEFAULTS = {
    "carreau": {"family": "carreau", "mu": 1.0, "nu0": 1.0, "nu1": 1.0, "p": 1.5},
    "capped": {"family": "capped", "mu": 1.0, "nu0": 0.0, "nu1": 1.0, "p": 4.0},
}

SCHEMA = {
    "study": str,
    "model": {"name": str, "family": str, "mu": float, "nu0": float, "nu1": float, "p": float,
              "mu_inf": float},
    "grid": {"n": int, "levels": list},
    "weight": {"q": float, "s0": float},
    "forcing": {"amplitude": float, "center": list},
    "truncation": {"k_levels": list},
    "constitutive": {"samples": int, "deltas": list},
    "solver": {"tol": float, "max_iter": int, "damping": float, "backend": str},
    "tolerances": dict,
    "output": str,
    "seed": int,
    "workers": int,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    study: str
    model: dict = field(default_factory=lambda: dict(FAMILY_DEFAULTS["carreau"]))
    grid: dict = field(default_factory=dict)
    weight: dict = field(default_factory=lambda: {"q": 2.0, "s0": 1.5})
    forcing: dict = field(default_factory=lambda: {"amplitude": 1.0, "center": [0.5, 0.5]})
    truncation: dict = field(default_factory=lambda: {"k_levels": [2.0 ** i for i in range(7)]})
    constitutive: dict = field(default_factory=lambda: {"samples": 10_000, "deltas": [0.5, 0.125]})
    solver: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    output: str = ""
    seed: int = 0
    workers: int = 0

    def stress_model(self) -> StressModel:
        m = self.model
        name = m.get("name") or m["family"]
        return StressModel(m["family"], float(m["mu"]), float(m["nu0"]), float(m["nu1"]),
                           float(m["p"]), name=name, mu_inf_override=m.get("mu_inf"))

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver)

    def tolerance_set(self) -> Tolerances:
        return Tolerances.from_dict(self.tolerances)

    @property
    def n(self) -> int:
        return int(self.grid.get("n") or DEFAULT_GRID[self.study])

    @property
    def levels(self) -> list[int]:
        return [int(x) for x in self.grid.get("levels") or levels_up_to(self.n)]

    def to_dict(self) -> dict:
        return asdict(self)


def _check_keys(data: dict, schema: dict, path: str = ""):
    for key, value in data.items():
        where = f"{path}{key}"
        if key not in schema:
            raise ConfigError(f"unknown key {where!r}")
        spec = schema[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            _check_keys(value, spec, where + ".")
        elif spec is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where!r} must be a number")
        elif spec is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where!r} must be an integer")
        elif not isinstance(value, spec):
            raise ConfigError(f"{where!r} must be of type {spec.__name__}")


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config(path=None, flags: dict | None = None, study: str | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from defaults, a JSON file and flag overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: line {exc.lineno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
    _check_keys(data, SCHEMA)
    flags = flags or {}
    _check_keys(flags, SCHEMA)
    study = study or flags.get("study") or data.get("study")
    if study not in STUDIES:
        raise ConfigError(f"unknown study {study!r}; choose from {sorted(STUDIES)}")
    merged = _merge(data, flags)
    merged["study"] = study
    model = merged.get("model", {})
    name = model.get("name")
    family = model.get("family")
    if name in SHIPPED_MODELS:
        base = SHIPPED_MODELS[name].describe()
        base = {k: base[k] for k in ("family", "mu", "nu0", "nu1", "p")}
    elif family in FAMILY_DEFAULTS or name in FAMILY_DEFAULTS:
        base = dict(FAMILY_DEFAULTS[family or name])
    elif family is None and name is None:
        base = dict(FAMILY_DEFAULTS["carreau"])
    else:
        raise ConfigError(f"unknown model {name or family!r}; choose from "
                          f"{sorted(set(SHIPPED_MODELS) | set(FAMILY_DEFAULTS))}")
    if family is not None and family != base["family"]:
        base = dict(FAMILY_DEFAULTS[family])
    merged["model"] = {**base, **{k: v for k, v in model.items() if k != "family"},
                       "family": base["family"] if family is None else family}
    if "name" not in merged["model"]:
        merged["model"]["name"] = merged["model"]["family"]
    cfg = RunConfig(study=study)
    for key in ("grid", "weight", "forcing", "truncation", "constitutive", "solver", "tolerances"):
        if key in merged:
            setattr(cfg, key, {**getattr(cfg, key), **merged[key]})
    cfg.model = merged["model"]
    cfg.seed = int(merged.get("seed", 0))
    cfg.workers = int(merged.get("workers") or os.cpu_count() or 1)
    cfg.output = merged.get("output") or str(Path("nnstokes-out") / study)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    try:
        cfg.stress_model()
    except ModelError as exc:
        raise ConfigError(f"model rejected: {exc}") from exc
    try:
        cfg.solver_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from exc
    try:
        cfg.tolerance_set()
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"tolerances: {exc}") from exc
    q, s0 = cfg.weight["q"], cfg.weight["s0"]
    if not q > 1:
        raise ConfigError("weight.q must exceed 1")
    if not 1 < s0 < 2:
        raise ConfigError("weight.s0 must lie in (1, 2)")
    if cfg.study != "constitutive-check":
        if cfg.n < 4:
            raise ConfigError("grid.n must be at least 4")
        if any(n < 4 for n in cfg.levels):
            raise ConfigError("grid.levels entries must be at least 4")
        if cfg.study in CONVERGENCE_STUDIES and len(set(cfg.levels)) < 2:
            raise ConfigError(f"{cfg.study} needs at least two grid levels")
    if not cfg.forcing["amplitude"] >= 0:
        raise ConfigError("forcing.amplitude must be nonnegative")
    c = cfg.forcing["center"]
    if len(c) != 2 or not all(0 < float(x) < 1 for x in c):
        raise ConfigError("forcing.center must lie strictly inside the unit square")
    if any(not float(k) > 0 for k in cfg.truncation["k_levels"]):
        raise ConfigError("truncation.k_levels must be positive")
    if cfg.constitutive["samples"] < 1:
        raise ConfigError("constitutive.samples must be positive")
    if cfg.workers < 1:
        raise ConfigError("workers must be positive")


def study_kwargs(cfg: RunConfig) -> dict:
    model = cfg.stress_model()
    tol = cfg.tolerance_set()
    solver = cfg.solver_config() if cfg.solver else None
    s = cfg.study
    common = {"seed": cfg.seed, "tol": tol}
    if s == "constitutive-check":
        return {**common, "models": [model], "samples": cfg.constitutive["samples"],
                "deltas": tuple(cfg.constitutive["deltas"])}
    if s == "weights-check":
        return {**common, "grids": tuple(n for n in cfg.levels if n >= 64) or (cfg.n,),
                "s0": cfg.weight["s0"], "amplitude": cfg.forcing["amplitude"]}
    if s == "mms":
        return {**common, "model": model, "grids": tuple(cfg.levels), "cfg": solver,
                "workers": cfg.workers, "degeneracy_grid": min(cfg.n, 64)}
    if s == "truncation":
        return {**common, "model": model, "n": cfg.n, "amplitude": cfg.forcing["amplitude"],
                "q": cfg.weight["q"], "s0": cfg.weight["s0"], "cfg": solver,
                "k_levels": cfg.truncation["k_levels"], "center": tuple(cfg.forcing["center"])}
    if s == "roughness":
        return {**common, "model": model, "grids": tuple(cfg.levels),
                "amplitude": cfg.forcing["amplitude"], "q": cfg.weight["q"],
                "s0": cfg.weight["s0"], "cfg": solver, "workers": cfg.workers}
    if s == "uniqueness":
        return {**common, "model": model, "n": cfg.n, "amplitude": cfg.forcing["amplitude"],
                "s0": cfg.weight["s0"], "cfg": solver, "k_levels": cfg.truncation["k_levels"]}
    if s == "inhomogeneous":
        return {**common, "model": model, "grids": tuple(cfg.levels), "cfg": solver,
                "workers": cfg.workers}
    raise ConfigError(f"unknown study {s!r}")


def solve_plan(cfg: RunConfig) -> list[dict]:
    """Every solve (or check) the study would perform, without computing."""
    m = cfg.model["name"]
    s = cfg.study
    ks = cfg.truncation["k_levels"]
    if s == "constitutive-check":
        return [{"model": m, "dim": n, "samples": cfg.constitutive["samples"], "delta": d}
                for n in (2, 3) for d in cfg.constitutive["deltas"]]
    if s == "weights-check":
        return [{"grid": n, "task": "A2 of Dirac weight"} for n in study_kwargs(cfg)["grids"]]
    if s == "mms":
        return [{"model": m, "grid": n} for n in cfg.levels]
    if s == "truncation":
        return [{"model": m, "grid": cfg.n, "k": k} for k in ks]
    if s == "roughness":
        return [{"model": mm, "grid": n, "forcing": f} for f, mm in
                (("dirac", m), ("dirac", "newtonian"), ("smooth", m)) for n in cfg.levels]
    if s == "uniqueness":
        out = []
        for f in ("dirac", "smooth"):
            out += [{"model": m, "grid": cfg.n, "forcing": f, "start": st}
                    for st in ("zero", "random")]
            out += [{"model": m, "grid": cfg.n, "forcing": f, "k": k} for k in ks]
            out.append({"model": m, "grid": cfg.n, "forcing": f, "k": "full (continued)"})
        return out
    if s == "inhomogeneous":
        return [{"model": m, "grid": n, "case": c} for c in ("compressible", "poiseuille")
                for n in cfg.levels]
    return []


def prepare_output(cfg: RunConfig, force: bool) -> Path:
    out = Path(cfg.output)
    marker = out / "config.json"
    if marker.exists():
        try:
            owner = json.loads(marker.read_text()).get("study")
        except (OSError, json.JSONDecodeError):
            owner = None
        if owner != cfg.study:
            raise ConfigError(f"{out} belongs to study {owner!r}; choose another --out")
        if not force:
            raise ConfigError(f"{out} already holds results; rerun with --force to overwrite")
    elif out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} is not empty; rerun with --force or choose another --out")
    out.mkdir(parents=True, exist_ok=True)
    marker.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def dispatch(cfg: RunConfig, *, force: bool = False, figures: bool = True) -> int:
    out = prepare_output(cfg, force)
    t0 = time.perf_counter()
    try:
        report = STUDIES[cfg.study](**study_kwargs(cfg))
    except SolverError as exc:
        (out / "failure.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    report.write(out, figures=figures)
    runs = json.loads(report.to_json())["runs"]
    (out / "manifests.json").write_text(json.dumps(runs, indent=2, sort_keys=True))
    if report.solver_failed:
        failed = [r for r in report.runs if not r.get("converged", True)]
        (out / "failed_runs.json").write_text(json.dumps(failed, indent=2, sort_keys=True))
    lines = report.summary_lines() + [f"  elapsed {time.perf_counter() - t0:.2f}s; output in {out}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return report.exit_code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nnstokes", description=__doc__.splitlines()[0])
    p.add_argument("study", choices=sorted(STUDIES))
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--grid", type=int, help="cells per direction (finest level)")
    p.add_argument("--levels", type=int, nargs="+", help="explicit refinement levels")
    p.add_argument("--model", help="carreau, capped, or a shipped model name")
    p.add_argument("--p", type=float, help="power-law exponent")
    p.add_argument("--mu", type=float, help="asymptotic Newtonian viscosity parameter")
    p.add_argument("--mu-inf", type=float, dest="mu_inf",
                   help="override the asymptotic slope (negative controls)")
    p.add_argument("--q", type=float, help="integrability exponent of the estimates")
    p.add_argument("--s0", type=float, help="exponent of the forcing weight")
    p.add_argument("--amplitude", type=float, help="point-force amplitude")
    p.add_argument("--backend", choices=("direct", "schur"))
    p.add_argument("--tol", type=float, help="Picard relative update tolerance")
    p.add_argument("--damping", type=float, help="fixed Picard relaxation in (0, 1]")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--dry-run", action="store_true", help="print the solve plan and exit")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def flags_from_args(args) -> dict:
    flags: dict = {}

    def put(section, key, value):
        if value is not None:
            flags.setdefault(section, {})[key] = value

    if args.model is not None:
        if args.model in FAMILY_DEFAULTS:
            put("model", "family", args.model)
        else:
            put("model", "name", args.model)
    put("model", "p", args.p)
    put("model", "mu", args.mu)
    put("model", "mu_inf", args.mu_inf)
    put("grid", "n", args.grid)
    put("grid", "levels", args.levels)
    put("weight", "q", args.q)
    put("weight", "s0", args.s0)
    put("forcing", "amplitude", args.amplitude)
    put("solver", "backend", args.backend)
    put("solver", "tol", args.tol)
    put("solver", "damping", args.damping)
    if args.out is not None:
        flags["output"] = args.out
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.workers is not None:
        flags["workers"] = args.workers
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, flags_from_args(args), study=args.study)
        if args.dry_run:
            plan = solve_plan(cfg)
            print(json.dumps({"study": cfg.study, "output": cfg.output, "config": cfg.to_dict(),
                              "solves": plan}, indent=2, sort_keys=True))
            print(f"{len(plan)} planned solves", file=sys.stderr)
            return EXIT_OK
        return dispatch(cfg, force=args.force, figures=not args.no_figures)
    except ConfigError as exc:
        print(f"nnstokes: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
