"""Command line entry points: ``bench``, ``fit`` and ``predict``.

Exit codes: 0 success, 1 config or input error, 2 too many failed bench
replications, 3 solver non-convergence.

Every flag can also be given in a flat ``key = value`` config file
(``--config``); flags win on conflict.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .center import HDWCenter
from .exceptions import BracketError, ConvergenceError, InvalidInputError, SingularMatrixError
from .models import Dataset, MeanFamily, MeanModel, ModelSpec
from .pipeline import METHODS, PipelineConfig, center_from_state, fit_methods, prior_set_from_dict
from .simulation import PRIOR_MODES, PriorFloorWarning, ReplicationAbort, SimScenario, prior_builder, replicate

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_PARTIAL, EXIT_SOLVER = 0, 1, 2, 3
SOLVER_ERRORS = (ConvergenceError, SingularMatrixError, BracketError)

log = logging.getLogger("mepi")


class ConfigError(InvalidInputError):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; ``None`` means "not set"."""

    command: str = "bench"
    # bench
    sim: str = "1"
    model: int = 1
    n: int = 500
    reps: int = 100
    seed: int = 0
    methods: str = "all"
    beta_start: str = "truth"
    test_size: int = 0
    out_dir: str = "."
    csv: str | None = None
    json: str | None = None
    threads: int | None = None
    # fit / predict
    data: str | None = None
    mean_family: str = "poly2"
    sigma_eps: float = 0.1
    sigma_u: float = 0.3
    alpha: float = 0.1
    prior: str = "moment_uniform"
    m_grid: int = 30
    n_groups: int = 2
    prior_lo: float | None = None
    prior_hi: float | None = None
    beta_init: str | None = None
    fallback: str = "least_squares"
    max_iter: int = 20
    split_fraction: float = 0.5
    variance: bool = False
    out: str | None = None
    fit: str | None = None
    method: str | None = None
    hdw: bool = False

    def method_list(self) -> list:
        if self.methods in ("all", "", None):
            return list(METHODS)
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    def validate(self):
        def bad(name, msg):
            raise ConfigError(f"invalid {name}: {msg}")
        if self.command not in ("bench", "fit", "predict"):
            bad("command", f"unknown command {self.command!r}")
        if self.reps < 1:
            bad("reps", f"must be >= 1, got {self.reps}")
        if self.n < 20:
            bad("n", f"must be >= 20, got {self.n}")
        if self.model not in (1, 2, 3):
            bad("model", f"must be 1, 2 or 3, got {self.model}")
        if str(self.sim).upper() not in ("1", "2", "A1", "A2", "A3"):
            bad("sim", f"must be 1, 2, A1, A2 or A3, got {self.sim!r}")
        if not 0 < self.alpha < 1:
            bad("alpha", f"must lie in (0, 1), got {self.alpha}")
        if self.sigma_eps <= 0:
            bad("sigma_eps", "must be positive")
        if self.sigma_u <= 0:
            bad("sigma_u", "must be positive")
        if self.m_grid < 1:
            bad("m_grid", "must be positive")
        if self.n_groups not in (1, 2):
            bad("n_groups", "must be 1 or 2")
        if self.prior not in PRIOR_MODES:
            bad("prior", f"must be one of {', '.join(PRIOR_MODES)}")
        if self.fallback not in ("least_squares", "none"):
            bad("fallback", "must be least_squares or none")
        if self.beta_start not in ("truth", "naive"):
            bad("beta_start", "must be truth or naive")
        if self.threads is not None and self.threads < 1:
            bad("threads", "must be >= 1")
        try:
            MeanFamily(self.mean_family)
        except ValueError:
            bad("mean_family", f"must be one of {[f.value for f in MeanFamily]}")
        unknown = set(self.method_list()) - set(METHODS)
        if unknown or not self.method_list():
            bad("methods", f"unknown methods {sorted(unknown)}")
        if self.command == "fit" and not self.data:
            bad("data", "fit needs --data")
        if self.command == "predict" and (not self.data or not self.fit):
            bad("data", "predict needs --fit and --data")

    def canonical(self) -> str:
        """``key = value`` lines, sorted; parses back to an equal config."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        cfg.update(parse_config_text(text, source), source)
        return cfg

    def update(self, values: dict, source: str = "<flags>"):
        types = {f.name: f.type for f in fields(self)}
        for key, (raw, where) in values.items():
            if key not in types:
                raise ConfigError(f"{where}: unknown key {key!r}")
            setattr(self, key, _coerce(key, raw, types[key], where))


def _coerce(key, raw, typ, where):
    if raw is None or isinstance(raw, (bool, int, float)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    typ = str(typ)
    try:
        if typ.startswith("bool"):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ.startswith("int"):
            return int(text)
        if typ.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: field {key!r} has bad value {text!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` document; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = (value.strip('"').strip("'"), f"{source}:{lineno}")
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mepi", description="Prediction intervals with an error-prone covariate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--alpha", type=float)

    b = sub.add_parser("bench", help="run a simulation scenario")
    common(b)
    b.add_argument("--sim")
    b.add_argument("--model", type=int)
    b.add_argument("--n", type=int)
    b.add_argument("--reps", type=int)
    b.add_argument("--methods", help="comma list or 'all'")
    b.add_argument("--beta-start", choices=["truth", "naive"])
    b.add_argument("--test-size", type=int)
    b.add_argument("--out-dir")
    b.add_argument("--csv")
    b.add_argument("--json")

    f = sub.add_parser("fit", help="fit interval methods to a CSV of y,w,z1..zk")
    common(f)
    f.add_argument("--data")
    f.add_argument("--mean-family", choices=[m.value for m in MeanFamily])
    f.add_argument("--sigma-eps", type=float)
    f.add_argument("--sigma-u", type=float)
    f.add_argument("--method", dest="methods", help="method name, comma list or 'all'")
    f.add_argument("--prior", choices=PRIOR_MODES)
    f.add_argument("--m-grid", type=int)
    f.add_argument("--n-groups", type=int)
    f.add_argument("--prior-lo", type=float)
    f.add_argument("--prior-hi", type=float)
    f.add_argument("--beta-init", help="comma-separated Newton start")
    f.add_argument("--fallback", choices=["least_squares", "none"])
    f.add_argument("--max-iter", type=int)
    f.add_argument("--split-fraction", type=float)
    f.add_argument("--variance", action="store_const", const=True)
    f.add_argument("--out")

    r = sub.add_parser("predict", help="intervals for new rows from a fit artifact")
    common(r)
    r.add_argument("--fit")
    r.add_argument("--data")
    r.add_argument("--method")
    r.add_argument("--hdw", action="store_const", const=True)
    r.add_argument("--out")
    return p


def build_config(argv) -> RunConfig:
    args = _parser().parse_args(argv)
    cfg = RunConfig(command=args.command)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg.update(parse_config_text(text, args.config), args.config)
    env = {}
    if os.environ.get("MEPI_OUTPUT_DIR"):
        env["out_dir"] = (os.environ["MEPI_OUTPUT_DIR"], "env MEPI_OUTPUT_DIR")
    if os.environ.get("MEPI_THREADS"):
        env["threads"] = (os.environ["MEPI_THREADS"], "env MEPI_THREADS")
    cfg.update(env)
    flags = {k: (v, f"--{k.replace('_', '-')}") for k, v in vars(args).items()
             if v is not None and k not in ("command", "config", "verbose")}
    cfg.update(flags)
    cfg.command = args.command
    cfg.validate()
    return cfg


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    return str(o)


def _clean(x):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def _dump(doc, path):
    text = json.dumps(_clean(json.loads(json.dumps(doc, default=_json_default))), indent=2,
                      sort_keys=True)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def cmd_bench(cfg: RunConfig) -> int:
    scenario = SimScenario.simulation(cfg.sim, model=cfg.model, n=cfg.n, replications=cfg.reps,
                                      seed=cfg.seed, alpha=cfg.alpha, methods=tuple(cfg.method_list()),
                                      beta_init=cfg.beta_start, test_size=cfg.test_size)
    os.makedirs(cfg.out_dir, exist_ok=True)
    stem = f"bench_sim{str(cfg.sim).lower()}_model{cfg.model}_n{cfg.n}_seed{cfg.seed}"
    csv_path = cfg.csv or os.path.join(cfg.out_dir, stem + ".csv")
    json_path = cfg.json or os.path.join(cfg.out_dir, stem + ".json")
    status = EXIT_OK
    try:
        result = replicate(scenario, threads=cfg.threads)
    except ReplicationAbort as exc:
        log.error("%s", exc)
        result, status = exc.result, EXIT_PARTIAL
    result.to_csv(csv_path)
    result.to_json(json_path)
    print(result.format_table())
    print(f"wrote {csv_path} and {json_path}")
    return status


def _read_csv(path, require_y=True) -> Dataset:
    try:
        return Dataset.from_csv(path, require_y=require_y)
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from None


def _spec(cfg: RunConfig) -> ModelSpec:
    return ModelSpec(MeanModel(MeanFamily(cfg.mean_family)), cfg.sigma_eps, cfg.sigma_u)


def cmd_fit(cfg: RunConfig) -> int:
    data = _read_csv(cfg.data)
    if data.d_z < 2:
        raise InvalidInputError(f"{cfg.data}: need at least one z column (y,w,z1,...)")
    spec = _spec(cfg)
    bounds = None
    if cfg.prior_lo is not None or cfg.prior_hi is not None:
        if cfg.prior_lo is None or cfg.prior_hi is None:
            raise ConfigError("invalid prior_lo: give both prior_lo and prior_hi")
        bounds = (cfg.prior_lo, cfg.prior_hi)
    build = prior_builder(cfg.prior, cfg.m_grid, cfg.n_groups, cfg.sigma_u, bounds)
    init = None
    if cfg.beta_init:
        try:
            init = np.array([float(v) for v in cfg.beta_init.split(",")])
        except ValueError:
            raise ConfigError(f"invalid beta_init: {cfg.beta_init!r}") from None
        if len(init) != spec.mean.n_params(data.d_z):
            raise ConfigError(f"invalid beta_init: need {spec.mean.n_params(data.d_z)} values")
    pc = PipelineConfig(spec, build, cfg.alpha, init,
                        None if cfg.fallback == "none" else cfg.fallback, cfg.max_iter,
                        cfg.split_fraction, with_variance=cfg.variance)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", PriorFloorWarning)
        outcomes = fit_methods(data, pc, cfg.method_list(), cfg.seed)
    priors = build(data)
    blocks = {}
    for name, oc in outcomes.items():
        if not oc.ok:
            blocks[name] = {"error": oc.error}
            continue
        e = oc.estimate
        blocks[name] = {"zeta": e.zeta_hat, "se": e.se, "variance": e.variance,
                        "density_at_zeta": e.density_at_zeta, "length": e.length,
                        "beta": None if oc.beta is None else np.asarray(oc.beta).tolist(),
                        "center": oc.center_state, "diagnostics": e.diagnostics}
    doc = {"schema_version": SCHEMA_VERSION, "alpha": cfg.alpha,
           "spec": {"mean_family": cfg.mean_family, "sigma_eps": cfg.sigma_eps,
                    "sigma_u": cfg.sigma_u},
           "prior": {"mode": cfg.prior, "m_grid": cfg.m_grid, "n_groups": cfg.n_groups,
                     "bounds": bounds, "groups": priors.describe(),
                     "variance_floor_used": any(issubclass(c.category, PriorFloorWarning)
                                                for c in caught)},
           "n": data.n, "d_z": data.d_z,
           "training_data": {"w": data.w, "z": data.z, "y": data.y},
           "methods": blocks, "config": cfg.canonical()}
    out = cfg.out or os.path.join(cfg.out_dir, "fit.json")
    _dump(doc, out)
    for name, b in blocks.items():
        if "error" in b:
            print(f"{name}: ERROR {b['error']}")
        else:
            se = "n/a" if b["se"] is None else f"{b['se']:.4f}"
            print(f"{name}: zeta = {b['zeta']:.4f} (se {se})")
    print(f"wrote {out}")
    solver_failures = {n: oc for n, oc in outcomes.items() if isinstance(oc.exception, SOLVER_ERRORS)}
    if solver_failures:
        trace_path = out + ".trace.json"
        _dump({n: {"error": oc.error, "trace": getattr(oc.exception, "trace", None)}
               for n, oc in solver_failures.items()}, trace_path)
        print(f"solver did not converge for {', '.join(solver_failures)}; trace in {trace_path}",
              file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def load_fit(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read fit artifact {path}: {exc}") from None
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InvalidInputError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return doc


def cmd_predict(cfg: RunConfig) -> int:
    doc = load_fit(cfg.fit)
    new = _read_csv(cfg.data, require_y=False)
    if new.d_z != doc["d_z"]:
        raise InvalidInputError(f"fit used {doc['d_z'] - 1} z columns, {cfg.data} has {new.d_z - 1}")
    ok = [m for m in METHODS if m in doc["methods"] and "error" not in doc["methods"][m]]
    if not ok:
        raise InvalidInputError("fit artifact holds no successful method")
    method = cfg.method or ("m1s" if "m1s" in ok else ok[0])
    if method not in ok:
        raise InvalidInputError(f"method {method!r} not available in the fit (have {ok})")
    block = doc["methods"][method]
    s = doc["spec"]
    spec = ModelSpec(MeanModel(MeanFamily(s["mean_family"])), s["sigma_eps"], s["sigma_u"])
    td = doc["training_data"]
    train = Dataset(td["w"], td["z"], td["y"])
    state = block["center"]
    if cfg.hdw:
        if state["kind"] != "posterior_mean":
            raise InvalidInputError("--hdw needs a posterior-mean (m1) fit")
        hdw = HDWCenter(spec, prior_set_from_dict(state["priors"]), block["zeta"])
        centers = hdw.values(new.w, new.z, np.asarray(state["beta"]))
    else:
        centers = np.asarray(center_from_state(state, spec, train)(new.w, new.z), dtype=float)
    zeta = block["zeta"]
    out = cfg.out or os.path.join(cfg.out_dir, "predictions.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["w"] + [f"z{i + 1}" for i in range(new.d_z - 1)] + ["center", "lower", "upper"])
        for w, z, c in zip(new.w, new.z, centers):
            writer.writerow([repr(float(w))] + [repr(float(v)) for v in z[1:]]
                            + [repr(float(c)), repr(float(c - zeta)), repr(float(c + zeta))])
    print(f"{method}: wrote {len(centers)} intervals to {out}")
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "fit": cmd_fit, "predict": cmd_predict}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = build_config(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[cfg.command](cfg)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SOLVER_ERRORS as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
