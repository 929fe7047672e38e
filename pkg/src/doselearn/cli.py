"""
Command-line front end.

    doselearn generate --setting 1 --n 400 --p 10 --seed 7 --out train.csv
    doselearn fit train.csv --method direct --d 2 --out model.json
    doselearn predict model.json covariates.csv --out doses.csv
    doselearn evaluate model.json test.csv --setting 1 --out metrics.json
    doselearn simulate --setting 5 --p 10 --method pseudo_direct --reps 10 --seed 42 --out results/

Every option can also come from a ``key = value`` file given with
``--config``; command-line flags take precedence.  Exit status is 0 on
success, 2 for bad input or configuration and 3 for numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .dataset import DataError, DoseTrial, GroundTruth, TrialSchema, generate_setting, load_trial, save_trial
from .direct import KernelRidgeRule, dose_grid, fit_direct, subspace_starts
from .evaluation import (
    ExperimentConfig,
    MetricSet,
    _atomic_write,
    format_table,
    ipw_value_estimate,
    policy_metrics,
    run_experiment,
    subspace_metrics,
    write_results,
)
from .kernel import BandwidthSpec
from .pseudo import GridKernelRule, fit_pseudo_direct, second_stage_rule
from .stiefel import OptimizerOptions

logger = logging.getLogger("doselearn")

MODEL_FORMAT = "doselearn-model"
MODEL_VERSION = 1

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
DEFAULT_PROPENSITY = "prop"


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """All tunable settings of the command-line tool, with their defaults."""

    method: str = "direct"
    d: Optional[int] = None
    setting: Optional[int] = None
    p: int = 10
    n: int = 400
    n_test: int = 3000
    reps: int = 10
    seed: int = 0
    q: Optional[int] = None
    loo: bool = False
    bandwidth: Optional[float] = None
    lambda_min: float = 1e-4
    lambda_max: float = 1e2
    lambda_count: int = 10
    restarts: int = 5
    max_iters: int = 200
    epsilon: float = 1e-8
    grad_step: float = 1e-4
    tau_init: float = 0.1
    armijo_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_backtracks: int = 30
    warm_start: bool = True
    threads: int = 1
    dose_col: str = "a"
    reward_col: str = "r"
    propensity_col: Optional[str] = None
    ipw: bool = False

    def __post_init__(self):
        if self.method not in ("direct", "pseudo_direct", "kernel_baseline"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.d is not None and self.d < 1:
            raise ConfigError("d must be positive")
        if self.setting is not None and self.setting not in (1, 2, 3, 4, 5):
            raise ConfigError("setting must be in 1..5")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if self.lambda_count < 1 or not 0 < self.lambda_min <= self.lambda_max:
            raise ConfigError("invalid lambda grid")
        try:
            self.optimizer()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ---- derived objects
    def optimizer(self) -> OptimizerOptions:
        return OptimizerOptions(
            grad_step=self.grad_step, epsilon=self.epsilon, max_iters=self.max_iters,
            restarts=self.restarts, tau_init=self.tau_init, armijo_c1=self.armijo_c1,
            wolfe_c2=self.wolfe_c2, max_backtracks=self.max_backtracks, seed=self.seed,
        )

    def lambda_grid(self, n: int) -> np.ndarray:
        if self.lambda_count == 1:
            return np.array([self.lambda_min * n])
        return np.logspace(np.log10(self.lambda_min), np.log10(self.lambda_max),
                           self.lambda_count) * n

    def bandwidth_spec(self) -> Optional[BandwidthSpec]:
        return None if self.bandwidth is None else BandwidthSpec("fixed", self.bandwidth)

    def schema(self, header: Optional[List[str]] = None) -> TrialSchema:
        """Column mapping; without ``propensity_col`` a column named
        ``prop`` is used as the propensity if ``header`` contains it."""
        prop = self.propensity_col
        if prop is None and header is not None and DEFAULT_PROPENSITY in header:
            prop = DEFAULT_PROPENSITY
        return TrialSchema(dose=self.dose_col, reward=self.reward_col, propensity=prop)

    # ---- text form
    def to_text(self) -> str:
        """Canonical ``key = value`` form, one key per line in sorted order."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: Optional[dict] = None) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        parsed = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse_value(key, value, cls.__dataclass_fields__[key].default)
        return cls(**parsed)


_INT_KEYS = {"d", "setting", "p", "n", "n_test", "reps", "seed", "q", "lambda_count",
             "restarts", "max_iters", "max_backtracks", "threads"}
_FLOAT_KEYS = {"bandwidth", "lambda_min", "lambda_max", "epsilon", "grad_step", "tau_init",
               "armijo_c1", "wolfe_c2"}
_BOOL_KEYS = {"loo", "warm_start", "ipw"}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key, value, default):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if text.lower() == "none":
        return None
    try:
        if key in _BOOL_KEYS:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None
    return text


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def _fit_model(trial: DoseTrial, cfg: RunConfig) -> dict:
    if cfg.method == "kernel_baseline":
        raise ConfigError("kernel_baseline is a campaign comparison, not a fit method")
    d = cfg.d if cfg.d is not None else 1
    if not 1 <= d < trial.p:
        raise ConfigError(f"need 1 <= d < p (p = {trial.p})")
    opts = cfg.optimizer()
    spec = cfg.bandwidth_spec()
    grid = dose_grid(trial, cfg.q)
    if cfg.method == "direct":
        initial = None
        if cfg.warm_start:
            span, _ = fit_pseudo_direct(trial, min(d + 1, trial.p - 1), opts.with_(restarts=2),
                                        loo=cfg.loo, bandwidth=spec)
            initial = subspace_starts(span, d, 3, cfg.seed)
        B, rule, report = fit_direct(trial, d, opts, q=cfg.q, lambda_grid=cfg.lambda_grid(trial.n),
                                     initial=initial, bandwidth=spec)
        rule_data = {
            "type": "kernel_ridge",
            "anchors": rule.anchors.tolist(),
            "weights": rule.weights.tolist(),
            "rbf_scale": rule.rbf_scale,
            "lambda": rule.lam,
            "offset": rule.offset,
        }
    else:
        B, report = fit_pseudo_direct(trial, d, opts, loo=cfg.loo, bandwidth=spec)
        rule = second_stage_rule(trial, B, grid, bandwidth=spec)
        rule_data = {
            "type": "grid_kernel",
            "anchors": rule.anchors.tolist(),
            "doses": rule.doses.tolist(),
            "rewards": rule.rewards.tolist(),
            "grid": rule.grid.tolist(),
            "bandwidth": rule.bandwidth.tolist(),
        }
    if report.failed:
        raise NumericalFailure("no restart found an improving step")
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "method": cfg.method,
        "p": trial.p,
        "d": d,
        "covariate_names": list(trial.covariate_names),
        "dose_min": trial.dose_min,
        "dose_max": trial.dose_max,
        "basis": B.tolist(),
        "rule": rule_data,
        "report": report.to_dict(),
        "config": cfg.to_text(),
    }


def model_to_json(model: dict) -> str:
    return json.dumps(model, indent=1, sort_keys=True, allow_nan=True) + "\n"


def load_model(path) -> dict:
    path = Path(path)
    try:
        model = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: no such model file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a model file ({exc})") from None
    if model.get("format") != MODEL_FORMAT or model.get("version") != MODEL_VERSION:
        raise DataError(f"{path}: unsupported model format")
    return model


def rule_from_model(model: dict):
    """Rebuild the dose rule stored in a model dictionary."""
    B = np.asarray(model["basis"], dtype=float)
    lo, hi = float(model["dose_min"]), float(model["dose_max"])
    r = model["rule"]
    if r["type"] == "kernel_ridge":
        return KernelRidgeRule(np.asarray(r["anchors"], dtype=float).reshape(-1, B.shape[1]),
                               np.asarray(r["weights"], dtype=float), float(r["rbf_scale"]),
                               B, lo, hi, float(r["lambda"]), offset=float(r.get("offset", 0.0)))
    if r["type"] == "grid_kernel":
        return GridKernelRule(B, np.asarray(r["anchors"], dtype=float).reshape(-1, B.shape[1]),
                              np.asarray(r["doses"], dtype=float),
                              np.asarray(r["rewards"], dtype=float),
                              np.asarray(r["grid"], dtype=float),
                              np.asarray(r["bandwidth"], dtype=float), lo, hi)
    raise DataError(f"unknown rule type {r['type']!r}")


def _read_covariates(path, names: List[str], p: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if any(c.strip() for c in r)]
    if header is None:
        return np.empty((0, p))
    header = [h.strip() for h in header]
    if all(name in header for name in names):
        cols = [header.index(name) for name in names]
    elif len(header) == p:
        cols = list(range(p))
    else:
        raise DataError(f"{path}: expected covariate columns {names}, found {header}")
    X = np.empty((len(rows), p))
    for i, row in enumerate(rows, start=1):
        for j, c in enumerate(cols):
            try:
                X[i - 1, j] = float(row[c])
            except (ValueError, IndexError):
                raise DataError(f"row {i}, column {header[c]!r}: non-numeric value") from None
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite covariates")
    return X


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out) -> int:
    if cfg.setting is None:
        raise ConfigError("generate needs --setting")
    trial, _ = generate_setting(cfg.setting, cfg.n, cfg.p, cfg.seed)
    buf = Path(out)
    tmp = buf.with_name(f".{buf.name}.tmp")
    save_trial(trial, tmp, dose=cfg.dose_col, reward=cfg.reward_col,
               propensity=cfg.propensity_col or DEFAULT_PROPENSITY)
    tmp.replace(buf)
    return EXIT_OK


def _header(path) -> List[str]:
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            return [h.strip() for h in next(csv.reader(fh), [])]
    except OSError:
        return []


def _load(cfg: RunConfig, path) -> DoseTrial:
    return load_trial(path, cfg.schema(_header(path)))


def cmd_fit(cfg: RunConfig, data, out) -> int:
    trial = _load(cfg, data)
    model = _fit_model(trial, cfg)
    _atomic_write(Path(out), model_to_json(model))
    return EXIT_OK


def cmd_predict(model_path, covariates, out) -> int:
    model = load_model(model_path)
    X = _read_covariates(covariates, model["covariate_names"], int(model["p"]))
    rule = rule_from_model(model)
    doses = rule.predict(X) if X.shape[0] else np.empty(0)
    text = "dose\n" + "".join(f"{float(v)!r}\n" for v in doses)
    _atomic_write(Path(out), text)
    return EXIT_OK


def evaluate_model(model: dict, test: DoseTrial, setting: Optional[int], ipw: bool) -> MetricSet:
    rule = rule_from_model(model)
    B = np.asarray(model["basis"], dtype=float)
    if test.p != B.shape[0]:
        raise DataError(f"model expects {B.shape[0]} covariates, test data have {test.p}")
    metrics = MetricSet()
    if test.propensity is not None:
        metrics.ipw_value = ipw_value_estimate(test, rule.predict(test.covariates))
    elif ipw:
        raise DataError("IPW value requested but the test data have no propensity column")
    if setting is not None:
        gt = GroundTruth(setting, test.p)
        metrics = metrics.merge(policy_metrics(gt, rule, B, test.covariates))
        truth = gt.basis if gt.basis.shape[1] == B.shape[1] else gt.reward_basis
        X = test.covariates if test.n > test.p else None
        metrics = metrics.merge(subspace_metrics(truth, B, X))
    return metrics


def cmd_evaluate(cfg: RunConfig, model_path, data, out) -> int:
    model = load_model(model_path)
    test = _load(cfg, data)
    metrics = evaluate_model(model, test, cfg.setting, cfg.ipw)
    payload = metrics.to_dict()
    payload["unavailable"] = sorted(k for k, v in payload.items() if v is None)
    _atomic_write(Path(out), json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def experiment_config(cfg: RunConfig) -> ExperimentConfig:
    if cfg.setting is None:
        raise ConfigError("simulate needs --setting")
    try:
        return ExperimentConfig(
            setting=cfg.setting, p=cfg.p, method=cfg.method, d=cfg.d, reps=cfg.reps,
            n_train=cfg.n, n_test=cfg.n_test, seed=cfg.seed, q=cfg.q, loo=cfg.loo,
            warm_start=cfg.warm_start, threads=cfg.threads, optimizer=cfg.optimizer(),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(cfg: RunConfig, out) -> int:
    result = run_experiment(experiment_config(cfg))
    write_results(result, out)
    print(format_table(result))
    ok = any(not str(r["termination"]).startswith("error") for r in result.rows)
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("configuration")
    g.add_argument("--config", help="key = value file; flags override it")
    g.add_argument("--setting", type=int, help="simulation setting 1-5")
    g.add_argument("--method", choices=["direct", "pseudo_direct", "kernel_baseline"],
                   help="estimator (default direct)")
    g.add_argument("--d", type=int, help="reduced dimension")
    g.add_argument("--p", type=int, help="number of covariates")
    g.add_argument("--n", type=int, help="training sample size")
    g.add_argument("--n-test", type=int, dest="n_test", help="test sample size")
    g.add_argument("--reps", type=int, help="replications")
    g.add_argument("--seed", type=int, help="base random seed")
    g.add_argument("--q", type=int, help="dose grid size (default ceil(sqrt(n)))")
    g.add_argument("--loo", action="store_const", const=True, default=None,
                   help="leave-one-out kernel fit in the least-squares objective")
    g.add_argument("--bandwidth", type=float, help="fixed kernel bandwidth")
    g.add_argument("--restarts", type=int, help="random starts per fit")
    g.add_argument("--max-iters", type=int, dest="max_iters", help="iterations per start")
    g.add_argument("--epsilon", type=float, help="gradient-norm tolerance")
    g.add_argument("--threads", type=int, help="worker processes for simulate")
    g.add_argument("--no-warm-start", dest="warm_start", action="store_const", const=False,
                   default=None, help="direct learning from random starts only")
    g.add_argument("--dose-col", dest="dose_col", help="dose column name")
    g.add_argument("--reward-col", dest="reward_col", help="reward column name")
    g.add_argument("--propensity-col", dest="propensity_col", help="propensity column name")
    g.add_argument("--ipw", action="store_const", const=True, default=None,
                   help="require the propensity-weighted value")
    g.add_argument("--out", required=True, help="output file (directory for simulate)")
    g.add_argument("-v", "--verbose", action="store_true")


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doselearn", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", help="export a synthetic dataset as CSV")
    _common(p)
    p = sub.add_parser("fit", help="fit a dose rule to a CSV dataset")
    p.add_argument("data")
    _common(p)
    p = sub.add_parser("predict", help="recommend doses with a fitted model")
    p.add_argument("model")
    p.add_argument("covariates")
    _common(p)
    p = sub.add_parser("evaluate", help="score a model on test data")
    p.add_argument("model")
    p.add_argument("data")
    _common(p)
    p = sub.add_parser("simulate", help="run a replicated simulation campaign")
    _common(p)
    return parser


def _load_config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS and v is not None}
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
    return RunConfig.from_text(text, overrides)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "fit":
            return cmd_fit(cfg, args.data, args.out)
        if args.command == "predict":
            return cmd_predict(args.model, args.covariates, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.model, args.data, args.out)
        return cmd_simulate(cfg, args.out)
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        # LinAlgError subclasses ValueError, so this clause must come first
        print(f"doselearn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ValueError, OSError) as exc:
        print(f"doselearn: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
