"""Command-line entry point.

Usage::

    misscausal --config run.yaml [--seed N] [--out DIR] [--threads N]

The config file is YAML with one ``command`` (``estimate``, ``simulate`` or
``replicate-table``) and the sections that command needs; see
the README for the schema. The environment variables
``MISSCAUSAL_SEED`` and ``MISSCAUSAL_OUT`` override the seed and output
directory of the file, and the flags override both.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 estimation
failure. Output files are written only after every result is computed, each
through a temporary file and an atomic rename.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import SCHEMES, ColumnRoles, DataError, apply_scheme, atomic_write_text, load_csv
from .estimators import ESTIMATORS, DegenerateWeights, MismatchedData
from .glm import GlmError
from .inference import (CONTRASTS, EstimatorSpec, NoInfluenceValues, TooManyFailedResamples, bootstrap,
                        if_variance, run_estimator)
from .mi import AllMissingVariable, ImputationConfig
from .nuisance import EmptyStratum, NuisanceSpecs
from .simulate import (ARMS, SCENARIOS, ScenarioSpec, arm_specs, default_roster, format_table, reports_to_csv,
                       run_study)

COMMANDS = ("estimate", "simulate", "replicate-table")
FORMATS = ("csv", "json", "text-table")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3
ENV_SEED = "MISSCAUSAL_SEED"
ENV_OUT = "MISSCAUSAL_OUT"


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


# ------------------------------------------------------------ YAML with line numbers


def _compose(text):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"malformed YAML: {problem}", line) from None
    if node is None:
        raise ConfigError("empty configuration file", 1)
    return node


def _plain(node, lines, path=()):
    """Python value of a YAML node; records the line of every mapping key in ``lines``."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            if key in out:
                raise ConfigError(f"duplicate key {key!r}", k.start_mark.line + 1)
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _plain(v, lines, path + (key,))
        return out
    if isinstance(node, yaml.SequenceNode):
        lines.setdefault(path, node.start_mark.line + 1)
        return [_plain(v, lines, path + (i,)) for i, v in enumerate(node.value)]
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


class _Reader:
    """Typed access to the parsed mapping with line-numbered errors."""

    def __init__(self, tree, lines):
        self.tree = tree
        self.lines = lines
        self.used = set()

    def line(self, path):
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path[:-1]
        return 1

    def fail(self, path, message):
        raise ConfigError(message, self.line(tuple(path)))

    def get(self, path, default=None, kind=None, choices=None):
        node = self.tree
        for i, key in enumerate(path):
            if not isinstance(node, dict):
                self.fail(path[:i], f"{'.'.join(map(str, path[:i]))} must be a mapping")
            if key not in node:
                return default
            node = node[key]
        self.used.add(tuple(path))
        if kind is not None and node is not None:
            ok = isinstance(node, kind) and not (kind in (int, float) and isinstance(node, bool))
            if kind is float and isinstance(node, int) and not isinstance(node, bool):
                node, ok = float(node), True
            if not ok:
                self.fail(path, f"{'.'.join(map(str, path))} must be of type {kind.__name__}")
        if choices is not None and node not in choices:
            self.fail(path, f"{'.'.join(map(str, path))} must be one of {list(choices)}, got {node!r}")
        return node

    def check_keys(self, path, allowed):
        node = self.get(path, {})
        if node is None:
            return
        if not isinstance(node, dict):
            self.fail(path, f"{'.'.join(map(str, path)) or 'top level'} must be a mapping")
        for k in node:
            if k not in allowed:
                self.fail(tuple(path) + (k,), f"unknown key {k!r}" + (f" in {'.'.join(path)}" if path else ""))


# ------------------------------------------------------------ run configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs, parsed from the config file."""

    command: str
    roster: tuple
    seed: int = 0
    out: str = "out"
    formats: tuple = FORMATS
    models: NuisanceSpecs = field(default_factory=NuisanceSpecs)
    imputation: ImputationConfig = field(default_factory=ImputationConfig)
    b: int = 1000
    a: int = 1
    contrast: str | None = None
    p_floor: float = 0.01
    # estimate
    input: str | None = None
    columns: ColumnRoles | None = None
    scheme: str = "separate_block"
    ordering: tuple | None = None
    # simulate / replicate-table
    scenario: ScenarioSpec | None = None
    reps: int = 1000
    arms: tuple = ARMS
    bootstrap_estimators: tuple | None = None

    def to_dict(self) -> dict:
        d = {"command": self.command, "seed": self.seed,
             "output": {"dir": self.out, "formats": list(self.formats)},
             "roster": list(self.roster), "models": self.models.to_dict(),
             "imputation": self.imputation.to_dict(), "bootstrap": {"b": self.b}, "p_floor": self.p_floor}
        if self.command == "estimate":
            cols = self.columns
            d["estimate"] = {
                "input": self.input, "a": self.a, "contrast": self.contrast, "scheme": self.scheme,
                "ordering": None if self.ordering is None else list(self.ordering),
                "columns": {"outcome": cols.outcome, "exposure": cols.exposure, "observed": list(cols.observed),
                            "missing": [m if isinstance(m, str) else list(m) for m in cols.missing],
                            "missing_token": cols.missing_token},
            }
        else:
            sim = {"reps": self.reps, "arms": list(self.arms),
                   "bootstrap_estimators": None if self.bootstrap_estimators is None
                   else list(self.bootstrap_estimators)}
            if self.command == "simulate":
                sim["scenario"] = self.scenario.to_dict()
            d["simulate"] = sim
            if self.command == "replicate-table":
                del d["roster"]
        return d


TOP_KEYS = ("command", "seed", "output", "roster", "models", "imputation", "bootstrap", "p_floor", "estimate",
            "simulate")


def parse_config(text: str) -> RunConfig:
    """Parse and validate config text; raises :class:`ConfigError` with a line number."""
    lines = {}
    tree = _plain(_compose(text), lines)
    if not isinstance(tree, dict):
        raise ConfigError("the configuration must be a mapping", 1)
    r = _Reader(tree, lines)
    r.check_keys((), TOP_KEYS)
    command = r.get(("command",), kind=str, choices=COMMANDS)
    if command is None:
        raise ConfigError("missing required key 'command'", 1)
    seed = r.get(("seed",), 0, kind=int)
    if seed < 0:
        r.fail(("seed",), "seed must be nonnegative")
    r.check_keys(("output",), ("dir", "formats"))
    out = r.get(("output", "dir"), "out", kind=str)
    formats = r.get(("output", "formats"), list(FORMATS), kind=list)
    for i, f in enumerate(formats):
        if f not in FORMATS:
            r.fail(("output", "formats", i), f"unknown output format {f!r}; expected one of {list(FORMATS)}")
    models = _section(r, ("models",), NuisanceSpecs.from_dict, {})
    imputation = _section(r, ("imputation",), ImputationConfig.from_dict, {})
    r.check_keys(("bootstrap",), ("b",))
    b = r.get(("bootstrap", "b"), 1000, kind=int)
    p_floor = r.get(("p_floor",), 0.01, kind=float)
    if not 0 < p_floor < 1:
        r.fail(("p_floor",), "p_floor must lie in (0, 1)")
    common = dict(command=command, seed=seed, out=out, formats=tuple(formats), models=models,
                  imputation=imputation, b=b, p_floor=p_floor)
    if command == "estimate":
        if b < 100:
            r.fail(("bootstrap", "b"), "bootstrap.b must be at least 100")
        if r.get(("simulate",)) is not None:
            r.fail(("simulate",), "section 'simulate' does not apply to command 'estimate'")
        return _parse_estimate(r, common)
    if r.get(("estimate",)) is not None:
        r.fail(("estimate",), f"section 'estimate' does not apply to command {command!r}")
    if b != 0 and b < 100:
        r.fail(("bootstrap", "b"), "bootstrap.b must be 0 (no bootstrap) or at least 100")
    return _parse_simulate(r, common)


def _section(r, path, build, default):
    raw = r.get(path, default)
    try:
        return build(raw or {})
    except (TypeError, ValueError) as exc:
        r.fail(path, f"invalid {'.'.join(path)}: {exc}")


def _roster(r, default):
    roster = r.get(("roster",), default, kind=list)
    if not roster:
        r.fail(("roster",), "roster must list at least one estimator")
    for i, e in enumerate(roster):
        if e not in ESTIMATORS:
            r.fail(("roster", i), f"unknown estimator {e!r}; expected one of {list(ESTIMATORS)}")
    if len(set(roster)) != len(roster):
        r.fail(("roster",), "roster lists an estimator twice")
    return tuple(roster)


def _parse_estimate(r, common):
    r.check_keys(("estimate",), ("input", "columns", "scheme", "ordering", "a", "contrast"))
    if r.get(("estimate",)) is None:
        raise ConfigError("command 'estimate' needs an 'estimate' section", 1)
    inp = r.get(("estimate", "input"), kind=str)
    if inp is None:
        r.fail(("estimate",), "estimate.input is required")
    r.check_keys(("estimate", "columns"), ("outcome", "exposure", "observed", "missing", "missing_token"))
    outcome = r.get(("estimate", "columns", "outcome"), kind=str)
    exposure = r.get(("estimate", "columns", "exposure"), kind=str)
    if outcome is None or exposure is None:
        r.fail(("estimate", "columns"), "estimate.columns needs 'outcome' and 'exposure'")
    observed = r.get(("estimate", "columns", "observed"), [], kind=list)
    missing = r.get(("estimate", "columns", "missing"), [], kind=list)
    for i, m in enumerate(missing):
        if not (isinstance(m, str) or (isinstance(m, list) and m and all(isinstance(x, str) for x in m))):
            r.fail(("estimate", "columns", "missing", i), "missing columns are names or lists of names")
    token = r.get(("estimate", "columns", "missing_token"), "", kind=str)
    cols = ColumnRoles(outcome, exposure, tuple(observed), tuple(m if isinstance(m, str) else tuple(m)
                                                                  for m in missing), token)
    scheme = r.get(("estimate", "scheme"), "separate_block", kind=str, choices=SCHEMES)
    ordering = r.get(("estimate", "ordering"), None, kind=list)
    a = r.get(("estimate", "a"), 1, kind=int, choices=(0, 1))
    contrast = r.get(("estimate", "contrast"), None, choices=CONTRASTS)
    roster = _roster(r, None)
    return RunConfig(roster=roster, input=inp, columns=cols, scheme=scheme,
                     ordering=None if ordering is None else tuple(ordering), a=a, contrast=contrast, **common)


def _parse_simulate(r, common):
    r.check_keys(("simulate",), ("scenario", "reps", "arms", "bootstrap_estimators"))
    reps = r.get(("simulate", "reps"), 1000, kind=int)
    if reps < 1:
        r.fail(("simulate", "reps"), "simulate.reps must be at least 1")
    arms = r.get(("simulate", "arms"), list(ARMS), kind=list)
    for i, a in enumerate(arms):
        if a not in ARMS:
            r.fail(("simulate", "arms", i), f"unknown arm {a!r}; expected one of {list(ARMS)}")
    boot = r.get(("simulate", "bootstrap_estimators"), None, kind=list)
    if boot is not None:
        for i, e in enumerate(boot):
            if e not in ESTIMATORS:
                r.fail(("simulate", "bootstrap_estimators", i), f"unknown estimator {e!r}")
    scenario = None
    if common["command"] == "simulate":
        raw = r.get(("simulate", "scenario"), kind=dict)
        if raw is None:
            r.fail(("simulate",), "command 'simulate' needs simulate.scenario")
        if raw.get("scenario") not in SCENARIOS:
            r.fail(("simulate", "scenario", "scenario"), f"simulate.scenario.scenario must be one of {list(SCENARIOS)}")
        try:
            scenario = ScenarioSpec.from_dict(raw)
        except (TypeError, ValueError) as exc:
            r.fail(("simulate", "scenario"), f"invalid scenario: {exc}")
        roster = _roster(r, list(default_roster(scenario.scenario)))
    else:
        if r.get(("roster",)) is not None:
            r.fail(("roster",), "replicate-table always runs the five estimators of each scenario")
        roster = ()
    return RunConfig(roster=roster, scenario=scenario, reps=reps, arms=tuple(arms),
                     bootstrap_estimators=None if boot is None else tuple(boot), **common)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)


# ------------------------------------------------------------ commands


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _fmt_csv(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows):
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt_csv(v) for v in row])
    return buf.getvalue()


def _estimate_rows(cfg: RunConfig, threads):
    data = load_csv(cfg.input, cfg.columns)
    data = apply_scheme(data, cfg.scheme, cfg.ordering)
    rows = []
    for e in cfg.roster:
        spec = EstimatorSpec(e, cfg.models, cfg.a, cfg.ordering, cfg.p_floor, cfg.imputation, cfg.contrast)
        res = run_estimator(data, spec)
        point = float(res.value if cfg.contrast else res.psi_hat)
        boot = bootstrap(data, spec, b=cfg.b, seed=cfg.seed, threads=threads)
        row = {"estimator": e, "estimate": point, "ci_low": boot.ci_low, "ci_high": boot.ci_high,
               "boot_se": boot.se, "n_failed": boot.n_failed, "if_se": None}
        if res.influence_values.size:
            try:
                row["if_se"] = if_variance(res).se
            except NoInfluenceValues:
                pass
        diag = {} if cfg.contrast else dict(res.diagnostics)
        row["diagnostics"] = diag
        rows.append(row)
    return data, rows


def _estimate_text(cfg, rows):
    target = {None: f"E(Y^{cfg.a})", "difference": "E(Y^1) - E(Y^0)",
              "observed_vs_counterfactual": f"E(Y) - E(Y^{cfg.a})"}[cfg.contrast]
    width = max(22, *(len(r["estimator"]) + 2 for r in rows))
    lines = [f"Target: {target}; scheme {cfg.scheme}; {cfg.b} bootstrap resamples (seed {cfg.seed})",
             f"{'':<10}" + "".join(f"{r['estimator'].upper():>{width}}" for r in rows),
             f"{'Estimate':<10}" + "".join(f"{r['estimate']:>{width}.4f}" for r in rows),
             f"{'95% CI':<10}" + "".join(f"{'(' + format(r['ci_low'], '.4f') + ', ' + format(r['ci_high'], '.4f') + ')':>{width}}"
                                         for r in rows)]
    return "\n".join(lines) + "\n"


def cmd_estimate(cfg: RunConfig, threads=1) -> dict:
    """Estimates with bootstrap intervals for every rostered estimator; returns file contents by name."""
    data, rows = _estimate_rows(cfg, threads)
    files = {}
    if "csv" in cfg.formats:
        header = ["estimator", "estimate", "ci_low", "ci_high", "boot_se", "if_se", "n_failed"]
        files["estimate.csv"] = _csv_text(header, [[r[h] for h in header] for r in rows])
    if "json" in cfg.formats:
        files["estimate.json"] = _dumps({"config": cfg.to_dict(), "n": data.n, "results": rows})
    if "text-table" in cfg.formats:
        files["estimate.txt"] = _estimate_text(cfg, rows)
    return files


def _report_files(stem, reports, cfg, title):
    files = {}
    if "csv" in cfg.formats:
        files[f"{stem}.csv"] = reports_to_csv(reports)
    if "json" in cfg.formats:
        files[f"{stem}.json"] = _dumps({"config": cfg.to_dict(), "reports": [r.to_dict() for r in reports]})
    if "text-table" in cfg.formats:
        files[f"{stem}.txt"] = format_table(reports, title)
    return files


def _study_kwargs(cfg):
    arms = {a: arm_specs(a) for a in cfg.arms}
    return dict(b=cfg.b, master_seed=cfg.seed, arms=arms, bootstrap_estimators=cfg.bootstrap_estimators,
                imputation=cfg.imputation)


def cmd_simulate(cfg: RunConfig, threads=1) -> dict:
    reports = run_study(cfg.scenario, cfg.roster, cfg.reps, threads=threads, **_study_kwargs(cfg))
    title = (f"{cfg.scenario.scenario}, n={cfg.scenario.n}, {cfg.reps} replications, b={cfg.b}: "
             "bias, SE and CP x 100")
    return _report_files("simulation", reports, cfg, title)


def cmd_replicate_table(cfg: RunConfig, threads=1) -> dict:
    """All three scenarios under every arm with the five estimators of each family."""
    from .simulate import scenario_i, scenario_ii, scenario_iii

    reports = []
    for make in (scenario_i, scenario_ii, scenario_iii):
        spec = make()
        reports += run_study(spec, default_roster(spec.scenario), cfg.reps, threads=threads, **_study_kwargs(cfg))
    title = f"Scenarios I-III, n=2500, {cfg.reps} replications, b={cfg.b}: bias, SE and CP x 100"
    return _report_files("replicate_table", reports, cfg, title)


HANDLERS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "replicate-table": cmd_replicate_table}


def _write_outputs(out_dir, files):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(files):
        atomic_write_text(out / name, files[name])


def build_parser():
    p = argparse.ArgumentParser(prog="misscausal", description="Causal effect estimation with a partially "
                                "missing exposure and confounders.")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads, 0 = automatic (results unaffected)")
    return p


def load_run_config(path, seed=None, out=None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text)
    over = {}
    if env.get(ENV_SEED):
        try:
            over["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer") from None
    if env.get(ENV_OUT):
        over["out"] = env[ENV_OUT]
    if seed is not None:
        over["seed"] = seed
    if out is not None:
        over["out"] = out
    if over.get("seed", 0) < 0:
        raise ConfigError("seed must be nonnegative")
    from dataclasses import replace

    return replace(cfg, **over)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.threads < 0:
        print("error: --threads must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_run_config(args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        files = HANDLERS[cfg.command](cfg, threads=args.threads)
    except (DataError, AllMissingVariable) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EmptyStratum, TooManyFailedResamples, GlmError, DegenerateWeights, MismatchedData,
            ValueError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    try:
        _write_outputs(cfg.out, files)
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_DATA
    for name in sorted(files):
        print(Path(cfg.out) / name)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
