"""Command-line interface: ``bmilasso <command> --config PATH --out DIR``.

Commands are ``simulate``, ``impute``, ``fit``, ``select``, ``tune`` and
``report``.  Each reads a JSON config (with a ``version`` field; unknown keys
are rejected), derives all randomness from ``--seed`` and writes CSV/JSON
artifacts under ``--out``.  Relative paths inside a config resolve against
the config file's directory.  ``--threads`` only changes scheduling, never
the bytes written.

Exit codes: 0 success, 2 configuration or input error, 3 non-convergence
under ``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .data import emit_stack, load_incomplete, load_stack
from .hyperopt import SPACES, bic_evaluator, optimize
from .imputation import MiceConfig, impute
from .models import DEFAULT_HYPERPARAMS, SPIKE_KINDS, ModelSpec, fit, posterior_summary
from .sampling import ChainConfig, PosteriorDraws, dump_draws
from .selection import (
    SelectionResult,
    bic_for_selection,
    choose_interval_by_bic,
    pool,
    select_by_interval,
    select_by_median_indicator,
)
from .simulation import DEFAULT_ARMS, OPTIONAL_ARMS, ExperimentConfig, MissingSpec, run_experiment, scenario_a, scenario_b, scenario_c
from .report import report_from_logs, scan_curve_report, table_report, write_replication_logs

EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
CONFIG_VERSION = 1


class CliError(Exception):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ChainSection(_Strict):
    n_chains: int = Field(4, ge=2)
    burn_in: int = Field(2000, ge=0)
    kept: int = Field(2000, ge=100)
    thin: int = Field(1, ge=1)
    rhat_threshold: float = Field(1.1, gt=1.0)

    def build(self, seed: int) -> ChainConfig:
        return ChainConfig(self.n_chains, self.burn_in, self.kept, self.thin, seed, self.rhat_threshold)


class MiceSection(_Strict):
    D: int = Field(5, ge=1)
    cycles: int = Field(10, ge=1)
    pmm_donors: int = Field(5, ge=1)

    def build(self, seed: int) -> MiceConfig:
        return MiceConfig(self.D, self.cycles, self.pmm_donors, seed)


class ModelSection(_Strict):
    kind: Literal["MultiLaplace", "Horseshoe", "ARD", "SpikeNormal", "SpikeLaplace"]
    hyperparams: dict[str, float] = Field(default_factory=dict)

    def build(self) -> ModelSpec:
        return ModelSpec(self.kind, dict(self.hyperparams))


class ScenarioSection(_Strict):
    name: Literal["A", "B", "C"] = "A"
    rho: float = Field(0.1, ge=0.0, lt=1.0)
    n: int = Field(100, ge=10)
    p: int = Field(20, ge=20)
    mechanism: Literal["MCAR", "MAR"] = "MCAR"
    high_missing: bool = False
    replications: int = Field(20, ge=1)
    mcar_frac: Optional[float] = Field(None, ge=0.0, lt=1.0)
    alpha0: Optional[float] = None

    def build(self, seed: int):
        if self.name == "A":
            cfg = scenario_a(self.rho, self.mechanism, n=self.n, p=self.p, replications=self.replications, seed=seed)
        elif self.name == "B":
            cfg = scenario_b(self.n, self.p, self.high_missing, self.mechanism, replications=self.replications, seed=seed)
        else:
            cfg = scenario_c(self.mechanism, n=self.n, p=self.p, replications=self.replications, seed=seed)
        if self.mcar_frac is not None or self.alpha0 is not None:
            m = cfg.missing
            missing = MissingSpec(
                m.mechanism,
                m.target_cols,
                m.mcar_frac if self.mcar_frac is None else self.mcar_frac,
                m.alpha0 if self.alpha0 is None else self.alpha0,
                m.slopes,
            )
            cfg = replace(cfg, missing=missing)
        return cfg


class SimulateConfig(_Strict):
    version: Literal[1] = 1
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    arms: list[str] = Field(default_factory=lambda: list(DEFAULT_ARMS))
    chain: ChainSection = Field(default_factory=lambda: ChainSection(n_chains=2, burn_in=1000, kept=1000))
    mice: MiceSection = Field(default_factory=MiceSection)
    hyperparams: dict[str, dict[str, float]] = Field(default_factory=dict)
    x_rule: Literal["per_replication", "averaged"] = "per_replication"

    @field_validator("arms")
    @classmethod
    def _known_arms(cls, v):
        bad = [a for a in v if a not in DEFAULT_ARMS + OPTIONAL_ARMS]
        if bad:
            raise ValueError(f"unknown arms {bad}; choose from {list(DEFAULT_ARMS + OPTIONAL_ARMS)}")
        if not v:
            raise ValueError("at least one arm is required")
        return v


class ImputeConfig(_Strict):
    version: Literal[1] = 1
    data: str
    mask: str
    mice: MiceSection = Field(default_factory=MiceSection)
    output_format: Literal["long-csv", "multi-file"] = "long-csv"


class FitConfig(_Strict):
    version: Literal[1] = 1
    stack: str
    format: Literal["long-csv", "multi-file"] = "long-csv"
    model: ModelSection
    chain: ChainSection = Field(default_factory=ChainSection)
    save_draws: bool = False


class SelectConfig(FitConfig):
    rule: Literal["auto", "credible_interval", "median_indicator"] = "auto"
    x_pct: Optional[float] = Field(None, gt=0.0, lt=100.0)
    bic_mode: Literal["posterior_mean", "refit"] = "posterior_mean"


class TuneConfig(_Strict):
    version: Literal[1] = 1
    stack: str
    format: Literal["long-csv", "multi-file"] = "long-csv"
    model: Literal["SpikeNormal", "SpikeLaplace"]
    chain: ChainSection = Field(default_factory=lambda: ChainSection(n_chains=2, burn_in=1000, kept=1000))
    budget: int = 20
    bic_mode: Literal["posterior_mean", "refit"] = "posterior_mean"

    @field_validator("budget")
    @classmethod
    def _budget(cls, v):
        if v < 3:
            raise ValueError("budget must be at least 3 (three initial design points)")
        return v


class ReportConfig(_Strict):
    version: Literal[1] = 1
    logs: str
    arms: Optional[list[str]] = None
    x_rule: Literal["per_replication", "averaged"] = "per_replication"


SCHEMAS = {
    "simulate": SimulateConfig,
    "impute": ImputeConfig,
    "fit": FitConfig,
    "select": SelectConfig,
    "tune": TuneConfig,
    "report": ReportConfig,
}


# ---------------------------------------------------------------------------
# helpers


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"config error at {loc}: {e['msg']}")
    return "\n".join(lines)


def load_config(command: str, path: Optional[str]):
    schema = SCHEMAS[command]
    if path is None:
        raw = {}
        base = Path.cwd()
    else:
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {p}") from None
        except json.JSONDecodeError as e:
            raise CliError(f"config file {p} is not valid JSON: {e}") from None
        base = p.resolve().parent
    try:
        cfg = schema.model_validate(raw)
    except ValidationError as e:
        raise CliError(_format_validation(e)) from None
    return cfg, base


def _resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(x: float) -> str:
    return f"{x:.17g}"


def write_posterior_outputs(draws: PosteriorDraws, out: Path) -> None:
    rows = posterior_summary(draws)
    _write_csv(
        out / "posterior_summary.csv",
        ["name", "mean", "sd", "q2.5", "q97.5"],
        [[r["name"], _g(r["mean"]), _g(r["sd"]), _g(r["q2.5"]), _g(r["q97.5"])] for r in rows],
    )
    names = draws.column_names
    table = []
    if draws.rhat is not None:
        for d in range(draws.D):
            for j in range(draws.p):
                table.append([d + 1, names[j], _g(float(draws.rhat[d, j])), int(draws.rhat[d, j] < draws.rhat_threshold)])
    _write_csv(out / "rhat.csv", ["imputation", "name", "rhat", "converged"], table)


def _nonconvergence(draws: PosteriorDraws, strict: bool) -> int:
    if draws.converged:
        return 0
    msg = f"warning: chains not converged (max R-hat {draws.max_rhat:.3f} >= {draws.rhat_threshold})"
    print(msg, file=sys.stderr)
    return EXIT_NOT_CONVERGED if strict else 0


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: SimulateConfig, base: Path, out: Path, seed: int, threads: int, strict: bool) -> int:
    scenario = cfg.scenario.build(seed)
    exp = ExperimentConfig(
        scenario,
        tuple(cfg.arms),
        cfg.chain.build(seed),
        cfg.mice.build(seed),
        {k: dict(v) for k, v in cfg.hyperparams.items()},
        cfg.x_rule,
    )
    result = run_experiment(exp, threads=threads)
    write_replication_logs(result, out / "logs")
    table_report(result.summary, out / "results.csv", list(cfg.arms))
    for arm in result.replications[0].scans if result.replications else []:
        slug = "".join(ch.lower() if ch.isalnum() else "_" for ch in arm).strip("_")
        scan_curve_report(result.replications, arm, out / f"scan_{slug}.csv")
    if strict:
        bad = [
            (r.replication, arm, v)
            for r in result.replications
            for arm, v in r.rhat.items()
            if not v < exp.chain.rhat_threshold
        ]
        if bad:
            print(f"warning: {len(bad)} fits did not converge", file=sys.stderr)
            return EXIT_NOT_CONVERGED
    return 0


def cmd_impute(cfg: ImputeConfig, base: Path, out: Path, seed: int, threads: int, strict: bool) -> int:
    data = load_incomplete(_resolve(base, cfg.data), _resolve(base, cfg.mask))
    stack, flags = impute(data, cfg.mice.build(seed), return_flags=True)
    emit_stack(stack, out / ("imputed.csv" if cfg.output_format == "long-csv" else "imputed"), cfg.output_format)
    _write_json(out / "imputation_flags.json", {"ridge_logistic": [list(t) for t in flags.ridge_logistic]})
    return 0


def _fit_from(cfg: FitConfig, base: Path, seed: int, threads: int):
    stack = load_stack(_resolve(base, cfg.stack), cfg.format)
    model = cfg.model.build()
    draws = fit(model, stack, cfg.chain.build(seed), threads=threads)
    return stack, model, draws


def cmd_fit(cfg: FitConfig, base: Path, out: Path, seed: int, threads: int, strict: bool) -> int:
    _, _, draws = _fit_from(cfg, base, seed, threads)
    write_posterior_outputs(draws, out)
    if cfg.save_draws:
        dump_draws(draws, out / "draws")
    return _nonconvergence(draws, strict)


def cmd_select(cfg: SelectConfig, base: Path, out: Path, seed: int, threads: int, strict: bool) -> int:
    rule = cfg.rule
    spike = cfg.model.kind in SPIKE_KINDS
    if rule == "auto":
        rule = "median_indicator" if spike else "credible_interval"
    if spike and rule == "credible_interval":
        raise CliError(f"rule incompatible with model: {cfg.model.kind} uses the median_indicator rule")
    if not spike and rule == "median_indicator":
        raise CliError(f"rule incompatible with model: {cfg.model.kind} has no inclusion indicators")
    stack, _, draws = _fit_from(cfg, base, seed, threads)
    write_posterior_outputs(draws, out)
    if rule == "median_indicator":
        result = select_by_median_indicator(draws)
        result.bic = bic_for_selection(stack, draws, result.selected, cfg.bic_mode)
    elif cfg.x_pct is not None:
        result = select_by_interval(pool(draws), cfg.x_pct)
        result.bic = bic_for_selection(stack, draws, result.selected, cfg.bic_mode)
    else:
        result, rows = choose_interval_by_bic(stack, draws, cfg.bic_mode)
        _write_csv(
            out / "interval_scan.csv",
            ["x_pct", "n_selected", "bic", "best"],
            [[f"{r.x_pct:g}", int(r.selected.sum()), _g(r.bic), int(r.best)] for r in rows],
        )
    if not draws.converged:
        result.flags.append("not_converged")
    _write_json(out / "selection.json", result.to_dict())
    return _nonconvergence(draws, strict)


def cmd_tune(cfg: TuneConfig, base: Path, out: Path, seed: int, threads: int, strict: bool) -> int:
    stack = load_stack(_resolve(base, cfg.stack), cfg.format)
    chain = cfg.chain.build(seed)
    best, trace = optimize(SPACES[cfg.model], bic_evaluator(cfg.model, stack, chain, cfg.bic_mode), cfg.budget, seed)
    trace.write_csv(out / "bo_trace.csv")
    defaults = DEFAULT_HYPERPARAMS[cfg.model]
    _write_json(out / "best_hyperparams.json", {"model": cfg.model, "hyperparams": best, "bic": trace.values[trace.best_index], "defaults": defaults})
    draws = fit(ModelSpec(cfg.model, best), stack, chain, threads=threads)
    result: SelectionResult = select_by_median_indicator(draws)
    result.bic = bic_for_selection(stack, draws, result.selected, cfg.bic_mode)
    if not draws.converged:
        result.flags.append("not_converged")
    _write_json(out / "selection.json", result.to_dict())
    write_posterior_outputs(draws, out)
    return _nonconvergence(draws, strict)


def cmd_report(cfg: ReportConfig, base: Path, out: Path, seed: int, threads: int, strict: bool) -> int:
    report_from_logs(_resolve(base, cfg.logs), out, cfg.arms, cfg.x_rule)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "impute": cmd_impute,
    "fit": cmd_fit,
    "select": cmd_select,
    "tune": cmd_tune,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmilasso", description="Bayesian MI-LASSO variable selection on multiply-imputed data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} step")
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="top-level seed (unsigned 64-bit)")
        p.add_argument("--threads", type=int, default=1, help="worker cap; never changes results")
        p.add_argument("--strict", action="store_true", help="exit 3 when chains do not converge")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg, base = load_config(args.command, args.config)
        if args.dry_run:
            print(json.dumps({"command": args.command, "seed": args.seed, "config": cfg.model_dump()}, indent=2, sort_keys=True))
            return 0
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.resolved.json", {"command": args.command, "seed": args.seed, "config": cfg.model_dump()})
        return COMMANDS[args.command](cfg, base, out, args.seed, args.threads, args.strict)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError, np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
