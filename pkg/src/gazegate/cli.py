"""Command line: ``run``, ``compare``, ``sweep`` and ``verify``.

Configuration is a flat ``key = value`` file. Precedence is flags, then the
file, then defaults; ``CG_SEED`` in the environment replaces the seed unless
``--seed`` is given. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from pathlib import Path
from typing import Optional

from .decode import DecodePolicy
from .exceptions import ConfigError, GazeGateError
from .harness import (ARMS, SWEEP_PARAMS, ArmMetrics, ScenarioSpec, arm_policy, build_planted_decoder,
                      run_arm, run_comparison, sweep)
from .telemetry import STEPS_SCHEMA, steps_csv_text, write_report

EMITS = ("traces", "report", "weights")
_SHARED = {"seed", "max_new_tokens"}     # live in both the scenario and the policy


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


SCENARIO_KEYS = _fields(ScenarioSpec)
POLICY_KEYS = _fields(DecodePolicy)
RUN_KEYS = {"out": "out", "emit": "traces,report,weights", "arm": "cg", "arms": ",".join(ARMS[:3]),
            "param": "kappa", "grid": None, "jobs": "1"}
DEFAULT_GRIDS = {"kappa": "0,1,1.4,1.8,2.2,5,inf", "alpha": "0,0.25,0.5,1",
                 "layer_band": "0,3;4,8;9,11", "statistic": "mean_abs,median_abs,max_abs"}


def _parse_float(text: str) -> float:
    v = float(text)             # accepts inf / -inf
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _parse_band(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"layer band must look like 4,8 (got {text!r})")
    return int(parts[0]), int(parts[1])


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, text: str, default):
    if key == "layer_band":
        return () if text.strip().lower() in ("none", "empty") else _parse_band(text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return _parse_float(text)
    return text.strip()


@dataclasses.dataclass
class RunConfig:
    scenario: ScenarioSpec
    policy: DecodePolicy
    out: Path
    emit: tuple
    arm: str
    arms: tuple
    param: str
    grid: list
    jobs: int

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        unknown = sorted(set(raw) - set(SCENARIO_KEYS) - set(POLICY_KEYS) - set(RUN_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            scen, pol = {}, {}
            for key, text in raw.items():
                if key in SCENARIO_KEYS:
                    scen[key] = _coerce(key, text, SCENARIO_KEYS[key].default)
                if key in POLICY_KEYS:
                    pol[key] = _coerce(key, text, POLICY_KEYS[key].default)
            run = {k: raw.get(k, v) for k, v in RUN_KEYS.items()}
            emit = tuple(e for e in run["emit"].split(",") if e)
            arms = tuple(a for a in run["arms"].split(",") if a)
            param = run["param"]
            if param not in SWEEP_PARAMS:
                raise ConfigError(f"cannot sweep {param!r}")
            if run["grid"] is None:
                run["grid"] = DEFAULT_GRIDS[param]
            if param == "layer_band":
                grid = [_parse_band(g) for g in run["grid"].split(";") if g]
            elif param == "statistic":
                grid = [g.strip() for g in run["grid"].split(",") if g]
            else:
                grid = [_parse_float(g) for g in run["grid"].split(",") if g]
            jobs = int(run["jobs"])
            scenario = ScenarioSpec(**scen)
            policy = DecodePolicy(**pol).with_(max_new_tokens=scenario.max_new_tokens)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        bad = [e for e in emit if e not in EMITS] + [a for a in arms if a not in ARMS]
        if bad:
            raise ConfigError(f"unknown emit flag or arm: {', '.join(bad)}")
        if run["arm"] not in ARMS:
            raise ConfigError(f"unknown arm {run['arm']!r}")
        if jobs < 1:
            raise ConfigError("jobs must be >= 1")
        return cls(scenario, policy, Path(run["out"]), emit, run["arm"], arms, param, grid, jobs)

    def record(self) -> dict:
        return {"scenario": dataclasses.asdict(self.scenario), "policy": dataclasses.asdict(self.policy),
                "arm": self.arm, "schema": STEPS_SCHEMA}


def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def _flag_values(args) -> dict:
    flags = {}
    for key, attr in (("kappa", "kappa"), ("alpha", "alpha"), ("layer_band", "band"),
                      ("statistic", "stat"), ("seed", "seed"), ("episodes", "episodes"),
                      ("out", "out"), ("jobs", "jobs"), ("emit", "emit"), ("arm", "arm"),
                      ("arms", "arms"), ("param", "param"), ("grid", "grid")):
        v = getattr(args, attr, None)
        if v is not None:
            flags[key] = str(v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    return flags


def resolve_config(args, env=None) -> RunConfig:
    env = os.environ if env is None else env
    raw = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    if env.get("CG_SEED"):
        raw["seed"] = env["CG_SEED"]
    raw.update(_flag_values(args))
    return RunConfig.from_mapping(raw)


# ---------------------------------------------------------------------------
# commands

def cmd_run(cfg: RunConfig) -> int:
    world = build_planted_decoder(cfg.scenario)
    policy = arm_policy(cfg.arm, cfg.policy)
    reports = run_arm(cfg.scenario, policy, jobs=cfg.jobs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if "traces" in cfg.emit:
        (cfg.out / "steps.csv").write_text(steps_csv_text([t for r in reports for t in r.traces]))
    if "report" in cfg.emit:
        write_report(cfg.out / "report.json", {
            "config": cfg.record(), "metrics": dataclasses.asdict(ArmMetrics.of(reports)),
            "episodes": [r.summary() for r in reports]})
    if "weights" in cfg.emit:
        world.weights.save(cfg.out / "weights.cgvw")
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    rc = run_comparison(cfg.scenario, cfg.policy, cfg.arms, jobs=cfg.jobs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_report(cfg.out / "compare.json", rc.summary())
    for arm, m in rc.metrics.items():
        print(f"{arm:9s} hallucination={m.hallucination_rate:.4f} trigger={m.trigger_rate:.4f} "
              f"distinct2={m.distinct2:.4f} hdi_delta={m.hdi_delta:+.4f}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    table = sweep(cfg.scenario, cfg.param, cfg.grid, cfg.policy, jobs=cfg.jobs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_report(cfg.out / f"sweep_{cfg.param}.json",
                 {"parameter": cfg.param, "baseline": dataclasses.asdict(table.baseline),
                  "rows": table.as_rows()})
    print(f"{cfg.param:>12s} {'halluc':>8s} {'reduct':>8s} {'trigger':>8s} {'dist2':>8s}")
    for row in table.as_rows():
        print(f"{str(row['value']):>12s} {row['hallucination_rate']:8.4f} {row['reduction']:8.4f} "
              f"{row['trigger_rate']:8.4f} {row['distinct2']:8.4f}")
    return 0


def cmd_verify(only: Optional[str] = None, weights: Optional[str] = None) -> int:
    from .verify import format_table, run_checks
    results = run_checks(only=only, weights_path=weights)
    print(format_table(results))
    return 0 if results and all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gazegate", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "compare", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value file")
        s.add_argument("--out", help="output directory")
        s.add_argument("--kappa", help="gate threshold; 'inf' disables the gate")
        s.add_argument("--alpha")
        s.add_argument("--band", help="layer band, e.g. 4,8")
        s.add_argument("--stat", help="mean_abs | median_abs | max_abs")
        s.add_argument("--seed")
        s.add_argument("--episodes")
        s.add_argument("--jobs")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key")
        if name == "run":
            s.add_argument("--arm", help=f"one of {', '.join(ARMS)}")
            s.add_argument("--emit", help="comma list of traces, report, weights")
        if name == "compare":
            s.add_argument("--arms")
        if name == "sweep":
            s.add_argument("--param", help=f"one of {', '.join(SWEEP_PARAMS)}")
            s.add_argument("--grid", help="comma list; bands separated by ';'")
    v = sub.add_parser("verify")
    v.add_argument("--only", help="comma list of check ids or groups")
    v.add_argument("--weights", help="weights file to validate against the planted build")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        try:
            return cmd_verify(args.only, args.weights)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep}[args.command](cfg)
    except (GazeGateError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
