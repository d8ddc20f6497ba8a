"""Command-line entry point: ``amdp-lab {gen-mdp,eval,train,bench-figure1,verify}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time

import numpy as np

from .actor import CriticSpec, Schedule, SpmdConfig, spmd_run
from .core import Policy, Regularizer, TabularAmdp, differential_values
from .critics import (
    MultiTrajConfig,
    VrtdConfig,
    evrtd_run,
    multiple_trajectory_evaluate,
    vrtd_run,
)
from .errors import AmdpError, ConfigError
from .features import best_linf_shift, build_tabular_features, projected_model
from .lab import SCHEMA_VERSION, BenchConfig, RandomMdpSpec, RunRecord, cmd_bench_figure1, \
    generate_random_mdp, model_hash
from .samplers import GenerativeOracle, TrajectorySimulator
from .verify import run_verify

PAPER_SCALE = {"n_states": 400, "n_actions": 15}


# ---------------------------------------------------------------- config parsing


def _build(cls, data, path, convert=None):
    """Construct dataclass ``cls`` from a dict, reporting bad fields by dotted path."""
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(_join(path, key), "unknown field")
    kwargs = dict(data)
    for key, fn in (convert or {}).items():
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = fn(kwargs[key], _join(path, key))
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path or "<root>", str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(path or "<root>", str(exc)) from exc


def _join(path, key):
    return f"{path}.{key}" if path else key


def _int(value, path):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    return value


def _number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    return float(value)


def _vrtd_config(data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    data = dict(data)
    if "n" in data or "n_prime" in data or "k_epochs" in data:
        k = _int(data.pop("k_epochs", 1), _join(path, "k_epochs"))
        if k < 1:
            raise ConfigError(_join(path, "k_epochs"), "must be >= 1")
        data["n_k"] = [_int(data.pop("n", 1), _join(path, "n"))] * k
        data["n_prime_k"] = [_int(data.pop("n_prime", 1), _join(path, "n_prime"))] * k
    return _build(VrtdConfig, data, path, {"eta": _number, "t_inner": _int, "tau": _int, "tau_prime": _int})


def _critic_spec(data, path):
    return _build(CriticSpec, data, path, {
        "multi": lambda d, p: _build(MultiTrajConfig, d, p, {k: _int for k in ("T", "T_prime", "M", "M_prime")}),
        "vrtd": _vrtd_config,
    })


def _schedule(data, path):
    conv = {"q": lambda v, p: math.inf if v in (None, "inf") else _number(v, p),
            "values": lambda v, p: tuple(_number(x, f"{p}[{i}]") for i, x in enumerate(v))}
    return _build(Schedule, data, path, conv)


def _regularizer(data, path):
    conv = {"omega": _number, "reference": lambda v, p: Policy(np.asarray(v, float))}
    return _build(Regularizer, data, path, conv)


@dataclasses.dataclass(frozen=True)
class FeatureSpec:
    kind: str = "exact"
    d: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "random"):
            raise ValueError(f"unknown feature kind {self.kind!r}")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    spmd: SpmdConfig
    features: FeatureSpec | None = None


def parse_train_config(data: dict, seed: int | None = None) -> TrainConfig:
    """Train config JSON -> TrainConfig. Keys: k_iters, seed, output_rule, schedule, critic, reg, features."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected an object")
    data = dict(data)
    feats = data.pop("features", None)
    spmd = _build(SpmdConfig, data, "", {"k_iters": _int, "seed": _int, "schedule": _schedule,
                                         "critic": _critic_spec, "reg": _regularizer})
    if spmd.k_iters < 0:
        raise ConfigError("k_iters", "must be >= 0")
    if seed is not None:
        spmd = dataclasses.replace(spmd, seed=seed)
    fspec = _build(FeatureSpec, feats, "features", {"d": _int, "seed": _int}) if feats is not None else None
    return TrainConfig(spmd, fspec)


def parse_bench_config(data: dict) -> BenchConfig:
    conv = {"seeds": lambda v, p: tuple(_int(x, f"{p}[{i}]") for i, x in enumerate(v))}
    return _build(BenchConfig, data, "", conv)


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _features(mdp, spec: FeatureSpec | None):
    spec = spec or FeatureSpec()
    return build_tabular_features(mdp, spec.d, spec.seed, kind=spec.kind)


# ---------------------------------------------------------------- subcommands


def cmd_gen_mdp(args) -> int:
    n_states, n_actions = args.scale or args.states, args.actions
    if args.paper_scale:
        n_states, n_actions = PAPER_SCALE["n_states"], PAPER_SCALE["n_actions"]
    spec = RandomMdpSpec(n_states, n_actions, args.zero_cost_fraction, (0.0, 10.0), args.temperature, args.seed)
    mdp = generate_random_mdp(spec)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "model.json")
    mdp.save(path)
    print(json.dumps({"model": path, "hash": model_hash(mdp), "n_states": n_states, "n_actions": n_actions}))
    return 0


def cmd_eval(args) -> int:
    mdp = TabularAmdp.load(args.model)
    pi = Policy.from_dict(_read_json(args.policy)) if args.policy else Policy.uniform(mdp.n_states, mdp.n_actions)
    cfg = _read_json(args.config) if args.config else {}
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "expected an object")
    cfg = dict(cfg)
    fspec = _build(FeatureSpec, cfg.pop("features", {}), "features", {"d": _int, "seed": _int})
    truth = differential_values(mdp, pi)
    report = {"critic": args.critic, "rho": truth.rho}
    if args.critic == "multiple_trajectory":
        mcfg = _build(MultiTrajConfig, cfg, "", {k: _int for k in ("T", "T_prime", "M", "M_prime")})
        oracle = GenerativeOracle(mdp, np.random.SeedSequence(args.seed).spawn(1)[0])
        out = multiple_trajectory_evaluate(oracle, pi, mcfg, seed=args.seed)
        q_hat = out.q_hat
    else:
        vcfg = _vrtd_config(cfg, "")
        feats = _features(mdp, fspec)
        model = projected_model(mdp, pi, feats)
        sim = TrajectorySimulator(mdp, pi, seed=args.seed)
        run = vrtd_run if args.critic == "vrtd" else evrtd_run
        out = run(sim, feats, vcfg, model=model)
        q_hat = out.q_table(mdp.n_states, mdp.n_actions)
        report["eps_approx"] = model.eps_approx
        report["theta"] = out.theta.tolist()
        report["perturbed"] = out.perturbed
        report["epochs"] = [{"epoch": r.epoch, "rho": r.rho, "samples": r.samples_used,
                             "d_norm_error": r.d_norm_error, "linf_error": r.linf_error} for r in out.trace]
    _, linf = best_linf_shift((q_hat - truth.q_bar).reshape(-1))
    report.update({"rho_hat": out.rho_hat, "rho_error": abs(out.rho_hat - truth.rho), "q_linf_error": linf,
                   "samples": out.samples_used, "q_hat": np.asarray(q_hat).tolist()})
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "critic_output.json"), report)
    print(json.dumps({k: report[k] for k in ("rho", "rho_hat", "rho_error", "q_linf_error", "samples")
                      + (("eps_approx",) if "eps_approx" in report else ())}))
    return 0


def train(mdp: TabularAmdp, tcfg: TrainConfig):
    feats = _features(mdp, tcfg.features) if tcfg.spmd.critic.kind in ("vrtd", "evrtd") else None
    return spmd_run(mdp, tcfg.spmd, feats)


def cmd_train(args) -> int:
    mdp = TabularAmdp.load(args.model)
    tcfg = parse_train_config(_read_json(args.config) if args.config else {"k_iters": 10}, args.seed)
    t0 = time.perf_counter()
    trace = train(mdp, tcfg)
    elapsed = time.perf_counter() - t0
    rows = [{"k": r.k, "rho": r.rho, "samples": r.samples, "lam": r.lam, "critic_rho": r.critic_rho,
             "perturbed": int(r.perturbed)} for r in trace.records]
    manifest = {"schema_version": SCHEMA_VERSION, "command": "train", "model_hash": model_hash(mdp),
                "config": _jsonable_config(tcfg), "seed": tcfg.spmd.seed, "total_samples": trace.total_samples,
                "output_index": trace.output_index}
    record = RunRecord(manifest, rows)
    os.makedirs(args.out, exist_ok=True)
    record.write(args.out, {"wall_clock_s": elapsed})
    final = {"probs": np.asarray(trace.final_policy).tolist()}
    if trace.theta_tilde is not None:
        final["theta_tilde"] = trace.theta_tilde.tolist()
    _write_json(os.path.join(args.out, "final_policy.json"), final)
    print(json.dumps({"out": args.out, "final_rho": rows[-1]["rho"], "total_samples": trace.total_samples}))
    return 0


def _jsonable_config(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable_config(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Policy):
        return obj.probs.tolist()
    if isinstance(obj, (list, tuple)):
        return [_jsonable_config(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


def cmd_bench(args) -> int:
    data = _read_json(args.config) if args.config else {}
    cfg = parse_bench_config(data)
    if args.scale:
        cfg = dataclasses.replace(cfg, n_states=args.scale)
    if args.paper_scale:
        cfg = dataclasses.replace(cfg, **PAPER_SCALE)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=tuple(range(args.seed, args.seed + len(cfg.seeds))))
    t0 = time.perf_counter()
    record = cmd_bench_figure1(cfg)
    record.write(args.out, {"wall_clock_s": time.perf_counter() - t0})
    print(json.dumps({"out": args.out, "rows": len(record.rows), "total_samples": record.manifest["total_samples"]}))
    return 0


def cmd_verify(args) -> int:
    report = run_verify(args.level, args.tol_scale, args.model, fail_fast=not args.all)
    text = report.to_json()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify.json"), "w") as f:
            f.write(text + "\n")
    print(text)
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amdp-lab", description="Average-cost MDP critic and actor experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("gen-mdp", help="generate a random instance")
    common(p, "out")
    p.add_argument("--states", type=int, default=30)
    p.add_argument("--actions", type=int, default=5)
    p.add_argument("--scale", type=int, help="number of states (overrides --states)")
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--zero-cost-fraction", type=float, default=0.95)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(fn=cmd_gen_mdp)

    p = sub.add_parser("eval", help="run one critic on a model and policy")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--policy", help="policy JSON (default uniform)")
    p.add_argument("--critic", choices=("multiple_trajectory", "vrtd", "evrtd"), default="vrtd")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("train", help="run SPMD from a config file")
    common(p, "out")
    p.add_argument("--model", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench-figure1", help="SPMD-VRTD vs SPMD-EVRTD on random instances")
    common(p, "out")
    p.add_argument("--scale", type=int, help="number of states")
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="run the invariant suites")
    p.add_argument("--level", choices=("quick", "full"), default="quick")
    p.add_argument("--scale", dest="tol_scale", type=float, default=1.0, help="tolerance multiplier")
    p.add_argument("--model", help="also validate this model file")
    p.add_argument("--all", action="store_true", help="keep going after the first failure")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None and args.command in ("gen-mdp", "eval"):
        args.seed = 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": exc.code, "path": exc.path, "message": str(exc)}), file=sys.stderr)
        return 2
    except AmdpError as exc:
        print(json.dumps({"error": exc.code, "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
