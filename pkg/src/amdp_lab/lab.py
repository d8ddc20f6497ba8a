"""Random instances and the SPMD-VRTD vs SPMD-EVRTD comparison harness."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .actor import CriticSpec, Schedule, SpmdConfig, spmd_run
from .core import TabularAmdp, solve_optimal
from .critics import VrtdConfig
from .features import build_tabular_features

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RandomMdpSpec:
    """Random instance: softmax kernel rows, mostly zero-cost states, per-state constant costs."""

    n_states: int = 30
    n_actions: int = 5
    zero_cost_fraction: float = 0.95
    cost_range: tuple = (0.0, 10.0)
    softmax_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.zero_cost_fraction <= 1.0:
            raise ValueError("zero_cost_fraction must lie in [0, 1]")
        lo, hi = self.cost_range
        if lo > hi:
            raise ValueError("cost_range must be ordered")
        if self.softmax_temperature <= 0:
            raise ValueError("softmax_temperature must be positive")
        if self.n_states < 2 or self.n_actions < 1:
            raise ValueError("need n_states >= 2 and n_actions >= 1")


def generate_random_mdp(spec: RandomMdpSpec) -> TabularAmdp:
    """Kernel rows are softmax(U / temperature) with U uniform on ``cost_range``.

    floor(zero_cost_fraction |S|) randomly chosen states have zero cost; each of
    the others gets one cost drawn from ``cost_range``, shared by all actions.
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.cost_range
    n, m = spec.n_states, spec.n_actions
    logits = rng.uniform(lo, hi, size=(n, m, n)) / spec.softmax_temperature
    logits -= logits.max(axis=2, keepdims=True)
    kernel = np.exp(logits)
    kernel /= kernel.sum(axis=2, keepdims=True)
    n_zero = int(np.floor(spec.zero_cost_fraction * n))
    per_state = rng.uniform(lo, hi, size=n)
    per_state[rng.permutation(n)[:n_zero]] = 0.0
    cost = np.repeat(per_state[:, None], m, axis=1)
    return TabularAmdp(kernel, cost, cost_bound=max(abs(lo), abs(hi)))


def model_hash(mdp: TabularAmdp) -> str:
    """Content hash of the canonical model JSON."""
    return hashlib.sha256(json.dumps(mdp.to_dict(), sort_keys=True).encode()).hexdigest()


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("AMDP_LAB_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- figure-1 benchmark


@dataclass(frozen=True)
class BenchConfig:
    """SPMD-VRTD vs SPMD-EVRTD on random instances.

    The critic uses a practical schedule (fixed batches) rather than the theorem
    constants, which would need millions of samples per iteration. Half of the
    states are cost-free instead of 95%: with 30 states the rarer costly states
    leave every action gap below the critic noise and the comparison is a coin
    flip.
    """

    n_states: int = 30
    n_actions: int = 5
    seeds: tuple = tuple(range(10))
    k_iters: int = 100
    step_size: float = 1.0
    eta: float = 0.2
    t_inner: int = 40000
    n_batch: int = 10000
    n_prime: int = 5000
    k_epochs: int = 2
    tau: int = 1
    underline_pi: float = 0.2
    warm_start: bool = True
    zero_cost_fraction: float = 0.5
    softmax_temperature: float = 1.0

    def vrtd_config(self) -> VrtdConfig:
        return VrtdConfig.constant(self.eta, self.t_inner, self.n_batch, self.n_prime, self.k_epochs,
                                   self.tau, self.tau, self.underline_pi)


@dataclass
class RunRecord:
    manifest: dict
    rows: list = field(default_factory=list)

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema_version={SCHEMA_VERSION}\n")
        if self.rows:
            w = csv.DictWriter(buf, fieldnames=list(self.rows[0].keys()), lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def manifest_text(self) -> str:
        return json.dumps(self.manifest, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, timing: dict | None = None) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
            f.write(self.csv_text())
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            f.write(self.manifest_text())
        if timing is not None:
            with open(os.path.join(out_dir, "timing.json"), "w") as f:
                json.dump(timing, f, indent=2, sort_keys=True)


def _bench_seed(cfg: BenchConfig, seed: int):
    mdp = generate_random_mdp(RandomMdpSpec(cfg.n_states, cfg.n_actions, cfg.zero_cost_fraction,
                                            (0.0, 10.0), cfg.softmax_temperature, seed))
    pi_star, rho_star = solve_optimal(mdp)
    feats = build_tabular_features(mdp, kind="exact")
    vcfg = cfg.vrtd_config()
    rows, totals = [], {}
    for critic in ("vrtd", "evrtd"):
        spmd = SpmdConfig(k_iters=cfg.k_iters, schedule=Schedule("constant", value=cfg.step_size),
                          critic=CriticSpec(critic, vrtd=vcfg, warm_start=cfg.warm_start),
                          output_rule="last_iterate", seed=seed)
        trace = spmd_run(mdp, spmd, feats)
        totals[critic] = trace.total_samples
        for rec in trace.records[1:]:
            prev = trace.records[rec.k - 1]
            rows.append({"seed": seed, "critic": critic, "k": rec.k, "rho": rec.rho,
                         "rho_star": rho_star, "samples": prev.samples, "perturbed": int(prev.perturbed)})
    deterministic = bool(np.all(pi_star.probs.max(axis=1) == 1.0))
    return rows, totals, model_hash(mdp), deterministic


def cmd_bench_figure1(cfg: BenchConfig) -> RunRecord:
    """Per-iteration exact rho(pi_k) of both actors, k = 1..K, on every seed.

    ``samples`` and ``perturbed`` describe the critic run that produced pi_k.
    """
    workers = min(n_threads(), len(cfg.seeds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda s: _bench_seed(cfg, s), cfg.seeds))
    else:
        results = [_bench_seed(cfg, s) for s in cfg.seeds]
    rows, hashes, samples, det = [], {}, {}, {}
    for seed, (r, totals, h, d) in zip(cfg.seeds, results):
        rows.extend(r)
        hashes[str(seed)] = h
        samples[str(seed)] = totals
        det[str(seed)] = d
    manifest = {"schema_version": SCHEMA_VERSION, "command": "bench-figure1", "config": _jsonable(asdict(cfg)),
                "model_hashes": hashes, "samples": samples, "pi_star_deterministic": det,
                "total_samples": int(sum(v for t in samples.values() for v in t.values()))}
    return RunRecord(manifest, rows)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
