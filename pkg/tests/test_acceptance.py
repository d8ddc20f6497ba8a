"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""
import json

import numpy as np

from amdp_lab.actor import Schedule, SpmdConfig, spmd_run
from amdp_lab.cli import main as cli_main
from amdp_lab.core import (
    Policy,
    Regularizer,
    average_cost,
    bellman_residuals,
    differential_values,
    ergodicity_gamma,
    induced_state_action_kernel,
    induced_state_kernel,
    mixing_time,
    performance_difference,
    policy_gradient,
    solve_optimal,
    stationary_distribution,
    stationary_info,
)
from amdp_lab.critics import (
    MultiTrajConfig,
    VrtdConfig,
    construct_perturbed_policy,
    critic_error_report,
    default_tau,
    evrtd_run,
    expected_rho_hat,
    multiple_trajectory_evaluate,
    underline_pi_bound,
    vrtd_default_schedule,
    vrtd_run,
)
from amdp_lab.features import (
    build_tabular_features,
    monotonicity_constant,
    perturbed_monotonicity_floor,
    projected_model,
    weighting_matrix,
)
from amdp_lab.lab import BenchConfig, RandomMdpSpec, cmd_bench_figure1, generate_random_mdp
from amdp_lab.samplers import GenerativeOracle, TrajectorySimulator


def small_mdp(seed, n_states=6, n_actions=3, temperature=1.0, zero_cost=0.5):
    return generate_random_mdp(RandomMdpSpec(n_states, n_actions, zero_cost, (0.0, 10.0), temperature, seed))


def dirichlet_policy(rng, n_states, n_actions):
    return Policy(rng.dirichlet(np.ones(n_actions), size=n_states))


def contraction_summary(errors):
    """Criterion-5 protocol on a (seeds, 1 + epochs) array of D-norm errors.

    Returns (ok, medians, floor, ratios): the floor is the mean median over the
    last three epochs; each of the first three epochs must shrink the median by
    at least 1.8 whenever the median entering it is at least 10x the floor.
    """
    med = np.median(np.asarray(errors), axis=0)
    floor = float(np.mean(med[-3:]))
    ratios, ok = [], True
    for k in range(1, 4):
        ratio = med[k - 1] / med[k]
        ratios.append(ratio)
        if med[k - 1] >= 10 * floor and ratio < 1.8:
            ok = False
    return ok, med, floor, ratios


def test_c01_oracle_exactness(criterion):
    rep = criterion("C1 oracle exactness")
    rng = np.random.default_rng(0)
    worst_bell = worst_pd = worst_grad = 0.0
    for seed in range(50):
        mdp = small_mdp(seed)
        pi = dirichlet_policy(rng, 6, 3)
        pi_new = dirichlet_policy(rng, 6, 3)
        dv = differential_values(mdp, pi)
        worst_bell = max(worst_bell, *bellman_residuals(mdp, pi, dv))
        gap = average_cost(mdp, pi_new) - dv.rho
        worst_pd = max(worst_pd, abs(gap - performance_difference(mdp, pi, pi_new)))
        grad = policy_gradient(mdp, pi)
        h = 1e-5
        dd, fd = [], []
        for _ in range(4):
            direction = rng.normal(size=(6, 3))
            direction -= direction.mean(axis=1, keepdims=True)
            plus = average_cost(mdp, pi.probs + h * direction)
            minus = average_cost(mdp, pi.probs - h * direction)
            fd.append((plus - minus) / (2 * h))
            dd.append(float((grad * direction).sum()))
        rel = np.linalg.norm(np.subtract(dd, fd)) / np.linalg.norm(fd)
        worst_grad = max(worst_grad, rel)
    ok = worst_bell <= 1e-10 and worst_pd <= 1e-8 and worst_grad <= 1e-6
    rep.check(ok, f"max Bellman residual {worst_bell:.2e} (<=1e-10), perf-diff error {worst_pd:.2e} (<=1e-8), "
                  f"gradient rel error {worst_grad:.2e} (<=1e-6)", 10)


def test_c02_mixing_bound(criterion):
    rep = criterion("C2 mixing bound")
    worst = 0.0
    for seed in range(20):
        mdp = small_mdp(seed, 8, 3, temperature=0.5)
        pi = dirichlet_policy(np.random.default_rng(seed), 8, 3)
        p = induced_state_kernel(mdp, pi)
        nu = stationary_distribution(p)
        t = mixing_time(p, nu)
        for mult in (1, 2, 5):
            k = mult * t
            norm = np.abs(np.linalg.matrix_power(p, k) - nu[None, :]).sum(axis=1).max()
            worst = max(worst, norm / 0.5 ** (k // t))
    rep.check(worst <= 1.0, f"max ||P^k - 1 nu^T||_inf / (1/2)^floor(k/t_mix) = {worst:.3f} (<=1)", 5)


def test_c03_multiple_trajectory_bias(criterion):
    rep = criterion("C3 multiple-trajectory bias")
    worst = 0.0
    for seed in range(10):
        mdp = small_mdp(seed)
        pi = Policy.uniform(6, 3)
        info = stationary_info(mdp, pi)
        for mult in (2, 4, 8):
            T = mult * info.t_mix
            bias = abs(expected_rho_hat(mdp, pi, T) - info.rho)
            worst = max(worst, bias / (mdp.cost_bound * 0.5 ** (T // info.t_mix)))
    # sampled mode: start at the state whose cost is farthest from rho so the bias is visible
    mdp = small_mdp(0)
    pi = Policy.uniform(6, 3)
    info = stationary_info(mdp, pi)
    c_pi = (pi.probs * mdp.cost).sum(axis=1)
    init = np.eye(6)[int(np.argmax(np.abs(c_pi - info.rho)))]
    lengths = (1, 2, 4)
    sampled = []
    for T in lengths:
        vals = [multiple_trajectory_evaluate(GenerativeOracle(mdp, r), pi, MultiTrajConfig(T, 1, M=200),
                                             seed=10**6 + r, init_dist=init).rho_hat for r in range(400)]
        sampled.append(abs(np.mean(vals) - info.rho))
    monotone = all(a > b for a, b in zip(sampled, sampled[1:]))
    ok = worst <= 1.0 and monotone
    rep.check(ok, f"exact |E rho_hat - rho| / bound max {worst:.3f} (<=1); sampled bias at T={lengths}: "
                  f"{np.round(sampled, 4).tolist()} (strictly decreasing)", 60)


def test_c04_rho_accuracy(criterion):
    rep = criterion("C4 rho-tilde accuracy")
    mdp = small_mdp(0)
    pi = Policy.uniform(6, 3)
    info = stationary_info(mdp, pi)
    feats = build_tabular_features(mdp)
    tau = default_tau(info.t_mix)
    parts, ok = [], True
    for n_prime in (50, 200):
        cfg = VrtdConfig.constant(0.05, 50, 50, n_prime, 2, tau, tau)
        sq = np.array([(vrtd_run(TrajectorySimulator(mdp, pi, seed=r), feats, cfg).rho_hat - info.rho) ** 2
                       for r in range(200)])
        mean, se = sq.mean(), sq.std(ddof=1) / np.sqrt(len(sq))
        bound = 5 * mdp.cost_bound**2 / n_prime + 3 * se
        ok &= mean <= bound
        parts.append(f"N'={n_prime}: {mean:.4f} <= {bound:.3f}")
    rep.check(ok, "mean (rho_K - rho)^2 vs 5 c^2/N' + 3 SE: " + ", ".join(parts), 60)


def test_c05_vrtd_epoch_contraction(criterion):
    rep = criterion("C5 VRTD epoch contraction")
    mdp = generate_random_mdp(RandomMdpSpec(20, 2, 0.95, (0.0, 10.0), 5.0, 1))
    pi = Policy.uniform(20, 2)
    info = stationary_info(mdp, pi)
    feats = build_tabular_features(mdp)
    model = projected_model(mdp, pi, feats)
    cfg = vrtd_default_schedule(model.one_minus_beta, model.mu, info.t_mix, 6, 1000, 1000)
    errors = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        theta0 = model.theta_star + 1e2 * rng.standard_normal(feats.d)
        out = vrtd_run(TrajectorySimulator(mdp, pi, seed), feats, cfg, theta0, model=model)
        errors.append([model.d_norm_sq(feats.psi, theta0)] + [r.d_norm_error for r in out.trace])
    ok, med, floor, ratios = contraction_summary(errors)
    rep.check(ok, f"median errors {np.array2string(med, precision=3)}, floor {floor:.2e}, "
                  f"ratios {np.round(ratios, 1).tolist()} (>=1.8 above 10x floor)", 120)


def test_c06_bias_vs_error(criterion):
    rep = criterion("C6 VRTD bias vs error")
    mdp = small_mdp(0)
    pi = Policy.uniform(6, 3)
    feats = build_tabular_features(mdp)
    model = projected_model(mdp, pi, feats)
    cfg = VrtdConfig.constant(0.05, 1500, 1000, 1000, 8, 1, 1)
    theta0 = model.theta_star + 3.5 * np.random.default_rng(123).standard_normal(feats.d)
    epochs = (2, 4, 8)
    q = {k: [] for k in epochs}
    for r in range(100):
        out = vrtd_run(TrajectorySimulator(mdp, pi, seed=r), feats, cfg, theta0)
        for k in epochs:
            q[k].append(feats.psi @ out.trace[k - 1].theta)
    reps = {k: critic_error_report(q[k], model.q_bar) for k in epochs}
    bias = [reps[k].varsigma for k in epochs]
    mse = [reps[k].sigma_sq for k in epochs]
    plateau = abs(mse[1] / mse[2] - 1.0)
    ok = bias[0] > bias[1] > bias[2] and plateau <= 0.2
    rep.check(ok, f"varsigma at K={epochs}: {np.round(bias, 3).tolist()} (decreasing); sigma^2: "
                  f"{np.round(mse, 3).tolist()}, K=4 vs K=8 differ by {plateau:.1%} (<=20%)", 300)


def test_c07_evrtd(criterion):
    rep = criterion("C7 EVRTD correctness")
    # (a) bitwise reduction on uniform policies
    same = True
    for seed in range(5):
        mdp = small_mdp(seed)
        pi = Policy.uniform(6, 3)
        feats = build_tabular_features(mdp)
        cfg = VrtdConfig.constant(0.05, 300, 100, 100, 3, 2, 2, 0.2)
        a = vrtd_run(TrajectorySimulator(mdp, pi, seed), feats, cfg)
        b = evrtd_run(TrajectorySimulator(mdp, pi, seed), feats, cfg)
        same &= np.array_equal(a.theta, b.theta) and a.rho_hat == b.rho_hat and a.samples_used == b.samples_used
    # (b) monotonicity floor for deterministic policies
    floor_ok, margins = 0, []
    for seed in range(20):
        mdp = small_mdp(seed)
        rng = np.random.default_rng(seed)
        pi = Policy.deterministic(rng.integers(3, size=6), 3)
        feats = build_tabular_features(mdp, 3, seed=seed, kind="random")
        nu = stationary_distribution(induced_state_kernel(mdp, pi))
        p_sa = induced_state_action_kernel(mdp, pi)
        omb = monotonicity_constant(feats, weighting_matrix(nu, pi), p_sa, strict=False)
        level = underline_pi_bound(omb, nu.min(), 3, 1)
        pert = construct_perturbed_policy(pi, level)
        measured = monotonicity_constant(feats, weighting_matrix(nu, pert.pi_tilde), p_sa, strict=False)
        floor = perturbed_monotonicity_floor(omb, pert.alpha)
        floor_ok += measured >= floor
        margins.append(measured - floor)
    # (c) convergence where D^pi is singular
    mdp = small_mdp(0, 6, 2, temperature=10.0)
    rng = np.random.default_rng(0)
    pi = Policy.deterministic(rng.integers(2, size=6), 2)
    feats = build_tabular_features(mdp)
    level = 0.4
    pert = construct_perturbed_policy(pi, level)
    model = projected_model(mdp, pi, feats, pi_weights=pert.pi_tilde)
    t_mix = mixing_time(induced_state_kernel(mdp, pi))
    cfg = vrtd_default_schedule(model.one_minus_beta, model.mu, t_mix, 6, 1000, 1000, underline_pi=level)
    errors = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        theta0 = model.theta_star + 1e3 * r.standard_normal(feats.d)
        out = evrtd_run(TrajectorySimulator(mdp, pi, seed), feats, cfg, theta0, model=model)
        errors.append([model.d_norm_sq(feats.psi, theta0)] + [e.d_norm_error for e in out.trace])
    conv, med, floor_c, ratios = contraction_summary(errors)
    ok = same and floor_ok == 20 and conv
    rep.check(ok, f"(a) bitwise reduction {same}; (b) floor holds on {floor_ok}/20, min margin "
                  f"{min(margins):.2e}; (c) median errors {np.array2string(med, precision=3)}, "
                  f"ratios {np.round(ratios, 1).tolist()}", 120)


def test_c08_unregularized_scaling(criterion):
    rep = criterion("C8 SPMD unregularized scaling")
    gaps = {64: [], 256: []}
    for seed in range(10):
        mdp = generate_random_mdp(RandomMdpSpec(10, 3, 0.5, seed=seed))
        _, rho_star = solve_optimal(mdp)
        q0 = differential_values(mdp, Policy.uniform(10, 3)).q_bar
        kappa = float(np.ptp(q0)) / 2.0
        for K in gaps:
            trace = spmd_run(mdp, SpmdConfig(K, Schedule("thm3", kappa=kappa)))
            gaps[K].append(min(r.rho for r in trace.records[:K]) - rho_star)
    g64, g256 = np.mean(gaps[64]), np.mean(gaps[256])
    rep.check(g256 <= g64 / 1.5, f"mean best gap K=64 {g64:.4f}, K=256 {g256:.4f}, ratio {g64 / g256:.2f} (>=1.5)", 60)


def test_c09_regularized(criterion):
    rep = criterion("C9 SPMD regularized")
    reg = Regularizer("negative_entropy", 1.0)
    worst_d, violations, steps = 0.0, 0, 0
    for seed in range(10):
        mdp = generate_random_mdp(RandomMdpSpec(10, 3, 0.5, (0.0, 10.0), 10.0, seed))
        pi_star, rho_star = solve_optimal(mdp, reg)
        gamma = ergodicity_gamma(mdp, extra=(pi_star,))
        trace = spmd_run(mdp, SpmdConfig(200, Schedule("thm4", gamma_bound=gamma), reg=reg), pi_star=pi_star)
        for a, b in zip(trace.records[:-1], trace.records[1:]):
            lam = a.lam
            lhs = (b.rho - rho_star) / (1 - gamma) + (1 / lam + reg.omega) * b.distance
            rhs = gamma / (1 - gamma) * (a.rho - rho_star) + a.distance / lam
            violations += lhs > rhs + 1e-10 * max(1.0, abs(rhs))
            steps += 1
        worst_d = max(worst_d, trace.records[-1].distance)
    ok = worst_d <= 1e-6 and violations == 0
    rep.check(ok, f"max D(pi_200, pi*) {worst_d:.2e} (<=1e-6); one-step recursion violated on "
                  f"{violations}/{steps} steps", 60)


def test_c10_figure1(criterion, tmp_path):
    rep = criterion("C10 Figure 1 reproduction")
    cfg = BenchConfig()
    record = cmd_bench_figure1(cfg)
    record.write(tmp_path)
    det = record.manifest["pi_star_deterministic"]
    final = {}
    for row in record.rows:
        if row["k"] == cfg.k_iters:
            final[(row["seed"], row["critic"])] = row["rho"]
    eligible = [s for s in cfg.seeds if det[str(s)]]
    wins = sum(final[(s, "evrtd")] <= final[(s, "vrtd")] for s in eligible)
    # trend: over the second half, the 10-iteration moving average never rises by more
    # than 1e-3 rho* per step, and its net change is below the same noise tolerance
    trend_ok = True
    worst_rise = worst_net = 0.0
    for s in cfg.seeds:
        rho = np.array([r["rho"] for r in record.rows if r["seed"] == s and r["critic"] == "evrtd"])
        rho_star = next(r["rho_star"] for r in record.rows if r["seed"] == s)
        ma = np.convolve(rho, np.ones(10) / 10, mode="valid")
        late = ma[len(ma) // 2:]
        rise = float(np.max(np.diff(late)) / rho_star)
        net = float((late[-1] - late[0]) / rho_star)
        worst_rise, worst_net = max(worst_rise, rise), max(worst_net, net)
        trend_ok &= rise <= 1e-3 and net <= 1e-3
    need = int(np.ceil(0.8 * len(eligible)))
    ok = len(eligible) > 0 and wins >= need and trend_ok
    rep.check(ok, f"EVRTD final rho <= VRTD on {wins}/{len(eligible)} seeds with deterministic pi* (need {need}); "
                  f"late-phase max moving-average step rise {worst_rise:.1e} rho*, "
                  f"max net change {worst_net:.1e} rho*", 600)


def test_c11_determinism_and_accounting(criterion, tmp_path):
    rep = criterion("C11 determinism and accounting")
    cfg = BenchConfig(seeds=(0, 1), k_iters=4, t_inner=500, n_batch=200, n_prime=100)
    a, b = cmd_bench_figure1(cfg), cmd_bench_figure1(cfg)
    identical = a.csv_text() == b.csv_text() and a.manifest_text() == b.manifest_text()
    per_run = cfg.vrtd_config().total_samples()
    counters = {(r["seed"], r["critic"]): 0 for r in a.rows}
    for r in a.rows:
        counters[(r["seed"], r["critic"])] += r["samples"]
    closed = all(a.manifest["samples"][str(s)][c] == counters[(s, c)] == cfg.k_iters * per_run
                 for s, c in counters)
    total_ok = a.manifest["total_samples"] == sum(counters.values())
    # simulator and oracle counters against their closed forms
    mdp = small_mdp(3)
    pi = Policy.uniform(6, 3)
    vcfg = VrtdConfig(0.05, 70, (30, 40), (20, 10), 2, 3)
    sim = TrajectorySimulator(mdp, pi, 0)
    vrtd_run(sim, build_tabular_features(mdp), vcfg)
    mcfg = MultiTrajConfig(7, 5, 3, 2)
    oracle = GenerativeOracle(mdp, 0)
    multiple_trajectory_evaluate(oracle, pi, mcfg, seed=1)
    counters_ok = sim.steps == vcfg.total_samples() and oracle.queries == mcfg.queries(6, 3)
    # CLI train runs reproduce bytes
    model_dir = tmp_path / "m"
    cli_main(["gen-mdp", "--states", "6", "--actions", "3", "--seed", "4", "--out", str(model_dir)])
    conf = tmp_path / "train.json"
    conf.write_text(json.dumps({"k_iters": 3, "schedule": {"kind": "constant", "value": 0.5},
                                "critic": {"kind": "evrtd", "vrtd": {"eta": 0.05, "t_inner": 200, "n": 50,
                                                                     "n_prime": 50, "k_epochs": 2,
                                                                     "underline_pi": 0.1}}}))
    outs = []
    for run in ("r1", "r2"):
        cli_main(["train", "--model", str(model_dir / "model.json"), "--config", str(conf), "--seed", "9",
                  "--out", str(tmp_path / run)])
        outs.append(((tmp_path / run / "metrics.csv").read_bytes(), (tmp_path / run / "manifest.json").read_bytes()))
    cli_same = outs[0] == outs[1]
    ok = identical and closed and total_ok and counters_ok and cli_same
    rep.check(ok, f"bench bytes identical {identical}; manifest totals == counters == K x closed form {closed}; "
                  f"grand total {total_ok}; simulator/oracle counters {counters_ok}; CLI train bytes identical "
                  f"{cli_same}", 60)
