"""Per-epoch error of VRTD under the default schedule, averaged over seeds.

The weighted error ||Psi theta_k - Psi theta*||_D^2 should shrink by a constant
factor per epoch until it reaches the noise floor set by the batch sizes.

    python scripts/run_vrtd_contraction.py --epochs 6 --seeds 20
"""
import argparse

import numpy as np

from amdp_lab.core import Policy, induced_state_kernel, mixing_time
from amdp_lab.critics import vrtd_default_schedule, vrtd_run
from amdp_lab.features import build_tabular_features, projected_model
from amdp_lab.lab import RandomMdpSpec, generate_random_mdp
from amdp_lab.samplers import TrajectorySimulator


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--states", type=int, default=20)
    p.add_argument("--actions", type=int, default=2)
    p.add_argument("--temperature", type=float, default=5.0)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--batch", type=int, default=1000)
    p.add_argument("--init-scale", type=float, default=100.0)
    args = p.parse_args()

    mdp = generate_random_mdp(RandomMdpSpec(args.states, args.actions, 0.95, (0.0, 10.0), args.temperature, 1))
    pi = Policy.uniform(args.states, args.actions)
    feats = build_tabular_features(mdp)
    model = projected_model(mdp, pi, feats)
    t_mix = mixing_time(induced_state_kernel(mdp, pi))
    cfg = vrtd_default_schedule(model.one_minus_beta, model.mu, t_mix, args.epochs, args.batch, args.batch)
    print(f"1-beta={model.one_minus_beta:.3f} mu={model.mu:.2e} t_mix={t_mix} eta={cfg.eta:.2e} "
          f"T={cfg.t_inner} N_k={list(cfg.n_k)} samples/run={cfg.total_samples()}")
    errors = []
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        theta0 = model.theta_star + args.init_scale * rng.standard_normal(feats.d)
        out = vrtd_run(TrajectorySimulator(mdp, pi, seed), feats, cfg, theta0, model=model)
        errors.append([model.d_norm_sq(feats.psi, theta0)] + [r.d_norm_error for r in out.trace])
    med = np.median(np.array(errors), axis=0)
    print(f"{'epoch':>5} {'median error':>14} {'ratio':>8}")
    for k, e in enumerate(med):
        ratio = f"{med[k - 1] / e:8.1f}" if k else ""
        print(f"{k:>5} {e:14.4e} {ratio}")


if __name__ == "__main__":
    main()
