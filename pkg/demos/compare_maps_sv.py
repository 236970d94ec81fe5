"""Prior, Laplace and EIS transport maps on one simulated SV series.

Prints acceptance rate, the smallest ESS over the monitored quantities and
ESS per second for each map.  Takes a few minutes on one core.

    python3 demos/compare_maps_sv.py [--D 300] [--iters 1500]
"""
import argparse

from tmhmc.cli import RunConfig, run_experiment
from tmhmc.models import get_model, simulate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--D", type=int, default=300)
    ap.add_argument("--iters", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    model = get_model("sv")
    ds = simulate(model, model.default_theta, args.D, args.seed)
    burnin = args.iters // 3
    print(f"{'map':<10}{'L':>4}{'accept':>9}{'min ESS':>10}{'ESS/s':>9}")
    for name, L in (("prior", 16), ("laplace", 4), ("eis", 4)):
        cfg = RunConfig(model="sv", map=name, L=L, iters=args.iters, burnin=burnin,
                        seed=args.seed, data="<memory>")
        _, chains, summaries, _ = run_experiment(cfg, dataset=ds, log=lambda *a: None)
        s = summaries[0]
        worst = min(s.quantities, key=lambda q: q.ess)
        print(f"{name:<10}{L:>4}{chains[0].accept_rate:>9.3f}{worst.ess:>10.1f}{worst.ess_per_s:>9.2f}")


if __name__ == "__main__":
    main()
