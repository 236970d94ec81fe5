"""On the linear Gaussian model the one-step Laplace map is exact.

The importance weight log p(y, x(u) | theta) - log N(u) is then the same
for every u and equals the Kalman filter log-likelihood.
"""
import numpy as np

from tmhmc import transport
from tmhmc.models import get_model, kalman_loglik, simulate


def main():
    model = get_model("lingauss")
    ds = simulate(model, model.default_theta, 100, 0)
    data = model.prepare(ds)
    ts = model.theta_from_dict(model.default_theta)
    target = transport.ModifiedTarget(model, transport.Laplace(1), data)
    rng = np.random.default_rng(0)
    lw = np.array([float(target.log_weight(ts, rng.standard_normal((1, ds.D)))) for _ in range(50)])
    ref = kalman_loglik(ds.y, **model.default_theta)
    print(f"log-weight over 50 draws: mean {lw.mean():.10f}  sd {lw.std():.2e}")
    print(f"Kalman log-likelihood:          {ref:.10f}")


if __name__ == "__main__":
    main()
