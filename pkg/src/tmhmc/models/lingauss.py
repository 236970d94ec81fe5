"""Local-level linear Gaussian model, used as an exactly solvable fixture.

    y_t = x_t + sigma_y e_t
    x_t = mu + delta (x_{t-1} - mu) + sigma_x eta_t,
    x_1 ~ N(mu, sigma_x^2 / (1 - delta^2))

The posterior of x given theta is Gaussian and lies inside every kernel
family used here, so Laplace and EIS maps decouple exactly.
:func:`kalman_loglik` is a plain numpy filter kept independent of the JAX
code paths it is used to check.

Unconstrained parameters: (mu, arctanh delta, log sigma_x^2, log sigma_y^2).
"""

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from tmhmc.models.base import Dataset, StateSpaceModel, inv_gamma_logpdf, norm_logpdf


@dataclass(frozen=True)
class LinGaussModel(StateSpaceModel):
    name = "lingauss"
    fisher_location = "laplace"
    default_theta = {"mu": 0.5, "delta": 0.9, "sigma_x": 0.5, "sigma_y": 0.7}

    @property
    def param_names(self):
        return ("mu", "delta", "sigma_x", "sigma_y")

    def to_constrained(self, ts):
        return jnp.stack([ts[0], jnp.tanh(ts[1]), jnp.exp(0.5 * ts[2]), jnp.exp(0.5 * ts[3])])

    def to_unconstrained(self, tc):
        tc = jnp.asarray(tc, dtype=jnp.float64)
        return jnp.stack([tc[0], jnp.arctanh(tc[1]), jnp.log(tc[2] ** 2), jnp.log(tc[3] ** 2)])

    def transform_logjac(self, ts):
        delta = jnp.tanh(ts[1])
        return jnp.log1p(-(delta**2)) + ts[2] + ts[3]

    def log_prior(self, ts):
        lp = norm_logpdf(ts[0], 0.0, 5.0) - jnp.log(2.0)
        lp = lp + inv_gamma_logpdf(jnp.exp(ts[2]), 2.0, 0.5)
        lp = lp + inv_gamma_logpdf(jnp.exp(ts[3]), 2.0, 0.5)
        return lp + self.transform_logjac(ts)

    def ar1(self, ts):
        return ts[:1], jnp.tanh(ts[1])[None], jnp.exp(0.5 * ts[2])[None]

    def initial(self, ts, data):
        mu, delta, sd = self.ar1(ts)
        return mu, sd / jnp.sqrt(1.0 - delta**2)

    def transition(self, ts, x_prev):
        mu, delta = ts[0], jnp.tanh(ts[1])
        return mu + delta * (x_prev - mu), jnp.exp(0.5 * ts[2]) * jnp.ones_like(x_prev)

    def log_g(self, ts, x, y):
        return norm_logpdf(y, x, jnp.exp(0.5 * ts[3]))

    def meas_mode(self, ts, y):
        return y, jnp.full_like(y, jnp.exp(-ts[3]))

    def simulate(self, tc, D, seed):
        mu, delta, sx, sy = tc
        rng = np.random.default_rng(seed)
        x = np.empty(D)
        x[0] = mu + sx / np.sqrt(1 - delta**2) * rng.standard_normal()
        eta = rng.standard_normal(D)
        for t in range(1, D):
            x[t] = mu + delta * (x[t - 1] - mu) + sx * eta[t]
        y = x + sy * rng.standard_normal(D)
        return Dataset(y=y, x=x[None, :], theta=dict(zip(self.param_names, map(float, tc))))


def kalman_loglik(y, mu, delta, sigma_x, sigma_y):
    """Exact log p(y | theta) for the local-level model (constrained inputs)."""
    y = np.asarray(y, dtype=float)
    a = mu
    P = sigma_x**2 / (1.0 - delta**2)
    ll = 0.0
    for yt in y:
        F = P + sigma_y**2
        v = yt - a
        ll += -0.5 * (np.log(2 * np.pi * F) + v * v / F)
        Kg = P / F
        a_f = a + Kg * v
        P_f = P * (1.0 - Kg)
        a = mu + delta * (a_f - mu)
        P = delta**2 * P_f + sigma_x**2
    return ll


def kalman_smoother(y, mu, delta, sigma_x, sigma_y):
    """Posterior mean and covariance of x | y, theta via dense Gaussian algebra."""
    y = np.asarray(y, dtype=float)
    D = y.shape[0]
    idx = np.arange(D)
    cov = sigma_x**2 / (1 - delta**2) * delta ** np.abs(idx[:, None] - idx[None, :])
    prec = np.linalg.inv(cov) + np.eye(D) / sigma_y**2
    post_cov = np.linalg.inv(prec)
    mean = post_cov @ (np.linalg.solve(cov, np.full(D, mu)) + y / sigma_y**2)
    return mean, post_cov
