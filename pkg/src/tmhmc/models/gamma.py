"""Gamma state-space model for realized variances.

    y_t = beta exp(x_t) e_t,   e_t ~ Gamma(shape 1/tau, scale tau)
    x_t = delta x_{t-1} + nu eta_t,   x_1 ~ N(0, nu^2 / (1 - delta^2))

Unconstrained parameters: (log tau, log beta, arctanh delta, log nu^2).
"""

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np
from jax.scipy.special import gammaln

from tmhmc.errors import DataError
from tmhmc.models.base import Dataset, StateSpaceModel, inv_gamma_logpdf, sym_beta_prior

P0, S0 = 10.0, 0.01
MIN_Y = 1e-12


@dataclass(frozen=True)
class GammaModel(StateSpaceModel):
    name = "gamma"
    fisher_location = "laplace"
    default_theta = {"tau": 0.13, "beta": 2.7, "delta": 0.98, "nu": 0.22}

    @property
    def param_names(self):
        return ("tau", "beta", "delta", "nu")

    def to_constrained(self, ts):
        return jnp.stack(
            [jnp.exp(ts[0]), jnp.exp(ts[1]), jnp.tanh(ts[2]), jnp.exp(0.5 * ts[3])]
        )

    def to_unconstrained(self, tc):
        tc = jnp.asarray(tc, dtype=jnp.float64)
        return jnp.stack(
            [jnp.log(tc[0]), jnp.log(tc[1]), jnp.arctanh(tc[2]), jnp.log(tc[3] ** 2)]
        )

    def transform_logjac(self, ts):
        # log tau and log beta carry flat priors directly
        delta = jnp.tanh(ts[2])
        return jnp.log1p(-(delta**2)) + ts[3]

    def log_prior(self, ts):
        delta = jnp.tanh(ts[2])
        nu2 = jnp.exp(ts[3])
        lp = sym_beta_prior(delta) + inv_gamma_logpdf(nu2, P0 / 2, P0 * S0 / 2)
        return lp + self.transform_logjac(ts)

    def validate(self, dataset):
        super().validate(dataset)
        if np.any(np.asarray(dataset.y) <= 0):
            raise DataError("gamma: realized variances must be strictly positive")

    def ar1(self, ts):
        delta = jnp.tanh(ts[2])
        nu = jnp.exp(0.5 * ts[3])
        return jnp.zeros(1), delta[None], nu[None]

    def initial(self, ts, data):
        _, delta, nu = self.ar1(ts)
        return jnp.zeros(1), nu / jnp.sqrt(1.0 - delta**2)

    def transition(self, ts, x_prev):
        delta = jnp.tanh(ts[2])
        return delta * x_prev, jnp.exp(0.5 * ts[3]) * jnp.ones_like(x_prev)

    def log_g(self, ts, x, y):
        tau = jnp.exp(ts[0])
        log_beta = ts[1]
        k = 1.0 / tau
        log_e = jnp.log(y) - log_beta - x
        e = jnp.exp(log_e)
        return (k - 1.0) * log_e - e / tau - k * ts[0] - gammaln(k) - log_beta - x

    def meas_mode(self, ts, y):
        h = jnp.log(jnp.maximum(y, MIN_Y)) - ts[1]
        return h, jnp.full_like(h, jnp.exp(-ts[0]))

    def simulate(self, tc, D, seed):
        tau, beta, delta, nu = tc
        rng = np.random.default_rng(seed)
        x = np.empty(D)
        x[0] = nu / np.sqrt(1 - delta**2) * rng.standard_normal()
        eta = rng.standard_normal(D)
        for t in range(1, D):
            x[t] = delta * x[t - 1] + nu * eta[t]
        e = rng.gamma(shape=1.0 / tau, scale=tau, size=D)
        y = beta * np.exp(x) * e
        return Dataset(y=y, x=x[None, :], theta=dict(zip(self.param_names, map(float, tc))))
