"""Discrete-time stochastic volatility model.

    y_t = exp(x_t / 2) e_t,          e_t ~ N(0, 1)
    x_t = gamma + delta x_{t-1} + nu eta_t,
    x_1 ~ N(gamma / (1 - delta), nu^2 / (1 - delta^2))

Unconstrained parameters: (gamma, arctanh delta, log nu^2).
"""

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from tmhmc.models.base import (
    LOG_2PI,
    Dataset,
    StateSpaceModel,
    inv_gamma_logpdf,
    sym_beta_prior,
)

# scaled inverse chi-square(p0, s0) == InvGamma(p0 / 2, p0 s0 / 2)
P0, S0 = 10.0, 0.01
MIN_Y2 = 1e-12


@dataclass(frozen=True)
class SVModel(StateSpaceModel):
    name = "sv"
    fisher_location = "zero"
    default_theta = {"gamma": -0.021, "delta": 0.98, "nu": 0.15}

    @property
    def param_names(self):
        return ("gamma", "delta", "nu")

    def _natural(self, ts):
        return ts[0], jnp.tanh(ts[1]), jnp.exp(ts[2])

    def to_constrained(self, ts):
        gamma, delta, nu2 = self._natural(ts)
        return jnp.stack([gamma, delta, jnp.sqrt(nu2)])

    def to_unconstrained(self, tc):
        tc = jnp.asarray(tc, dtype=jnp.float64)
        return jnp.stack([tc[0], jnp.arctanh(tc[1]), jnp.log(tc[2] ** 2)])

    def transform_logjac(self, ts):
        delta = jnp.tanh(ts[1])
        return jnp.log1p(-(delta**2)) + ts[2]

    def log_prior(self, ts):
        _, delta, nu2 = self._natural(ts)
        # flat prior on gamma
        lp = sym_beta_prior(delta) + inv_gamma_logpdf(nu2, P0 / 2, P0 * S0 / 2)
        return lp + self.transform_logjac(ts)

    def ar1(self, ts):
        gamma, delta, nu2 = self._natural(ts)
        nu = jnp.sqrt(nu2)
        return (gamma / (1.0 - delta))[None], delta[None], nu[None]

    def initial(self, ts, data):
        mean, delta, nu = self.ar1(ts)
        return mean, nu / jnp.sqrt(1.0 - delta**2)

    def transition(self, ts, x_prev):
        gamma, delta, nu2 = self._natural(ts)
        return gamma + delta * x_prev, jnp.sqrt(nu2) * jnp.ones_like(x_prev)

    def meas_params(self, ts, data):
        return (data**2)[None, :]

    def log_g(self, ts, x, y2):
        return -0.5 * LOG_2PI - 0.5 * x - 0.5 * y2 * jnp.exp(-x)

    def meas_mode(self, ts, y2):
        h = jnp.log(jnp.maximum(y2, MIN_Y2))
        return h, jnp.full_like(h, 0.5)

    def simulate(self, tc, D, seed):
        gamma, delta, nu = tc
        rng = np.random.default_rng(seed)
        x = np.empty(D)
        x[0] = gamma / (1 - delta) + nu / np.sqrt(1 - delta**2) * rng.standard_normal()
        eta = rng.standard_normal(D)
        for t in range(1, D):
            x[t] = gamma + delta * x[t - 1] + nu * eta[t]
        y = np.exp(x / 2) * rng.standard_normal(D)
        return Dataset(y=y, x=x[None, :], theta=dict(zip(self.param_names, map(float, tc))))
