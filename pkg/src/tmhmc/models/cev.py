"""Discretized CEV short-rate diffusion observed with small Gaussian noise.

    y_t = x_t + sigma_y e_t
    x_t = x_{t-1} + dt (alpha - beta x_{t-1}) + sigma_x x_{t-1}^gamma sqrt(dt) eta_t
    x_1 ~ N(y_1, 0.01^2),   dt = 1/252

Unconstrained parameters: (alpha, beta, logit(gamma / 4), log sigma_x^2,
log sigma_y^2). The state volatility depends on the level, so the latent
prior has no closed-form precision and the Fisher map is unavailable.
"""

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from tmhmc.models.base import Dataset, StateSpaceModel, norm_logpdf

DT = 1.0 / 252.0
X1_SD = 0.01
PRIOR_VAR = 1000.0
GAMMA_MAX = 4.0


@dataclass(frozen=True)
class CEVModel(StateSpaceModel):
    name = "cev"
    laplace_init = "data"
    default_theta = {
        "alpha": 0.01,
        "beta": 0.17,
        "gamma": 1.18,
        "sigma_x": 0.41,
        "sigma_y": 0.0005,
    }

    @property
    def param_names(self):
        return ("alpha", "beta", "gamma", "sigma_x", "sigma_y")

    def to_constrained(self, ts):
        return jnp.stack(
            [
                ts[0],
                ts[1],
                GAMMA_MAX * jax.nn.sigmoid(ts[2]),
                jnp.exp(0.5 * ts[3]),
                jnp.exp(0.5 * ts[4]),
            ]
        )

    def to_unconstrained(self, tc):
        tc = jnp.asarray(tc, dtype=jnp.float64)
        p = tc[2] / GAMMA_MAX
        return jnp.stack(
            [tc[0], tc[1], jnp.log(p) - jnp.log1p(-p), jnp.log(tc[3] ** 2), jnp.log(tc[4] ** 2)]
        )

    def transform_logjac(self, ts):
        z = ts[2]
        # d gamma / dz = 4 sig(z) (1 - sig(z))
        lj_gamma = jnp.log(GAMMA_MAX) - jax.nn.softplus(-z) - jax.nn.softplus(z)
        return lj_gamma + ts[3] + ts[4]

    def log_prior(self, ts):
        sd = jnp.sqrt(PRIOR_VAR)
        lp = norm_logpdf(ts[0], 0.0, sd) + norm_logpdf(ts[1], 0.0, sd)
        lp = lp - jnp.log(GAMMA_MAX)
        # p(sigma^2) proportional to 1 / sigma^2
        lp = lp - ts[3] - ts[4]
        return lp + self.transform_logjac(ts)

    def _dyn(self, ts):
        return ts[0], ts[1], GAMMA_MAX * jax.nn.sigmoid(ts[2]), jnp.exp(0.5 * ts[3])

    def initial(self, ts, data):
        return data[:1], jnp.full((1,), X1_SD)

    def transition(self, ts, x_prev):
        alpha, beta, gamma, sx = self._dyn(ts)
        m = x_prev + DT * (alpha - beta * x_prev)
        # NaN for non-positive levels, which the sampler treats as a rejection
        s = sx * jnp.exp(gamma * jnp.log(x_prev)) * jnp.sqrt(DT)
        return m, s

    def log_g(self, ts, x, y):
        return norm_logpdf(y, x, jnp.exp(0.5 * ts[4]))

    def meas_mode(self, ts, y):
        return y, jnp.full_like(y, jnp.exp(-ts[4]))

    def simulate(self, tc, D, seed):
        alpha, beta, gamma, sx, sy = tc
        rng = np.random.default_rng(seed)
        x = np.empty(D)
        # the stated x_1 law depends on y_1, so simulation starts near the
        # stationary level instead; reflection keeps the path positive
        x[0] = abs(alpha / beta + X1_SD * rng.standard_normal())
        eta = rng.standard_normal(D)
        for t in range(1, D):
            xp = x[t - 1]
            xn = xp + DT * (alpha - beta * xp) + sx * xp**gamma * np.sqrt(DT) * eta[t]
            x[t] = abs(xn)
        y = x + sy * rng.standard_normal(D)
        return Dataset(y=y, x=x[None, :], theta=dict(zip(self.param_names, map(float, tc))))
