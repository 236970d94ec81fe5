"""Inverse-Wishart model for realized covariance matrices.

    Y_t | Sigma_t ~ InvWishart(nu, Sigma_t),   Sigma_t = H diag(exp x_t) H^T
    x_{s,t} = mu_s + delta_s (x_{s,t-1} - mu_s) + sigma_s eta_{s,t}

``H`` is unit lower-triangular. Because ``|H| = 1`` the measurement density
factorizes over the ``r`` state series: series ``s`` sees the scalar
``ytilde_{s,t} = H[:, s]^T Y_t^{-1} H[:, s]`` and the kernel
``exp(nu x / 2 - ytilde exp(x) / 2)``.

Unconstrained parameters, in order: log(nu - (r + 1)), mu_{1:r},
arctanh delta_{1:r}, log sigma^2_{1:r}, then h_{i,j} (i > j) column by column.
"""

from dataclasses import dataclass
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import gammaln
from scipy import stats

from tmhmc.errors import DataError
from tmhmc.models.base import Dataset, StateSpaceModel, inv_gamma_logpdf, norm_logpdf

# posterior means reported for the five-asset application
_MU = (4.16, 4.12, 3.72, 4.11, 3.53)
_DELTA = (0.97, 0.98, 0.96, 0.94, 0.96)
_SIGMA = (0.31, 0.26, 0.29, 0.28, 0.25)
_NU = 33.61
_H = {(2, 1): 0.39, (3, 1): 0.29, (4, 1): 0.29, (5, 1): 0.23, (3, 2): 0.20,
      (4, 2): 0.17, (5, 2): 0.12, (4, 3): 0.22, (5, 3): 0.18, (5, 4): 0.11}


class WishartData(NamedTuple):
    Yinv: jax.Array  # (D, r, r)
    logdetY: jax.Array  # (D,)


def _lower_pairs(r):
    return [(i, j) for j in range(r) for i in range(j + 1, r)]


@dataclass(frozen=True)
class WishartModel(StateSpaceModel):
    r: int = 3
    name = "wishart"
    newton = "fixed"

    def __post_init__(self):
        if self.r < 2:
            raise ValueError("wishart model needs r >= 2")

    @property
    def n_series(self):
        return self.r

    @property
    def param_names(self):
        r = self.r
        names = ["nu"]
        names += [f"mu_{s + 1}" for s in range(r)]
        names += [f"delta_{s + 1}" for s in range(r)]
        names += [f"sigma_{s + 1}" for s in range(r)]
        names += [f"h_{i + 1}_{j + 1}" for i, j in _lower_pairs(r)]
        return tuple(names)

    @property
    def default_theta(self):
        r = self.r
        vals = {"nu": _NU}
        for s in range(r):
            vals[f"mu_{s + 1}"] = _MU[s] if s < 5 else 4.0
            vals[f"delta_{s + 1}"] = _DELTA[s] if s < 5 else 0.96
            vals[f"sigma_{s + 1}"] = _SIGMA[s] if s < 5 else 0.28
        for i, j in _lower_pairs(r):
            vals[f"h_{i + 1}_{j + 1}"] = _H.get((i + 1, j + 1), 0.2)
        return vals

    # --- parameter blocks --------------------------------------------------
    def _split(self, ts):
        r = self.r
        nu = (r + 1.0) + jnp.exp(ts[0])
        mu = ts[1 : 1 + r]
        delta = jnp.tanh(ts[1 + r : 1 + 2 * r])
        sig2 = jnp.exp(ts[1 + 2 * r : 1 + 3 * r])
        h = ts[1 + 3 * r :]
        return nu, mu, delta, sig2, h

    def H(self, ts):
        r = self.r
        pairs = _lower_pairs(r)
        rows = np.array([p[0] for p in pairs], dtype=int)
        cols = np.array([p[1] for p in pairs], dtype=int)
        h = self._split(ts)[4]
        return jnp.eye(r).at[rows, cols].set(h)

    def to_constrained(self, ts):
        nu, mu, delta, sig2, h = self._split(ts)
        return jnp.concatenate([nu[None], mu, delta, jnp.sqrt(sig2), h])

    def to_unconstrained(self, tc):
        r = self.r
        tc = jnp.asarray(tc, dtype=jnp.float64)
        return jnp.concatenate(
            [
                jnp.log(tc[0] - (r + 1.0))[None],
                tc[1 : 1 + r],
                jnp.arctanh(tc[1 + r : 1 + 2 * r]),
                jnp.log(tc[1 + 2 * r : 1 + 3 * r] ** 2),
                tc[1 + 3 * r :],
            ]
        )

    def transform_logjac(self, ts):
        r = self.r
        delta = jnp.tanh(ts[1 + r : 1 + 2 * r])
        return ts[0] + jnp.sum(jnp.log1p(-(delta**2))) + jnp.sum(ts[1 + 2 * r : 1 + 3 * r])

    def log_prior(self, ts):
        _, mu, _, sig2, h = self._split(ts)
        # flat on nu over (r + 1, inf); uniform(-1, 1) on each delta
        lp = jnp.sum(norm_logpdf(mu, 0.0, 5.0))
        lp = lp - self.r * jnp.log(2.0)
        lp = lp + jnp.sum(inv_gamma_logpdf(sig2, 2.0, 0.5))
        lp = lp + jnp.sum(norm_logpdf(h, 0.0, 10.0))
        return lp + self.transform_logjac(ts)

    # --- data -------------------------------------------------------------
    def validate(self, dataset):
        Y = np.asarray(dataset.y, dtype=float)
        if Y.ndim != 3 or Y.shape[1:] != (self.r, self.r):
            raise DataError(f"wishart: expected a (D, {self.r}, {self.r}) array of matrices")
        if not np.all(np.isfinite(Y)):
            raise DataError("wishart: non-finite matrix entries")
        for t in range(Y.shape[0]):
            if not np.allclose(Y[t], Y[t].T, rtol=1e-10, atol=1e-12):
                raise DataError(f"wishart: Y_{t + 1} is not symmetric")
            try:
                np.linalg.cholesky(Y[t])
            except np.linalg.LinAlgError:
                raise DataError(f"wishart: Y_{t + 1} is not positive definite") from None

    def prepare(self, dataset):
        self.validate(dataset)
        Y = np.asarray(dataset.y, dtype=float)
        Yinv = np.linalg.inv(Y)
        Yinv = 0.5 * (Yinv + np.swapaxes(Yinv, 1, 2))
        logdet = np.linalg.slogdet(Y)[1]
        return WishartData(jnp.asarray(Yinv), jnp.asarray(logdet))

    # --- latent dynamics ----------------------------------------------------
    def ar1(self, ts):
        _, mu, delta, sig2, _ = self._split(ts)
        return mu, delta, jnp.sqrt(sig2)

    def initial(self, ts, data):
        mu, delta, sd = self.ar1(ts)
        return mu, sd / jnp.sqrt(1.0 - delta**2)

    def transition(self, ts, x_prev):
        mu, delta, sd = self.ar1(ts)
        shape = (self.r,) + (1,) * (jnp.ndim(x_prev) - 1)
        mu, delta, sd = mu.reshape(shape), delta.reshape(shape), sd.reshape(shape)
        return mu + delta * (x_prev - mu), sd * jnp.ones_like(x_prev)

    # --- measurement ------------------------------------------------------
    def meas_params(self, ts, data):
        H = self.H(ts)
        return jnp.einsum("is,tij,js->st", H, data.Yinv, H)

    def log_g(self, ts, x, ytil):
        nu = self._split(ts)[0]
        return 0.5 * nu * x - 0.5 * ytil * jnp.exp(x)

    def meas_const(self, ts, data):
        r = self.r
        nu = self._split(ts)[0]
        D = data.logdetY.shape[0]
        s = jnp.arange(1, r + 1)
        per_t = (
            -0.5 * nu * r * jnp.log(2.0)
            - 0.25 * r * (r - 1) * jnp.log(jnp.pi)
            - jnp.sum(gammaln(0.5 * (nu + 1.0 - s)))
        )
        return D * per_t - 0.5 * (nu + r + 1.0) * jnp.sum(data.logdetY)

    def meas_mode(self, ts, ytil):
        nu = self._split(ts)[0]
        return jnp.log(nu / ytil), jnp.full_like(ytil, 0.5 * nu)

    def simulate(self, tc, D, seed):
        r = self.r
        rng = np.random.default_rng(seed)
        ts = np.asarray(self.to_unconstrained(tc))
        nu = float(tc[0])
        mu = np.asarray(tc[1 : 1 + r])
        delta = np.asarray(tc[1 + r : 1 + 2 * r])
        sd = np.asarray(tc[1 + 2 * r : 1 + 3 * r])
        H = np.asarray(self.H(jnp.asarray(ts)))
        x = np.empty((r, D))
        x[:, 0] = mu + sd / np.sqrt(1 - delta**2) * rng.standard_normal(r)
        eta = rng.standard_normal((r, D))
        for t in range(1, D):
            x[:, t] = mu + delta * (x[:, t - 1] - mu) + sd * eta[:, t]
        Y = np.empty((D, r, r))
        for t in range(D):
            scale = (H * np.exp(x[:, t])) @ H.T
            Yt = stats.invwishart.rvs(df=nu, scale=scale, random_state=rng)
            Y[t] = 0.5 * (Yt + Yt.T)
        return Dataset(y=Y, x=x, theta=dict(zip(self.param_names, map(float, tc))))
