"""Shared machinery for univariate-state latent models.

A model describes ``S`` independent univariate state series of length ``D``
(``S = 1`` except for the inverse-Wishart model), through

* ``initial(ts, data) -> (m1, s1)``, each of shape ``(S,)``;
* ``transition(ts, x_prev) -> (m, s)``, elementwise on ``x_prev`` of shape
  ``(S, n)``: the Gaussian conditional mean and standard deviation of
  ``x_t`` given ``x_{t-1}``;
* ``meas_params(ts, data)``: a pytree of ``(S, D)`` arrays consumed by the
  elementwise measurement log-density ``log_g(ts, x, mp)``.

Everything derived from these (state log-density, local derivatives,
tridiagonal Hessians) lives here so that each concrete model stays short.
``ts`` always denotes the unconstrained parameter vector.
"""

from dataclasses import dataclass, field
from typing import ClassVar, NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import gammaln

from tmhmc.errors import NonFinite, Unsupported
from tmhmc.linalg import SymTridiag

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(eq=False)
class Dataset:
    """Observed series plus (for synthetic data) the generating latent path."""

    y: np.ndarray
    x: Optional[np.ndarray] = None
    theta: Optional[dict] = field(default=None)

    @property
    def D(self):
        return int(self.y.shape[0])


class GaussSummary(NamedTuple):
    """Location ``h`` and precision ``G`` (SymTridiag, or a diagonal array)."""

    h: jax.Array
    G: object


def norm_logpdf(x, m, s):
    z = (x - m) / s
    return -0.5 * LOG_2PI - jnp.log(s) - 0.5 * z * z


def inv_gamma_logpdf(v, a, b):
    return a * jnp.log(b) - gammaln(a) - (a + 1.0) * jnp.log(v) - b / v


def beta_logpdf(p, a, b):
    return (
        (a - 1.0) * jnp.log(p)
        + (b - 1.0) * jnp.log1p(-p)
        - (gammaln(a) + gammaln(b) - gammaln(a + b))
    )


def sym_beta_prior(delta, a=20.0, b=1.5):
    """Beta(a, b) prior on (delta + 1) / 2, as a density on delta."""
    return beta_logpdf(0.5 * (delta + 1.0), a, b) - jnp.log(2.0)


@dataclass(frozen=True)
class StateSpaceModel:
    name: ClassVar[str] = "base"
    # "full": Newton with the exact Hessian; "fixed": keep G^(0) throughout
    newton: ClassVar[str] = "full"
    # "gauss": prior-times-measurement Gaussian guess; "data": start at h = y
    laplace_init: ClassVar[str] = "gauss"
    # location of the Fisher map, or None when the Fisher map is unavailable
    fisher_location: ClassVar[Optional[str]] = None
    default_theta: ClassVar[dict] = {}

    @property
    def n_series(self):
        return 1

    @property
    def param_names(self):
        raise NotImplementedError

    @property
    def d(self):
        return len(self.param_names)

    # --- parameter transforms -------------------------------------------
    def to_constrained(self, ts):
        raise NotImplementedError

    def to_unconstrained(self, tc):
        raise NotImplementedError

    def transform_logjac(self, ts):
        raise NotImplementedError

    def log_prior(self, ts):
        raise NotImplementedError

    def theta_from_dict(self, values):
        missing = [n for n in self.param_names if n not in values]
        if missing:
            raise KeyError(f"missing parameter values: {missing}")
        tc = jnp.array([float(values[n]) for n in self.param_names])
        return self.to_unconstrained(tc)

    # --- data -------------------------------------------------------------
    def validate(self, dataset):
        y = np.asarray(dataset.y, dtype=float)
        if y.ndim != 1 or not np.all(np.isfinite(y)):
            from tmhmc.errors import DataError

            raise DataError(f"{self.name}: observations must be a finite 1-d series")

    def prepare(self, dataset):
        self.validate(dataset)
        return jnp.asarray(dataset.y, dtype=jnp.float64)

    # --- latent dynamics ----------------------------------------------------
    def initial(self, ts, data):
        raise NotImplementedError

    def transition(self, ts, x_prev):
        raise NotImplementedError

    def ar1(self, ts):
        """``(mean, delta, sd)`` per series for Gaussian AR(1) states, else None."""
        return None

    # --- measurement ------------------------------------------------------
    def meas_params(self, ts, data):
        return data[None, :]

    def log_g(self, ts, x, mp):
        raise NotImplementedError

    def meas_const(self, ts, data):
        return 0.0

    def meas_mode(self, ts, mp):
        """Per-observation mode and negative Hessian of ``x -> log g``."""
        raise NotImplementedError

    def simulate(self, tc, D, seed):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# generic densities


def log_state(model, ts, x, data):
    """log p(x | theta) for ``x`` of shape (S, D)."""
    m1, s1 = model.initial(ts, data)
    lp = jnp.sum(norm_logpdf(x[:, 0], m1, s1))
    m, s = model.transition(ts, x[:, :-1])
    return lp + jnp.sum(norm_logpdf(x[:, 1:], m, s))


def log_meas(model, ts, x, data):
    """log p(y | x, theta)."""
    mp = model.meas_params(ts, data)
    return jnp.sum(model.log_g(ts, x, mp)) + model.meas_const(ts, data)


def log_joint_raw(model, ts, x, data):
    return model.log_prior(ts) + log_state(model, ts, x, data) + log_meas(model, ts, x, data)


def log_joint(model, ts, x, data):
    """log p(y|x,theta) + log p(x|theta) + log p(theta*); raises on non-finite."""
    ts = jnp.asarray(ts, dtype=jnp.float64)
    x = jnp.atleast_2d(jnp.asarray(x, dtype=jnp.float64))
    val = log_joint_raw(model, ts, x, data)
    if not isinstance(val, jax.core.Tracer) and not np.isfinite(float(val)):
        raise NonFinite(f"{model.name}: log_joint is not finite")
    return val


# ---------------------------------------------------------------------------
# local derivatives in x


def state_derivs(model, ts, x, data):
    """Gradient and tridiagonal Hessian (diag, off) of x -> log p(x|theta)."""
    m1, s1 = model.initial(ts, data)
    grad = jnp.zeros_like(x).at[:, 0].set(-(x[:, 0] - m1) / s1**2)
    hdiag = jnp.zeros_like(x).at[:, 0].set(-1.0 / s1**2)

    def pair(xp, xc):
        m, s = model.transition(ts, xp)
        return norm_logpdf(xc, m, s)

    def pair_grads(xp, xc):
        return jax.grad(lambda a, b: jnp.sum(pair(a, b)), argnums=(0, 1))(xp, xc)

    xp, xc = x[:, :-1], x[:, 1:]
    ones = jnp.ones_like(xp)
    zeros = jnp.zeros_like(xp)
    (gp, gc), (hpp, hcp) = jax.jvp(pair_grads, (xp, xc), (ones, zeros))
    _, (hpc, hcc) = jax.jvp(pair_grads, (xp, xc), (zeros, ones))
    del hcp
    grad = grad.at[:, :-1].add(gp).at[:, 1:].add(gc)
    hdiag = hdiag.at[:, :-1].add(hpp).at[:, 1:].add(hcc)
    return grad, hdiag, hpc


def meas_derivs(model, ts, x, mp):
    """Elementwise first and second derivatives of x -> log g(x)."""

    def g1(xx):
        return jax.grad(lambda a: jnp.sum(model.log_g(ts, a, mp)))(xx)

    d1, d2 = jax.jvp(g1, (x,), (jnp.ones_like(x),))
    return d1, d2


def joint_derivs(model, ts, x, data):
    """Gradient and negative tridiagonal Hessian of x -> log[p(x|θ) p(y|x,θ)]."""
    gs, hd, ho = state_derivs(model, ts, x, data)
    mp = model.meas_params(ts, data)
    gm, hm = meas_derivs(model, ts, x, mp)
    return gs + gm, SymTridiag(-(hd + hm), -ho)


# ---------------------------------------------------------------------------
# Gaussian summaries


def ar1_precision(mean, delta, sd, D):
    """Stationary AR(1) mean vector and tridiagonal precision, batched over series."""
    mean = jnp.atleast_1d(mean)
    delta = jnp.atleast_1d(delta)
    sd = jnp.atleast_1d(sd)
    S = mean.shape[0]
    inv_var = 1.0 / sd[:, None] ** 2
    if D == 1:
        diag = (1.0 - delta[:, None] ** 2) * inv_var
    else:
        inner = jnp.broadcast_to(1.0 + delta[:, None] ** 2, (S, D))
        inner = inner.at[:, 0].set(1.0).at[:, -1].set(1.0)
        diag = inner * inv_var
    off = jnp.broadcast_to(-delta[:, None] * inv_var, (S, D - 1))
    h = jnp.broadcast_to(mean[:, None], (S, D))
    return h, SymTridiag(diag, off)


def prior_gauss_summary(model, ts, D):
    """Mean and precision of x | theta for Gaussian AR(1) state models."""
    ar = model.ar1(ts)
    if ar is None:
        raise Unsupported(f"{model.name}: latent prior has no closed-form precision")
    h, G = ar1_precision(*ar, D)
    return GaussSummary(h, G)


def measurement_summary(model, ts, data):
    """Mode and diagonal negative Hessian of x -> log p(y|x,theta), shapes (S, D)."""
    mp = model.meas_params(ts, data)
    h, G = model.meas_mode(ts, mp)
    return GaussSummary(h, G)


def transform_logjac(model, ts):
    return model.transform_logjac(jnp.asarray(ts, dtype=jnp.float64))


def simulate(model, theta, D, seed):
    """Draw a synthetic dataset; ``theta`` is a name->value dict or constrained vector."""
    if D < 2:
        raise ValueError("simulation requires D >= 2")
    if isinstance(theta, dict):
        tc = np.array([float(theta[n]) for n in model.param_names])
    else:
        tc = np.asarray(theta, dtype=float)
    return model.simulate(tc, int(D), int(seed))


def n_obs(data):
    """Number of time points in a prepared data pytree."""
    return int(jax.tree_util.tree_leaves(data)[0].shape[0])
