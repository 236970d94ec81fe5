"""Transport maps u -> x and the modified log-targets they induce.

Four map kinds are supported:

* ``Prior``: x is the state recursion driven by standardized disturbances.
* ``Laplace(K)``: affine ``x = h + L^{-T} u`` from a Gaussian start refined by
  ``K`` Newton steps (exact Hessian, or the start precision held fixed for
  models flagged ``newton = "fixed"``).
* ``Fisher``: affine, precision = prior precision + measurement information.
* ``Eis(J, r)``: sequential Gaussian sampler fitted by EIS.

Affine maps are rebuilt from theta on every evaluation and differentiated
through, Newton iterations and Cholesky factorizations included.

Two equivalent forms of the target exist. The Jacobian form is
``log p(theta*) + log p(y, x | theta) + log|dx/du|``; the weight form is
``log N(u; 0, I) + log p(theta*) + log omega(u)``. ``ModifiedTarget``
bundles a model, a map kind and the data into a pytree that the sampler can
pass through ``jit``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from tmhmc import eis as _eis
from tmhmc import linalg
from tmhmc.errors import MapFailure, Unsupported
from tmhmc.linalg import SymTridiag, TriChol
from tmhmc.models.base import (
    LOG_2PI,
    joint_derivs,
    log_meas,
    log_state,
    measurement_summary,
    n_obs,
    prior_gauss_summary,
)

# --- map kinds ----------------------------------------------------------------


@dataclass(frozen=True)
class Prior:
    label = "prior"


@dataclass(frozen=True)
class Laplace:
    K: int = 0
    label = "laplace"

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("Laplace map needs K >= 0")


@dataclass(frozen=True)
class Fisher:
    label = "fisher"


@dataclass(frozen=True)
class Eis:
    J: int = 2
    r: int = 6
    label = "eis"

    def __post_init__(self):
        if self.J < 1:
            raise ValueError("EIS map needs J >= 1")
        if self.r < 4:
            raise ValueError("EIS map needs r >= 4")


def map_kind(name, K=0, J=2, r=6):
    name = name.lower()
    if name == "prior":
        return Prior()
    if name == "laplace":
        return Laplace(int(K))
    if name == "fisher":
        return Fisher()
    if name == "eis":
        return Eis(int(J), int(r))
    raise ValueError(f"unknown map {name!r}")


def check_supported(model, kind):
    """Raise Unsupported when ``kind`` cannot be built for ``model``."""
    if isinstance(kind, Fisher) and model.fisher_location is None:
        raise Unsupported(f"Fisher map is not available for the {model.name} model")
    if isinstance(kind, Laplace) and model.laplace_init == "gauss" and model.ar1(
        jnp.zeros(model.d)
    ) is None:
        raise Unsupported(f"Laplace start is undefined for the {model.name} model")


# --- affine maps --------------------------------------------------------------


class AffineMap(NamedTuple):
    h: jax.Array  # (S, D)
    L: TriChol
    logjac: jax.Array


def _affine(h, L):
    return AffineMap(h, L, -jnp.sum(jnp.log(L.ldiag)))


def _gauss_start(model, ts, data):
    D = n_obs(data)
    hx, Gx = prior_gauss_summary(model, ts, D)
    hy, Gy = measurement_summary(model, ts, data)
    G0 = SymTridiag(Gx.diag + Gy, Gx.offdiag)
    L0 = linalg.chol_tridiag_raw(G0)
    h0 = linalg.solve_from_chol(L0, linalg.tridiag_matvec(Gx, hx) + Gy * hy)
    return h0, L0


def laplace_raw(model, ts, data, K):
    """Traceable Laplace map; failures show up as NaN entries."""
    if model.laplace_init == "data":
        h = measurement_summary(model, ts, data).h
        _, negH = joint_derivs(model, ts, h, data)
        L0 = linalg.chol_tridiag_raw(negH)
    else:
        h, L0 = _gauss_start(model, ts, data)
    L = L0
    for _ in range(K):
        grad, negH = joint_derivs(model, ts, h, data)
        if model.newton == "full":
            L = linalg.chol_tridiag_raw(negH)
        h = h + linalg.solve_from_chol(L, grad)
    return _affine(h, L)


def fisher_raw(model, ts, data):
    if model.fisher_location is None:
        raise Unsupported(f"Fisher map is not available for the {model.name} model")
    D = n_obs(data)
    _, Gx = prior_gauss_summary(model, ts, D)
    _, Gy = measurement_summary(model, ts, data)
    if model.fisher_location == "zero":
        L = linalg.chol_tridiag_raw(SymTridiag(Gx.diag + Gy, Gx.offdiag))
        return _affine(jnp.zeros_like(Gy), L)
    h0, L0 = _gauss_start(model, ts, data)
    return _affine(h0, L0)


def _check_affine(m):
    if isinstance(m.logjac, jax.core.Tracer):
        return m
    ok = np.all(np.isfinite(np.asarray(m.L.ldiag))) and np.all(np.isfinite(np.asarray(m.h)))
    if not ok:
        raise MapFailure("transport map construction failed (Cholesky or Newton iterate)")
    return m


def build_laplace(model, ts, data, K):
    if K < 0:
        raise ValueError("K must be >= 0")
    return _check_affine(laplace_raw(model, jnp.asarray(ts, dtype=jnp.float64), data, K))


def build_fisher(model, ts, data):
    return _check_affine(fisher_raw(model, jnp.asarray(ts, dtype=jnp.float64), data))


def affine_apply(m, u):
    return m.h + linalg.solve_upper_from_chol(m.L, u)


def affine_log_density(m, x):
    """log N(x; h, G^{-1}) computed from ``G = L L^T`` directly."""
    G = linalg.reconstruct(m.L)
    dx = x - m.h
    quad = jnp.sum(dx * linalg.tridiag_matvec(G, dx))
    return -0.5 * dx.size * LOG_2PI + 0.5 * linalg.log_det_from_chol(m.L) - 0.5 * quad


# --- prior map ----------------------------------------------------------------


def prior_path(model, ts, u, data):
    """x_t = m(x_{t-1}) + s(x_{t-1}) u_t; returns ``(x, sum log s)``."""
    m1, s1 = model.initial(ts, data)
    x0 = m1 + s1 * u[:, 0]

    def step(xp, ut):
        m, s = model.transition(ts, xp[:, None])
        x = m[:, 0] + s[:, 0] * ut
        return x, (x, jnp.log(s[:, 0]))

    _, (xs, ls) = lax.scan(step, x0, jnp.moveaxis(u[:, 1:], -1, 0))
    x = jnp.concatenate([x0[:, None], jnp.moveaxis(xs, 0, -1)], axis=-1)
    return x, jnp.sum(jnp.log(s1)) + jnp.sum(ls)


# --- modified targets -----------------------------------------------------------


def _std_normal_logpdf(u):
    return -0.5 * jnp.sum(u * u) - 0.5 * u.size * LOG_2PI


def _log_px_py(model, ts, x, data):
    return log_state(model, ts, x, data) + log_meas(model, ts, x, data)


def map_state(model, kind, ts, data, Z=None):
    """The theta-dependent part of a map (affine factors or EIS kernel)."""
    if isinstance(kind, Laplace):
        return laplace_raw(model, ts, data, kind.K)
    if isinstance(kind, Fisher):
        return fisher_raw(model, ts, data)
    if isinstance(kind, Eis):
        if Z is None:
            raise ValueError("EIS map needs common random numbers")
        return _eis.eis_fit_raw(model, ts, data, Z, kind.J)
    return None


def terms(model, kind, ts, u, data, Z=None):
    """``(x, log|dx/du|, log omega)`` for the map at ``(ts, u)``."""
    if isinstance(kind, Prior):
        x, lj = prior_path(model, ts, u, data)
        return x, lj, log_meas(model, ts, x, data)
    st = map_state(model, kind, ts, data, Z)
    if isinstance(kind, Eis):
        lw, x, lj = _eis.log_weight_raw(model, ts, st, u, data)
        return x, lj, lw
    x = affine_apply(st, u)
    lw = _log_px_py(model, ts, x, data) - affine_log_density(st, x)
    return x, st.logjac, lw


def log_target_aux(model, kind, ts, u, data, Z=None, form=None):
    """``(log target, x)`` for the map at ``(ts, u)``."""
    if form is None:
        form = "weight" if isinstance(kind, Eis) else "jacobian"
    lp = model.log_prior(ts)
    if form == "weight":
        x, _, lw = terms(model, kind, ts, u, data, Z)
        return _std_normal_logpdf(u) + lp + lw, x
    if form != "jacobian":
        raise ValueError(f"unknown target form {form!r}")
    if isinstance(kind, Prior):
        x, lj = prior_path(model, ts, u, data)
    elif isinstance(kind, Eis):
        st = map_state(model, kind, ts, data, Z)
        x, logpi, _ = _eis.forward_sample_raw(model, ts, st, u, data)
        lj = -0.5 * jnp.sum(logpi)
    else:
        st = map_state(model, kind, ts, data, Z)
        x, lj = affine_apply(st, u), st.logjac
    return lp + _log_px_py(model, ts, x, data) + lj, x


def log_target_raw(model, kind, ts, u, data, Z=None, form=None):
    return log_target_aux(model, kind, ts, u, data, Z, form)[0]


def _as_inputs(model, ts, u, Z):
    ts = jnp.asarray(ts, dtype=jnp.float64)
    u = jnp.asarray(u, dtype=jnp.float64)
    if u.ndim == 1:
        u = u.reshape(model.n_series, -1)
    if Z is not None and isinstance(Z, _eis.CrnSet):
        Z = Z.Z
    return ts, u, Z


def modified_log_target(model, kind, ts, u, data, Z=None, form=None):
    """Log-density of (theta*, u); ``-inf`` when the map cannot be built."""
    ts, u, Z = _as_inputs(model, ts, u, Z)
    val = log_target_raw(model, kind, ts, u, data, Z, form)
    if isinstance(val, jax.core.Tracer):
        return val
    val = float(val)
    return val if np.isfinite(val) else -np.inf


def apply_map(model, kind, ts, u, data, Z=None):
    """x = gamma_theta(u); raises MapFailure if the map is invalid."""
    ts, u, Z = _as_inputs(model, ts, u, Z)
    x, _, _ = terms(model, kind, ts, u, data, Z)
    if not isinstance(x, jax.core.Tracer) and not np.all(np.isfinite(np.asarray(x))):
        raise MapFailure("transport map produced a non-finite state")
    return x


def log_weight(model, kind, ts, u, data, Z=None):
    ts, u, Z = _as_inputs(model, ts, u, Z)
    return terms(model, kind, ts, u, data, Z)[2]


def _inverse_raw(model, kind, ts, x, data, Z=None):
    """u with gamma_theta(u) = x, for each map kind."""
    if isinstance(kind, Prior) or isinstance(kind, Eis):
        m1, s1 = model.initial(ts, data)
        m, s = model.transition(ts, x[:, :-1])
        m = jnp.concatenate([m1[:, None], m], axis=-1)
        s = jnp.concatenate([s1[:, None], s], axis=-1)
        if isinstance(kind, Prior):
            return (x - m) / s
        a = map_state(model, kind, ts, data, Z)
        q = 1.0 - 2.0 * a.a2 * s * s
        mean = a.center + (m - a.center + a.b * s * s) / q
        return (x - mean) * jnp.sqrt(q) / s
    st = map_state(model, kind, ts, data, Z)
    v = x - st.h
    # L^T v for lower-bidiagonal L
    return (st.L.ldiag * v).at[..., :-1].add(st.L.lsub * v[..., 1:])


def inverse_map(model, kind, ts, x, data, Z=None):
    """Standardized coordinates of the latent path ``x`` under ``kind``."""
    ts = jnp.asarray(ts, dtype=jnp.float64)
    x = jnp.atleast_2d(jnp.asarray(x, dtype=jnp.float64))
    if Z is not None and isinstance(Z, _eis.CrnSet):
        Z = Z.Z
    u = _inverse_raw(model, kind, ts, x, data, Z)
    if not np.all(np.isfinite(np.asarray(u))):
        raise MapFailure("latent path is outside the range of the map")
    return u


def warm_start_u(target, ts, key, K=2):
    """Starting u whose image is a draw from the Laplace(K) approximation at ``ts``.

    For a Laplace(K) target this is simply a standard-normal draw; for other
    maps it places the initial latent path where the data put it, instead of
    at a random prior path.
    """
    model, data = target.model, target.data
    ts = jnp.asarray(ts, dtype=jnp.float64)
    z = jax.random.normal(key, target.u_shape)
    if isinstance(target.kind, Laplace) and target.kind.K == K:
        return z
    x = affine_apply(build_laplace(model, ts, data, K), z)
    return inverse_map(model, target.kind, ts, x, data, target.Z)


@jax.tree_util.register_pytree_node_class
class ModifiedTarget:
    """Model + map kind + data (+ CRNs) as a jit-friendly pytree.

    ``logp`` is the full log-density of (theta*, u). ``split`` drops the
    standard-normal factor of u, i.e. it is ``log p(theta*) + log omega``,
    which is what the splitting integrator kicks with.
    """

    def __init__(self, model, kind, data, Z=None):
        self.model = model
        self.kind = kind
        self.data = data
        self.Z = Z

    def tree_flatten(self):
        return (self.data, self.Z), (self.model, self.kind)

    @classmethod
    def tree_unflatten(cls, aux, children):
        return cls(aux[0], aux[1], *children)

    @property
    def D(self):
        return n_obs(self.data)

    @property
    def u_shape(self):
        return (self.model.n_series, self.D)

    @property
    def d(self):
        return self.model.d

    def logp(self, ts, u):
        return log_target_raw(self.model, self.kind, ts, u, self.data, self.Z)

    def split(self, ts, u):
        return self.logp(ts, u) + 0.5 * jnp.sum(u * u) + 0.5 * u.size * LOG_2PI

    def split_aux(self, ts, u):
        """``(split(ts, u), x)`` from a single pass through the map."""
        val, x = log_target_aux(self.model, self.kind, ts, u, self.data, self.Z)
        return val + 0.5 * jnp.sum(u * u) + 0.5 * u.size * LOG_2PI, x

    def log_weight(self, ts, u):
        return terms(self.model, self.kind, ts, u, self.data, self.Z)[2]

    def apply(self, ts, u):
        return terms(self.model, self.kind, ts, u, self.data, self.Z)[0]
