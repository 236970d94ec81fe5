"""Efficient importance sampling with Gaussian kernels.

The importance density is sequential: ``x_t | x_{t-1}`` is Gaussian with
density proportional to ``f_t(x_t | x_{t-1}) xi_t(x_t)``, where
``xi_t(x) = exp(a1_t x + a2_t x^2)``. Internally each kernel is held about a
centre ``c_t`` (the mean of the fitted draws at ``t``) as
``exp(b_t (x - c_t) + a2_t (x - c_t)^2)``, which differs from ``xi_t`` by a
constant factor that cancels between ``chi_t`` and ``xi_t`` in the weight;
this keeps every term of order one even when ``a2`` is huge. Writing
``q = 1 - 2 a2 s^2`` and ``d = m - c`` for the conditional mean ``m`` and
standard deviation ``s`` of ``f_t``, the sampler draws
``x = c + (d + b s^2) / q + u s / sqrt(q)`` and the integrating factor is

    log chi_t = -log(q) / 2 + (b d + a2 d^2 + b^2 s^2 / 2) / q,

which is the usual ``pi_t mu_t^2 / 2 - m^2 / (2 s^2)`` expression
rearranged to avoid cancellation when ``s`` is small.

Kernel coefficients are fitted by back-recursive least squares over ``r``
trajectories driven by fixed common random numbers, for a preset number of
sweeps so the fit is a smooth function of theta.
"""

from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from tmhmc.errors import NonFinite, SingularRegression, VarianceCollapse
from tmhmc.models.base import measurement_summary, n_obs

PI_MIN = 1e-8


class CrnSet(NamedTuple):
    Z: jax.Array  # (S, r, D)
    seed: int


class EisParams(NamedTuple):
    """Kernel coefficients per (series, time), each of shape (S, D).

    ``a1`` and ``a2`` are the coefficients of ``xi_t`` on the original x
    scale; ``b`` and ``center`` give the same kernel in centred form and are
    what the sampler uses. ``c`` holds the last sweep's regression intercepts
    and ``r2`` its R^2, both diagnostic only.
    """

    a1: jax.Array
    a2: jax.Array
    c: jax.Array
    r2: jax.Array
    b: jax.Array
    center: jax.Array


def make_crn(seed, n_series, r, D):
    """Standard-normal CRNs, reproducible from ``seed``."""
    Z = np.random.default_rng(seed).standard_normal((n_series, r, D))
    return CrnSet(jnp.asarray(Z), int(seed))


def _kernel_step(m, s, b, a2, cen, u):
    s2 = s * s
    q = 1.0 - 2.0 * a2 * s2
    d = m - cen
    x = cen + (d + b * s2) / q + u * s * lax.rsqrt(q)
    logpi = jnp.log(q) - 2.0 * jnp.log(s)
    logchi = -0.5 * jnp.log(q) + (b * d + a2 * d * d + 0.5 * b * b * s2) / q
    return x, logpi, logchi


def _log_chi(m, s, b, a2, cen):
    s2 = s * s
    q = 1.0 - 2.0 * a2 * s2
    d = m - cen
    return -0.5 * jnp.log(q) + (b * d + a2 * d * d + 0.5 * b * b * s2) / q


def _log_xi(a, x):
    dx = x - a.center
    return a.b * dx + a.a2 * dx * dx


def forward(model, ts, data, a, U):
    """Run the sequential sampler for kernel ``a`` on noise ``U`` of shape (S, n, D).

    Returns ``(X, logpi, logchi)``, each (S, n, D); ``logchi[..., t]`` is
    ``log chi_t`` (centred form) evaluated at the sampled ``x_{t-1}``.
    """
    S, n, _ = U.shape
    m1, s1 = model.initial(ts, data)
    Ut = jnp.moveaxis(U, -1, 0)
    B, A2, C = (v.T[:, :, None] for v in (a.b, a.a2, a.center))
    m0 = jnp.broadcast_to(m1[:, None], (S, n))
    s0 = jnp.broadcast_to(s1[:, None], (S, n))
    first = _kernel_step(m0, s0, B[0], A2[0], C[0], Ut[0])

    def step(xp, args):
        bt, a2t, ct, ut = args
        m, s = model.transition(ts, xp)
        out = _kernel_step(m, s, bt, a2t, ct, ut)
        return out[0], out

    _, rest = lax.scan(step, first[0], (B[1:], A2[1:], C[1:], Ut[1:]))
    return tuple(
        jnp.moveaxis(jnp.concatenate([f[None], r], axis=0), 0, -1) for f, r in zip(first, rest)
    )


class _Design(NamedTuple):
    """Per-(series, time) regression design built from the draws, shape (S, r, D)."""

    z: jax.Array
    z2: jax.Array
    xm: jax.Array  # (S, D)
    xs: jax.Array
    s3: jax.Array
    det: jax.Array


def _design(X):
    # with x centred and scaled to unit (population) variance, sum z = 0 and
    # sum z^2 = r, so the 3x3 normal equations solve in closed form
    r = X.shape[1]
    xm = jnp.mean(X, axis=1)
    xs = jnp.std(X, axis=1)
    z = (X - xm[:, None]) / xs[:, None]
    z2 = z * z
    s3 = jnp.sum(z2 * z, axis=1)
    s4 = jnp.sum(z2 * z2, axis=1)
    return _Design(z, z2, xm, xs, s3, s4 - r - s3 * s3 / r)


def _solve_normal(z, z2, s3, det, y, axis=-2):
    """Coefficients of y on [1, z, z^2], reducing over the draws ``axis``."""
    r = z.shape[axis]
    b0 = jnp.sum(y, axis=axis)
    b1 = jnp.sum(z * y, axis=axis)
    b2 = jnp.sum(z2 * y, axis=axis)
    c2 = (b2 - b0 - s3 * b1 / r) / det
    c1 = (b1 - s3 * c2) / r
    c0 = b0 / r - c2
    return c0, c1, c2


def _ols_quadratic(x, y):
    """Least-squares fit of y on [1, x, x^2] per row; x, y of shape (S, r).

    Returns ``(intercept, linear, quadratic, R^2)`` on the original x scale.
    """
    d = _design(x[..., None])
    c0, c1, c2 = _solve_normal(d.z, d.z2, d.s3, d.det, y[..., None])
    c, q1, q2 = _to_raw(c0, c1, c2, d.xm, d.xs)
    r2 = _r_squared(d.z, d.z2, c0, c1, c2, y[..., None])
    return c[:, 0], q1[:, 0], q2[:, 0], r2[:, 0]


def _to_raw(c0, c1, c2, xm, xs):
    q2 = c2 / xs**2
    q1 = c1 / xs - 2.0 * q2 * xm
    c = c0 - c1 * xm / xs + q2 * xm**2
    return c, q1, q2


def _r_squared(z, z2, c0, c1, c2, y):
    fitted = c0[:, None] + c1[:, None] * z + c2[:, None] * z2
    sse = jnp.sum((y - fitted) ** 2, axis=1)
    sst = jnp.sum((y - jnp.mean(y, axis=1, keepdims=True)) ** 2, axis=1)
    ok = sst > 1e-300
    return jnp.where(ok, 1.0 - sse / jnp.where(ok, sst, 1.0), 1.0)


def _sweep(model, ts, data, mp, a, Z):
    X, _, _ = forward(model, ts, data, a, Z)
    lg = model.log_g(ts, X, mp[:, None, :])
    d = _design(X)
    # conditional moments of x_{t+1} given each draw of x_t
    M, SD = model.transition(ts, X)
    # cap a2_t so the sampler precision stays >= PI_MIN at every draw
    _, s1 = model.initial(ts, data)
    inv_s2 = jnp.concatenate(
        [jnp.broadcast_to(1.0 / s1[:, None, None] ** 2, X[..., :1].shape), 1.0 / SD[..., :-1] ** 2],
        axis=-1,
    )
    a2_cap = 0.5 * (jnp.min(inv_s2, axis=1) - PI_MIN)

    def step(carry, args):
        bn, a2n, cn = carry
        m, sd, lgt, z, z2, s3, det, xm, xs, cap = args
        yreg = lgt + _log_chi(m, sd, bn[:, None], a2n[:, None], cn[:, None])
        _, c1, c2 = _solve_normal(z, z2, s3, det, yreg, axis=-1)
        # kernel centred at the draws' mean: slope c1 / xs, curvature c2 / xs^2
        q2 = jnp.minimum(c2 / xs**2, cap)
        return (c1 / xs, q2, xm), (c1 / xs, q2, yreg)

    S = X.shape[0]
    tm = lambda v: jnp.moveaxis(v, -1, 0)  # noqa: E731
    args = tuple(map(tm, (M, SD, lg, d.z, d.z2, d.s3, d.det, d.xm, d.xs, a2_cap)))
    zero = jnp.zeros(S)
    _, (b, q2, yreg) = lax.scan(step, (zero, zero, zero), args, reverse=True)
    b, q2 = b.T, q2.T
    yreg = jnp.moveaxis(yreg, 0, -1)
    c0, c1, c2 = _solve_normal(d.z, d.z2, d.s3, d.det, yreg)
    c, _, _ = _to_raw(c0, c1, c2, d.xm, d.xs)
    r2 = _r_squared(d.z, d.z2, c0, c1, c2, yreg)
    return EisParams(b - 2.0 * q2 * d.xm, q2, c, r2, b, d.xm)


def initial_params(model, ts, data):
    """Kernel start from the local Gaussian measurement summary."""
    h, G = measurement_summary(model, ts, data)
    z = jnp.zeros_like(h)
    return EisParams(G * h, -0.5 * G, z, jnp.ones_like(h), z, h)


def eis_fit_raw(model, ts, data, Z, J):
    """Traceable EIS fit; failures surface as NaN coefficients."""
    a = initial_params(model, ts, data)
    mp = model.meas_params(ts, data)
    for _ in range(J):
        a = _sweep(model, ts, data, mp, a, Z)
    return a


def eis_fit(model, ts, data, crn, J):
    """Fit kernel coefficients with exactly ``J`` fixed-point sweeps."""
    if J < 1:
        raise ValueError("EIS needs J >= 1 sweeps")
    Z = crn.Z if isinstance(crn, CrnSet) else jnp.asarray(crn)
    if Z.shape[1] < 4:
        raise ValueError("EIS needs r >= 4 trajectories per sweep")
    if Z.shape[-1] != n_obs(data) or Z.shape[0] != model.n_series:
        raise ValueError("CRN shape does not match the data")
    ts = jnp.asarray(ts, dtype=jnp.float64)
    a = eis_fit_raw(model, ts, data, Z, J)
    if not isinstance(a.a1, jax.core.Tracer):
        if not (np.all(np.isfinite(np.asarray(a.a1))) and np.all(np.isfinite(np.asarray(a.a2)))):
            raise SingularRegression("EIS regression produced non-finite coefficients")
    return a


def _check_path(x, logpi):
    if isinstance(x, jax.core.Tracer):
        return
    if not np.all(np.isfinite(np.asarray(logpi))):
        raise VarianceCollapse("EIS sampler precision is not positive along the path")
    if not np.all(np.isfinite(np.asarray(x))):
        raise NonFinite("EIS path is not finite")


def forward_sample_raw(model, ts, a, u, data):
    X, logpi, logchi = forward(model, ts, data, a, u[:, None, :])
    return X[:, 0], logpi[:, 0], logchi[:, 0]


def eis_forward_sample(model, ts, a, u, data):
    """Map standard-normal ``u`` (S, D) to ``x``; returns ``(x, logjac)``."""
    u = jnp.atleast_2d(jnp.asarray(u, dtype=jnp.float64))
    x, logpi, _ = forward_sample_raw(model, ts, a, u, data)
    _check_path(x, logpi)
    return x, -0.5 * jnp.sum(logpi)


def log_weight_raw(model, ts, a, u, data):
    """``(log omega, x, logjac)`` along the path driven by ``u``."""
    x, logpi, logchi = forward_sample_raw(model, ts, a, u, data)
    mp = model.meas_params(ts, data)
    log_g = jnp.sum(model.log_g(ts, x, mp)) + model.meas_const(ts, data)
    return log_g + jnp.sum(logchi) - jnp.sum(_log_xi(a, x)), x, -0.5 * jnp.sum(logpi)


def eis_log_weight(model, ts, a, u, data):
    """log chi_1 + sum_t [log g_t + log chi_{t+1} - log xi_t] along the path."""
    u = jnp.atleast_2d(jnp.asarray(u, dtype=jnp.float64))
    lw, x, _ = log_weight_raw(model, ts, a, u, data)
    _, logpi, _ = forward_sample_raw(model, ts, a, u, data)
    _check_path(x, logpi)
    if not isinstance(lw, jax.core.Tracer) and not np.isfinite(float(lw)):
        raise NonFinite("EIS log-weight is not finite")
    return lw
