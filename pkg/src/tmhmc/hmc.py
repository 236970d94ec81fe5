"""Hamiltonian Monte Carlo on the modified target of (theta*, u).

The mass matrix is block diagonal: a dense ``M_theta`` for the parameters
and the identity for ``u``. Two integrators are provided. ``leapfrog`` is
the plain Stormer-Verlet scheme on the full log-target. ``ld`` splits off the
standard-normal part of ``u`` and integrates it exactly as a rotation,
kicking only with the gradient of ``log p(theta*) + log omega``; when omega
is constant in ``u`` the ``u`` motion is exact for any step size.

Whole chains run inside ``jax.jit``. Burn-in and sampling reuse one
compiled loop, which is built before timing starts, so the reported wall
time covers the sampling iterations only.
"""

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
import scipy.optimize
from jax import lax

from tmhmc.errors import OptimFailure
from tmhmc.models.base import LOG_2PI
from tmhmc.transport import Eis, Laplace, ModifiedTarget, warm_start_u

DH_GUARD = 1000.0


class PhaseState(NamedTuple):
    theta: jax.Array
    u: jax.Array
    p_theta: jax.Array
    p_u: jax.Array


class MassMatrix(NamedTuple):
    """Parameter-block mass ``M`` with its lower Cholesky factor and inverse."""

    M: jax.Array
    chol: jax.Array
    inv: jax.Array

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        M = 0.5 * (M + M.T)
        C = np.linalg.cholesky(M)
        return cls(jnp.asarray(M), jnp.asarray(C), jnp.asarray(np.linalg.inv(M)))

    @classmethod
    def identity(cls, d):
        return cls.from_matrix(np.eye(d))


@dataclass(frozen=True)
class HmcConfig:
    L: int = 4
    eps: Optional[float] = None
    iters: int = 1500
    burnin: int = 500
    seed: int = 0
    integrator: str = "ld"
    store_trace: bool = False
    init: str = "laplace"

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.iters > self.burnin >= 0:
            raise ValueError("need iters > burnin >= 0")
        if self.integrator not in ("leapfrog", "ld"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.init not in ("laplace", "normal"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def step_size(self):
        return self.eps if self.eps is not None else 0.5 * math.pi / self.L

    @property
    def n_samples(self):
        return self.iters - self.burnin


# --- energy and integrators ------------------------------------------------------


def kinetic(p_theta, p_u, mass):
    return 0.5 * p_theta @ (mass.inv @ p_theta) + 0.5 * jnp.sum(p_u * p_u)


def _hamiltonian(logp, state, mass):
    H = -logp + kinetic(state.p_theta, state.p_u, mass)
    return jnp.where(jnp.isfinite(H), H, jnp.inf)


def energy(state, mass, target):
    """H = -log target + kinetic energy; +inf when the target is undefined."""
    return _hamiltonian(target.logp(state.theta, state.u), state, mass)


def _leapfrog(state, grads, eps, mass, vg):
    g_th, g_u = grads
    p_th = state.p_theta + 0.5 * eps * g_th
    p_u = state.p_u + 0.5 * eps * g_u
    theta = state.theta + eps * (mass.inv @ p_th)
    u = state.u + eps * p_u
    logp, (g_th, g_u) = vg(theta, u)
    p_th = p_th + 0.5 * eps * g_th
    p_u = p_u + 0.5 * eps * g_u
    return PhaseState(theta, u, p_th, p_u), logp, (g_th, g_u)


def leapfrog_step(state, eps, mass, grad):
    """One leapfrog step; ``grad(theta, u) -> (d/dtheta, d/du)`` of the log-target."""
    g = grad(state.theta, state.u)
    out, _, _ = _leapfrog(state, g, eps, mass, lambda t, u: (0.0, grad(t, u)))
    return out


def _rotate(u, p, angle):
    c, s = jnp.cos(angle), jnp.sin(angle)
    return c * u + s * p, c * p - s * u


def ld_step(state, eps, mass, grad_split):
    """One step of the splitting integrator.

    ``grad_split(theta, u)`` returns the gradients of
    ``log p(theta*) + log omega_theta(u)``, i.e. the log-target without its
    standard-normal factor in ``u``.
    """
    theta = state.theta + 0.5 * eps * (mass.inv @ state.p_theta)
    u, p_u = _rotate(state.u, state.p_u, 0.5 * eps)
    g_th, g_u = grad_split(theta, u)
    p_u = p_u + eps * g_u
    p_th = state.p_theta + eps * g_th
    theta = theta + 0.5 * eps * (mass.inv @ p_th)
    u, p_u = _rotate(u, p_u, 0.5 * eps)
    return PhaseState(theta, u, p_th, p_u)


# --- chain ---------------------------------------------------------------------------


class ChainState(NamedTuple):
    """Current draw with its full log-target, full gradient and latent path."""

    theta: jax.Array
    u: jax.Array
    logp: jax.Array
    g_theta: jax.Array
    g_u: jax.Array
    x: jax.Array


def _split_aux(target, ts, u):
    if hasattr(target, "split_aux"):
        return target.split_aux(ts, u)
    return target.split(ts, u), target.apply(ts, u)


def _evaluator(target):
    """One evaluation gives the split value and gradient, the full log-target,
    and x; the full u-gradient is the split one minus u."""
    vg = jax.value_and_grad(lambda t, u: _split_aux(target, t, u), argnums=(0, 1), has_aux=True)

    def ev(ts, u):
        (sp, x), (gt, gu) = vg(ts, u)
        logp = sp - 0.5 * jnp.sum(u * u) - 0.5 * u.size * LOG_2PI
        return logp, gt, gu, x

    return ev


class _Acc(NamedTuple):
    s_u: jax.Array
    ss_u: jax.Array
    s_x: jax.Array
    ss_x: jax.Array


def _select(c, a, b):
    return jax.tree_util.tree_map(lambda p, q: jnp.where(c, p, q), a, b)


def _segment(target, mass, theta, u, key, n, eps, record, L, integrator, size, store_trace):
    """``n`` transitions (``n`` may be traced). Draws go into buffers of length ``size``.

    The loop runs over gradient evaluations rather than iterations so the
    target's gradient appears once in the compiled program: one sub-step at
    the very start evaluates the initial state, then each transition takes
    ``L + 1`` sub-steps (``ld``: the L midpoints plus the endpoint) or ``L``
    (``leapfrog``: one per drift). The arithmetic is that of ``ld_step`` and
    ``leapfrog_step``.
    """
    model = target.model
    ev = _evaluator(target)
    ld = integrator == "ld"
    per = L + 1 if ld else L
    S = u.shape[0]
    d = theta.shape[0]
    buf = {
        "theta": jnp.zeros((size, d)),
        "params": jnp.zeros((size, d)),
        "accept": jnp.zeros((size,), dtype=bool),
        "delta_H": jnp.zeros((size,)),
        "x_first": jnp.zeros((size, S)),
        "u_first": jnp.zeros((size, S)),
    }
    if store_trace:
        buf["u"] = jnp.zeros((size,) + u.shape)
        buf["x"] = jnp.zeros((size,) + u.shape)
    z = jnp.zeros_like(u)
    zt = jnp.zeros_like(theta)
    w = jnp.where(record, 1.0, 0.0)
    cs = ChainState(theta, u, jnp.float64(0.0), zt, z, z)
    pr = PhaseState(theta, u, zt, z)
    minv = mass.inv

    def body(_, carry):
        cs, pr, g_pr, H0, k, i, init, acc, buf = carry
        k_th, k_u, k_acc = jax.random.split(jax.random.fold_in(key, i), 3)
        refresh = (k == 0) & ~init
        start = PhaseState(
            cs.theta, cs.u, mass.chol @ jax.random.normal(k_th, theta.shape),
            jax.random.normal(k_u, u.shape),
        )
        pr = _select(refresh, start, pr)
        g_pr = _select(refresh, (cs.g_theta, cs.g_u), g_pr)
        H0 = jnp.where(refresh, _hamiltonian(cs.logp, pr, mass), H0)

        if ld:
            # first half of step k: theta half-drift and u half-rotation
            th_m = pr.theta + 0.5 * eps * (minv @ pr.p_theta)
            u_m, pu_m = _rotate(pr.u, pr.p_u, 0.5 * eps)
            mid = k < L
            pt = jnp.where(init, cs.theta, jnp.where(mid, th_m, pr.theta))
            pu = jnp.where(init, cs.u, jnp.where(mid, u_m, pr.u))
            logp, gt, gu, x = ev(pt, pu)
            p_th = pr.p_theta + eps * gt
            p_u = pu_m + eps * gu
            th2 = th_m + 0.5 * eps * (minv @ p_th)
            u2, pu2 = _rotate(u_m, p_u, 0.5 * eps)
            pr = _select(mid & ~init, PhaseState(th2, u2, p_th, pu2), pr)
            is_end = (k == L) & ~init
        else:
            gth, gu_full = g_pr
            p_th = pr.p_theta + 0.5 * eps * gth
            p_u = pr.p_u + 0.5 * eps * gu_full
            th2 = pr.theta + eps * (minv @ p_th)
            u2 = pr.u + eps * p_u
            pt = jnp.where(init, cs.theta, th2)
            pu = jnp.where(init, cs.u, u2)
            logp, gt, gu, x = ev(pt, pu)
            g_new = (gt, gu - pu)
            p_th = p_th + 0.5 * eps * g_new[0]
            p_u = p_u + 0.5 * eps * g_new[1]
            pr = _select(init, pr, PhaseState(th2, u2, p_th, p_u))
            g_pr = _select(init, g_pr, g_new)
            is_end = (k == L - 1) & ~init

        here = ChainState(pt, pu, logp, gt, gu - pu, x)
        cs = _select(init, here, cs)
        H1 = _hamiltonian(logp, pr, mass)
        dH = H1 - H0
        ok = jnp.isfinite(dH) & (jnp.abs(dH) <= DH_GUARD)
        log_unif = jnp.log(jax.random.uniform(k_acc))
        accept = is_end & ok & (log_unif < -jnp.where(ok, dH, 0.0))
        cs = _select(accept, here, cs)

        # burn-in also writes (modulo the buffer) so both phases share one
        # loop body; only the sampling phase's rows are kept
        we = w * is_end
        acc = _Acc(
            acc.s_u + we * cs.u, acc.ss_u + we * cs.u**2,
            acc.s_x + we * cs.x, acc.ss_x + we * cs.x**2,
        )
        vals = {
            "theta": cs.theta,
            "params": model.to_constrained(cs.theta),
            "accept": accept,
            "delta_H": jnp.where(jnp.isfinite(dH), dH, jnp.inf),
            "x_first": cs.x[:, 0],
            "u_first": cs.u[:, 0],
        }
        if store_trace:
            vals["u"] = cs.u
            vals["x"] = cs.x
        j = i % size
        buf = {kk: buf[kk].at[j].set(jnp.where(is_end, vals[kk], buf[kk][j])) for kk in buf}
        k = jnp.where(init | is_end, 0, k + 1)
        i = i + is_end.astype(i.dtype)
        return cs, pr, g_pr, H0, k, i, jnp.bool_(False), acc, buf

    carry = (cs, pr, (zt, z), jnp.float64(0.0), jnp.int32(0), jnp.int32(0), jnp.bool_(True),
             _Acc(z, z, z, z), buf)
    out = lax.fori_loop(0, 1 + n * per, body, carry)
    cs, acc, buf = out[0], out[7], out[8]
    return cs.theta, cs.u, acc, buf


_segment_jit = jax.jit(_segment, static_argnames=("L", "integrator", "size", "store_trace"))


@dataclass
class Chain:
    """Post-burn-in draws and run metadata for one replica."""

    param_names: tuple
    theta: np.ndarray
    params: np.ndarray
    accept: np.ndarray
    delta_H: np.ndarray
    x_first: np.ndarray
    u_first: np.ndarray
    u_mean: np.ndarray
    u_sd: np.ndarray
    x_mean: np.ndarray
    x_sd: np.ndarray
    wall_time: float
    burnin_time: float
    config: HmcConfig
    mass: MassMatrix
    theta_start: np.ndarray
    u_trace: Optional[np.ndarray] = None
    x_trace: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.theta.shape[0]

    @property
    def accept_rate(self):
        return float(np.mean(self.accept))


def chain_key(seed, chain_index=0):
    return jax.random.fold_in(jax.random.PRNGKey(int(seed)), int(chain_index))


def run_chain(target, config, mass, theta0, chain_index=0, u0=None):
    """Run burn-in then sampling; ``theta0`` is on the unconstrained scale.

    Unless ``u0`` is given, the chain starts from a standard-normal draw
    (``init="normal"``) or, by default, from the u whose image is a draw of
    the Laplace approximation of x given y at ``theta0`` (``init="laplace"``;
    for a Laplace(2) map the two coincide).

    One executable serves both phases; it is compiled before the clock
    starts so ``wall_time`` covers the sampling iterations only.
    """
    key = chain_key(config.seed, chain_index)
    k_u, k_burn, k_samp = jax.random.split(key, 3)
    theta = jnp.asarray(theta0, dtype=jnp.float64)
    if u0 is None:
        if config.init == "laplace" and isinstance(target, ModifiedTarget):
            u0 = warm_start_u(target, theta, k_u)
        else:
            u0 = jax.random.normal(k_u, target.u_shape)
    u = jnp.asarray(u0, dtype=jnp.float64)
    if not np.isfinite(float(target.logp(theta, u))):
        raise OptimFailure("log-target is not finite at the starting point")
    n = config.n_samples
    static = dict(
        L=int(config.L), integrator=config.integrator, size=n, store_trace=config.store_trace
    )
    eps = jnp.float64(config.step_size)
    compiled = _segment_jit.lower(
        target, mass, theta, u, k_samp, jnp.int32(n), eps, jnp.bool_(True), **static
    ).compile()

    t0 = time.perf_counter()
    if config.burnin > 0:
        theta, u, _, _ = compiled(
            target, mass, theta, u, k_burn, jnp.int32(config.burnin), eps, jnp.bool_(False)
        )
        jax.block_until_ready(u)
    burn_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    theta, u, acc, trace = compiled(target, mass, theta, u, k_samp, jnp.int32(n), eps, jnp.bool_(True))
    jax.block_until_ready(trace)
    wall = time.perf_counter() - t0

    mean_u = np.asarray(acc.s_u) / n
    mean_x = np.asarray(acc.s_x) / n
    corr = n / max(n - 1, 1)
    sd_u = np.sqrt(np.maximum(np.asarray(acc.ss_u) / n - mean_u**2, 0.0) * corr)
    sd_x = np.sqrt(np.maximum(np.asarray(acc.ss_x) / n - mean_x**2, 0.0) * corr)
    tr = {k: np.asarray(v) for k, v in trace.items()}
    return Chain(
        param_names=target.model.param_names,
        theta=tr["theta"],
        params=tr["params"],
        accept=tr["accept"].astype(bool),
        delta_H=tr["delta_H"],
        x_first=tr["x_first"],
        u_first=tr["u_first"],
        u_mean=mean_u,
        u_sd=sd_u,
        x_mean=mean_x,
        x_sd=sd_x,
        wall_time=wall,
        burnin_time=burn_time,
        config=config,
        mass=mass,
        theta_start=np.asarray(theta0, dtype=float),
        u_trace=tr.get("u"),
        x_trace=tr.get("x"),
        extras={"final_theta": np.asarray(theta), "final_u": np.asarray(u)},
    )


def tune_step_size(target, mass, theta0, L, integrator="ld", seed=0, n_pilot=100,
                   min_accept=0.6, max_halvings=10):
    """Largest ``eps = (pi/2) / L / 2^k`` whose pilot run accepts ``>= min_accept``.

    Each pilot runs ``n_pilot`` iterations and continues from where the
    previous one stopped, so later pilots also serve as warm-up.
    """
    key = jax.random.fold_in(chain_key(seed, 0), 7919)
    k_u, key = jax.random.split(key)
    theta = jnp.asarray(theta0, dtype=jnp.float64)
    if isinstance(target, ModifiedTarget):
        u = warm_start_u(target, theta, k_u)
    else:
        u = jax.random.normal(k_u, target.u_shape)
    static = dict(L=int(L), integrator=integrator, size=int(n_pilot), store_trace=False)
    eps = 0.5 * math.pi / L
    for k in range(max_halvings + 1):
        th, uu, _, buf = _segment_jit(
            target, mass, theta, u, jax.random.fold_in(key, k), jnp.int32(n_pilot),
            jnp.float64(eps), jnp.bool_(True), **static
        )
        rate = float(np.mean(np.asarray(buf["accept"])))
        if rate > 0:
            theta, u = th, uu
        if rate >= min_accept:
            return eps
        eps *= 0.5
    return eps


# --- MAP and mass matrix ---------------------------------------------------------------


def fd_hessian(grad, x, step=1e-4):
    """Symmetrized central-difference Jacobian of ``grad``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        H[:, i] = (np.asarray(grad(x + e)) - np.asarray(grad(x - e))) / (2 * step)
    return 0.5 * (H + H.T)


def maximize_and_hessian(logpost, theta0, fd_step=1e-4, gtol=1e-6, maxiter=500, vg=None):
    """Quasi-Newton maximization and FD negative Hessian of ``logpost``.

    ``vg`` may supply a (jitted) value-and-gradient function; by default it
    is built from ``logpost``. Returns ``(theta_hat, neg_hessian,
    converged)``. After BFGS a few Newton steps with the FD Hessian tighten
    the optimum.
    """
    if vg is None:
        vg = jax.jit(jax.value_and_grad(logpost))

    def fun(t):
        v, g = vg(jnp.asarray(t, dtype=jnp.float64))
        v, g = float(v), np.asarray(g)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(g)
        return -v, -g

    def grad(t):
        return -fun(t)[1]

    x0 = np.asarray(theta0, dtype=float)
    res = scipy.optimize.minimize(
        fun, x0, jac=True, method="BFGS", options={"gtol": gtol, "maxiter": maxiter}
    )
    x = np.asarray(res.x, dtype=float)
    gnorm = float(np.max(np.abs(grad(x))))
    for _ in range(5):
        if gnorm < 1e-10:
            break
        negH = -fd_hessian(grad, x, fd_step)
        try:
            step = np.linalg.solve(negH, grad(x))
        except np.linalg.LinAlgError:
            break
        xn = x + step
        gn = float(np.max(np.abs(grad(xn))))
        if not np.isfinite(fun(xn)[0]) or gn >= gnorm:
            break
        x, gnorm = xn, gn
    negH = -fd_hessian(grad, x, fd_step)
    return x, negH, gnorm < gtol


@jax.jit
def _laplace_objective_vg(target, ts):
    u0 = jnp.zeros(target.u_shape)
    return jax.value_and_grad(lambda t: target.split(t, u0))(ts)


def mass_from_hessian(negH):
    """Dense mass if PD, else the diagonal of absolute values."""
    negH = 0.5 * (negH + negH.T)
    if np.all(np.isfinite(negH)):
        try:
            np.linalg.cholesky(negH)
            return MassMatrix.from_matrix(negH)
        except np.linalg.LinAlgError:
            pass
        diag = np.abs(np.diag(negH))
        if np.all(diag > 0):
            return MassMatrix.from_matrix(np.diag(diag))
    return MassMatrix.identity(negH.shape[0])


def estimate_mass_matrix(model, kind, data, theta0, K=None):
    """Simulated MAP of theta* and the negative Hessian there.

    The likelihood estimate is omega_theta(0) under a Laplace map, which is
    deterministic and cheap; ``K`` defaults to the chain's K for Laplace
    chains and to 2 otherwise.
    """
    if K is None:
        K = kind.K if isinstance(kind, Laplace) and kind.K >= 1 else 2
    lap = ModifiedTarget(model, Laplace(int(K)), data)

    def vg(ts):
        return _laplace_objective_vg(lap, ts)

    def logpost(ts):
        return vg(ts)[0]

    theta0 = np.asarray(theta0, dtype=float)
    try:
        theta_hat, negH, ok = maximize_and_hessian(logpost, theta0, vg=vg)
    except (ValueError, np.linalg.LinAlgError) as exc:
        warnings.warn(f"MAP search failed ({exc}); using identity mass", RuntimeWarning)
        return theta0, MassMatrix.identity(model.d)
    if not ok:
        warnings.warn("MAP search did not converge; using identity mass", RuntimeWarning)
        if np.isfinite(float(logpost(jnp.asarray(theta_hat)))):
            return theta_hat, MassMatrix.identity(model.d)
        return theta0, MassMatrix.identity(model.d)
    return theta_hat, mass_from_hessian(negH)


def needs_crn(kind):
    return isinstance(kind, Eis)
