"""Symmetric tridiagonal linear algebra.

All routines operate along the last axis, so a stack of ``S`` independent
systems is stored as arrays of shape ``(S, D)`` / ``(S, D - 1)``. The
recurrences are written as ``lax.scan`` loops so that reverse-mode AD
differentiates the factorization itself at O(D) cost.

Failures (non-positive pivots) produce NaN in traced code. The eager
wrapper :func:`chol_tridiag` raises :class:`NotPositiveDefinite`.
"""

from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from tmhmc.errors import NotPositiveDefinite

PIVOT_TOL = 1e-300


class SymTridiag(NamedTuple):
    diag: jax.Array
    offdiag: jax.Array


class TriChol(NamedTuple):
    """Lower-bidiagonal Cholesky factor ``L`` (``L @ L.T == G``)."""

    ldiag: jax.Array
    lsub: jax.Array


def _checked_sqrt(p):
    ok = jnp.isfinite(p) & (p > PIVOT_TOL)
    return jnp.where(ok, jnp.sqrt(jnp.where(ok, p, 1.0)), jnp.nan)


def _time_major(a):
    return jnp.moveaxis(a, -1, 0)


def _batch_major(a):
    return jnp.moveaxis(a, 0, -1)


def chol_tridiag_raw(G):
    """Factor ``G`` without raising; failed pivots (and all later ones) are NaN."""
    diag = jnp.asarray(G.diag)
    off = jnp.asarray(G.offdiag)
    d = _time_major(diag)
    e = _time_major(off)
    l0 = _checked_sqrt(d[0])

    def step(l_prev, de):
        di, ei = de
        s = ei / l_prev
        l = _checked_sqrt(di - s * s)
        return l, (l, s)

    _, (ls, ss) = lax.scan(step, l0, (d[1:], e))
    ldiag = _batch_major(jnp.concatenate([l0[None], ls], axis=0))
    return TriChol(ldiag, _batch_major(ss))


def chol_tridiag(G):
    """Cholesky factor of a symmetric tridiagonal matrix.

    Raises NotPositiveDefinite(index) with the 0-based index of the first
    failing pivot when called on concrete arrays.
    """
    L = chol_tridiag_raw(G)
    if not isinstance(L.ldiag, jax.core.Tracer):
        bad = ~np.isfinite(np.asarray(L.ldiag))
        if bad.any():
            idx = np.argmax(bad.reshape(-1, bad.shape[-1]).any(axis=0))
            raise NotPositiveDefinite(idx)
    return L


def solve_upper_from_chol(L, u):
    """Solve ``L.T v = u`` by back-substitution."""
    l = _time_major(L.ldiag)
    s = _time_major(L.lsub)
    uu = _time_major(jnp.asarray(u))
    v_last = uu[-1] / l[-1]

    def step(v_next, args):
        ui, li, si = args
        v = (ui - si * v_next) / li
        return v, v

    _, vs = lax.scan(step, v_last, (uu[:-1], l[:-1], s), reverse=True)
    return _batch_major(jnp.concatenate([vs, v_last[None]], axis=0))


def solve_lower_from_chol(L, b):
    """Solve ``L w = b`` by forward substitution."""
    l = _time_major(L.ldiag)
    s = _time_major(L.lsub)
    bb = _time_major(jnp.asarray(b))
    w0 = bb[0] / l[0]

    def step(w_prev, args):
        bi, li, si = args
        w = (bi - si * w_prev) / li
        return w, w

    _, ws = lax.scan(step, w0, (bb[1:], l[1:], s))
    return _batch_major(jnp.concatenate([w0[None], ws], axis=0))


def solve_from_chol(L, b):
    """Solve ``G x = b`` given ``L L^T = G``."""
    return solve_upper_from_chol(L, solve_lower_from_chol(L, b))


def log_det_from_chol(L):
    """``log|G|`` summed over any leading batch axes."""
    return 2.0 * jnp.sum(jnp.log(L.ldiag))


def tridiag_matvec(G, x):
    x = jnp.asarray(x)
    out = G.diag * x
    out = out.at[..., :-1].add(G.offdiag * x[..., 1:])
    out = out.at[..., 1:].add(G.offdiag * x[..., :-1])
    return out


def reconstruct(L):
    """Return ``L L^T`` as a SymTridiag."""
    diag = L.ldiag**2
    diag = diag.at[..., 1:].add(L.lsub**2)
    return SymTridiag(diag, L.lsub * L.ldiag[..., :-1])


def to_dense(G):
    """Dense matrix of a single (unbatched) SymTridiag; for tests and oracles."""
    diag = np.asarray(G.diag, dtype=float)
    off = np.asarray(G.offdiag, dtype=float)
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def chol_to_dense(L):
    ldiag = np.asarray(L.ldiag, dtype=float)
    lsub = np.asarray(L.lsub, dtype=float)
    return np.diag(ldiag) + np.diag(lsub, -1)
