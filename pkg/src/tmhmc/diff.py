"""Gradient engine.

Reverse-mode AD is delegated to JAX; every model and map in this package is
written in ``jax.numpy`` with the tridiagonal recurrences expressed as scans,
so gradients are exact up to rounding. :func:`check_grad_fd` is the
independent finite-difference check used throughout the test suite.
"""

import functools
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from tmhmc.errors import NonFinite


class GradResult(NamedTuple):
    value: float
    gradient: np.ndarray


# Programs here are evaluated a few thousand times at most, so XLA's
# backend optimisation costs far more in compile time than it saves at run
# time (several seconds against milliseconds for the map gradients). The
# sampler compiles its own programs with the default settings.
_COMPILER_OPTIONS = {"xla_backend_optimization_level": 0}


# compiled helpers keyed by the user function, so repeated checks of the
# same f at many points compile once
@functools.lru_cache(maxsize=64)
def _value_and_grad(f):
    return jax.jit(jax.value_and_grad(f), compiler_options=_COMPILER_OPTIONS)


@functools.lru_cache(maxsize=64)
def _batched(f):
    return jax.jit(jax.vmap(f), compiler_options=_COMPILER_OPTIONS)


def grad_eval(f, x):
    """Value and gradient of scalar ``f`` at the vector ``x``.

    ``f`` is traced and compiled once per function object. Raises NonFinite
    if the value or any gradient entry is NaN/Inf; under tracing a failed
    Cholesky pivot shows up this way, as NaN.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    value, grad = _value_and_grad(f)(x)
    value = float(value)
    grad = np.asarray(grad)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFinite(f"non-finite evaluation (value={value})")
    return GradResult(value, grad)


def central_differences(f, x, step, batched=True, order=2):
    """Central-difference gradient.

    ``order=2`` is the usual ``(f(x+h) - f(x-h)) / 2h``; ``order=4`` adds the
    ``x +- 2h`` points, which cancels the ``h^2`` truncation term and so
    tolerates a larger, less round-off-prone step.

    With ``batched`` all perturbations go through one vmapped program;
    otherwise ``f`` is called once per perturbation, which avoids compiling
    a second program when ``f`` is itself already compiled.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x = jnp.asarray(x, dtype=jnp.float64)
    n = x.shape[0]
    eye = jnp.eye(n, dtype=x.dtype) * step
    if batched:
        fv = _batched(f)

        def at(c):
            return np.asarray(fv(x[None, :] + c * eye))

    else:

        def at(c):
            return np.array([float(f(x + c * e)) for e in eye])

    d1 = at(1.0) - at(-1.0)
    if order == 2:
        return d1 / (2.0 * step)
    d2 = at(2.0) - at(-2.0)
    return (8.0 * d1 - d2) / (12.0 * step)


def check_grad_fd(f, x, step=1e-6, grad=None, order=2):
    """Max over coordinates of ``|analytic - fd| / (1 + |analytic|)``.

    ``grad`` may supply the analytic gradient (e.g. a deliberately wrong one);
    by default it is computed with :func:`grad_eval`. ``order`` selects the
    difference stencil, see :func:`central_differences`.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if grad is None:
        analytic = grad_eval(f, x).gradient
        # reuse the compiled value-and-gradient program for the differences
        vg = _value_and_grad(f)
        fd = central_differences(lambda z: vg(z)[0], x, step, batched=False, order=order)
    else:
        analytic = np.asarray(grad(jnp.asarray(x, dtype=jnp.float64)))
        fd = central_differences(f, x, step, order=order)
    if not np.all(np.isfinite(fd)):
        raise NonFinite("finite-difference evaluation hit a non-finite value")
    return float(np.max(np.abs(analytic - fd) / (1.0 + np.abs(analytic))))
