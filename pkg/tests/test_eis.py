import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy import stats

from tmhmc import eis, transport
from tmhmc.models import get_model, kalman_loglik, kalman_smoother, simulate
from tmhmc.models.base import log_meas


def _setup(name, D, seed, theta=None):
    m = get_model(name)
    ds = simulate(m, {**m.default_theta, **(theta or {})}, D, seed)
    data = m.prepare(ds)
    return m, ds, data, m.theta_from_dict(ds.theta)


def _zero_kernel(D):
    z = jnp.zeros((1, D))
    return eis.EisParams(z, z, z, z + 1.0, z, z)


def test_lingauss_fit_is_exact():
    D = 25
    m, ds, data, ts = _setup("lingauss", D, 1)
    Z = eis.make_crn(2, 1, 6, D)
    a = eis.eis_fit(m, ts, data, Z, 2)
    np.testing.assert_allclose(a.r2, 1.0, atol=1e-10)
    ref = kalman_loglik(ds.y, **ds.theta)
    rng = np.random.default_rng(0)
    lws = [float(eis.eis_log_weight(m, ts, a, rng.standard_normal((1, D)), data)) for _ in range(20)]
    assert np.std(lws) < 1e-8
    assert abs(np.mean(lws) - ref) < 1e-8 * abs(ref)
    # and the sampler's marginal moments are those of the smoother
    mean, cov = kalman_smoother(ds.y, **ds.theta)
    x, _ = eis.eis_forward_sample(m, ts, a, jnp.zeros((1, D)), data)
    np.testing.assert_allclose(x[0], mean, atol=1e-8)


def test_sv_regression_fit_quality():
    D = 300
    m, ds, data, ts = _setup("sv", D, 2)
    a = eis.eis_fit(m, ts, data, eis.make_crn(3, 1, 6, D), 2)
    assert np.mean(np.asarray(a.r2) > 0.95) >= 0.95


def test_contract_boundaries():
    D = 10
    m, _, data, ts = _setup("sv", D, 0)
    with pytest.raises(ValueError):
        eis.eis_fit(m, ts, data, eis.make_crn(1, 1, 6, D), 0)
    with pytest.raises(ValueError):
        eis.eis_fit(m, ts, data, eis.make_crn(1, 1, 3, D), 1)
    with pytest.raises(ValueError):
        eis.eis_fit(m, ts, data, eis.make_crn(1, 1, 6, D + 1), 1)


def test_zero_kernel_is_prior_map():
    D = 15
    m, _, data, ts = _setup("sv", D, 3)
    u = np.random.default_rng(1).standard_normal((1, D))
    a = _zero_kernel(D)
    x, _ = eis.eis_forward_sample(m, ts, a, u, data)
    xp, _ = transport.prior_path(m, ts, jnp.asarray(u), data)
    np.testing.assert_allclose(x, xp, rtol=1e-13, atol=1e-13)
    lw = eis.eis_log_weight(m, ts, a, u, data)
    assert float(lw) == pytest.approx(float(log_meas(m, ts, xp, data)), abs=1e-10)


def test_zero_noise_traces_conditional_means():
    D = 12
    m, _, data, ts = _setup("sv", D, 4)
    a = eis.eis_fit(m, ts, data, eis.make_crn(5, 1, 6, D), 2)
    x, _ = eis.eis_forward_sample(m, ts, a, jnp.zeros((1, D)), data)
    a1, a2 = np.asarray(a.a1)[0], np.asarray(a.a2)[0]
    m1, s1 = m.initial(ts, data)
    prev = None
    for t in range(D):
        if t == 0:
            mt, st = float(m1[0]), float(s1[0])
        else:
            mt_, st_ = m.transition(ts, jnp.array([[prev]]))
            mt, st = float(mt_[0, 0]), float(st_[0, 0])
        pi = 1 / st**2 - 2 * a2[t]
        mu = (mt / st**2 + a1[t]) / pi
        assert float(x[0, t]) == pytest.approx(mu, rel=1e-10, abs=1e-10)
        prev = float(x[0, t])


def test_random_kernel_density_oracle():
    D = 10
    m, _, data, ts = _setup("sv", D, 5)
    rng = np.random.default_rng(6)
    a1 = rng.normal(size=(1, D))
    a2 = -rng.uniform(0.1, 1.0, size=(1, D))
    # centred form about c = 0: b = a1
    a = eis.EisParams(jnp.asarray(a1), jnp.asarray(a2), jnp.zeros((1, D)), jnp.ones((1, D)),
                      jnp.asarray(a1), jnp.zeros((1, D)))
    u = rng.standard_normal((1, D))
    x, logjac = eis.eis_forward_sample(m, ts, a, u, data)
    x = np.asarray(x)[0]
    g, dl, nu = np.asarray(m.to_constrained(ts))
    logq = 0.0
    for t in range(D):
        mt, st = (g / (1 - dl), nu / np.sqrt(1 - dl**2)) if t == 0 else (g + dl * x[t - 1], nu)
        pi = 1 / st**2 - 2 * a2[0, t]
        mu = (mt / st**2 + a1[0, t]) / pi
        logq += stats.norm.logpdf(x[t], mu, 1 / np.sqrt(pi))
    # change of variables: log q(x) = log N(u) - logjac
    assert float(stats.norm.logpdf(u).sum() - logjac) == pytest.approx(logq, abs=1e-12 * abs(logq) + 1e-12)


def test_weight_identity_with_jacobian_form():
    D = 20
    m, _, data, ts = _setup("gamma", D, 7)
    Z = eis.make_crn(8, 1, 6, D).Z
    kind = transport.Eis(2, 6)
    u = np.random.default_rng(7).standard_normal((1, D))
    jac = transport.modified_log_target(m, kind, ts, u, data, Z, form="jacobian")
    a = eis.eis_fit(m, ts, data, Z, 2)
    lw = float(eis.eis_log_weight(m, ts, a, u, data))
    ref = jac - float(stats.norm.logpdf(u).sum()) - float(m.log_prior(ts))
    assert lw == pytest.approx(ref, abs=1e-10 * abs(ref))


def test_unbiased_with_independent_draws():
    D = 20
    m, ds, data, ts = _setup("lingauss", D, 9, theta={"sigma_y": 1.5})
    a = eis.eis_fit(m, ts, data, eis.make_crn(10, 1, 4, D), 1)
    ref = kalman_loglik(ds.y, **ds.theta)
    U = jax.random.normal(jax.random.PRNGKey(3), (100_000, 1, D))
    lw = np.asarray(jax.jit(jax.vmap(lambda u: eis.log_weight_raw(m, ts, a, u, data)[0]))(U))
    w = np.exp(lw - ref)
    assert abs(w.mean() - 1.0) < 3 * w.std() / np.sqrt(w.size)


def test_crn_determinism():
    D = 30
    m, _, data, ts = _setup("sv", D, 11)
    a = eis.eis_fit(m, ts, data, eis.make_crn(4, 1, 6, D), 2)
    b = eis.eis_fit(m, ts, data, eis.make_crn(4, 1, 6, D), 2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(eis.make_crn(4, 1, 6, D).Z, eis.make_crn(4, 1, 6, D).Z)


def test_fit_is_smooth_in_theta():
    D = 40
    m, _, data, ts = _setup("sv", D, 12)
    Z = eis.make_crn(6, 1, 6, D)
    a = eis.eis_fit(m, ts, data, Z, 2)
    rng = np.random.default_rng(8)
    for _ in range(5):
        b = eis.eis_fit(m, ts + 1e-6 * rng.standard_normal(3), data, Z, 2)
        assert float(jnp.max(jnp.abs(b.a1 - a.a1))) < 1e-3
        assert float(jnp.max(jnp.abs(b.a2 - a.a2))) < 1e-3


def test_precision_stays_positive_for_cev():
    D = 50
    m, _, data, ts = _setup("cev", D, 13)
    Z = eis.make_crn(1, 1, 7, D)
    a = eis.eis_fit(m, ts, data, Z, 1)
    u = np.random.default_rng(9).standard_normal((1, D))
    x, logjac = eis.eis_forward_sample(m, ts, a, u, data)
    assert np.all(np.isfinite(np.asarray(x))) and np.isfinite(float(logjac))
