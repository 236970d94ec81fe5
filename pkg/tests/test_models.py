import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln

from tmhmc.errors import DataError, NonFinite, Unsupported
from tmhmc.linalg import to_dense
from tmhmc.models import (
    Dataset,
    get_model,
    log_joint,
    log_meas,
    log_state,
    measurement_summary,
    prior_gauss_summary,
    simulate,
    transform_logjac,
)

ALL = ("sv", "gamma", "cev", "wishart", "lingauss")


def _norm(x, m, s):
    return stats.norm.logpdf(x, m, s)


def test_sv_single_point_density():
    m = get_model("sv")
    ts = jnp.array([0.0, 0.0, 0.0])  # gamma 0, delta 0, nu 1
    data = m.prepare(Dataset(y=np.array([0.0])))
    x = np.zeros((1, 1))
    # measurement N(0; 0, e^0), state N(0; 0, 1)
    assert float(log_meas(m, ts, x, data)) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-14)
    assert float(log_state(m, ts, x, data)) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-14)
    # prior: Beta(20, 1.5) on (delta+1)/2 at 1/2, half Jacobian, and the
    # scaled-inverse-chi-square(10, 0.01) density of nu^2 = 1
    lp_delta = stats.beta.logpdf(0.5, 20, 1.5) - np.log(2)
    lp_nu2 = stats.invgamma.logpdf(1.0, 5.0, scale=0.05)
    ref = -np.log(2 * np.pi) + lp_delta + lp_nu2
    assert float(log_joint(m, ts, x, data)) == pytest.approx(ref, abs=1e-10)


def test_gamma_exponential_measurement():
    m = get_model("gamma")
    ts = jnp.array([0.0, 0.0, 0.0, 0.0])  # tau 1, beta 1
    data = m.prepare(Dataset(y=np.array([1.0])))
    assert float(log_meas(m, ts, np.zeros((1, 1)), data)) == pytest.approx(-1.0, abs=1e-14)


def test_wishart_density_matches_scipy():
    m = get_model("wishart", r=2)
    tc = np.array([7.5, 0.3, -0.2, 0.9, 0.8, 0.4, 0.5, 0.35])
    ds = simulate(m, tc, 2, 3)
    ds = Dataset(y=ds.y[:1], x=ds.x[:, :1])
    data = m.prepare(ds)
    ts = m.to_unconstrained(tc)
    x = np.array([[0.7], [-0.4]])
    H = np.asarray(m.H(ts))
    Sigma = H @ np.diag(np.exp(x[:, 0])) @ H.T
    ref = stats.invwishart.logpdf(ds.y[0], df=tc[0], scale=Sigma)
    assert float(log_meas(m, ts, x, data)) == pytest.approx(ref, abs=1e-10)


def _oracle_state(name, tc, x):
    if name == "sv":
        g, dl, nu = tc
        lp = _norm(x[0, 0], g / (1 - dl), nu / np.sqrt(1 - dl**2))
        return lp + np.sum(_norm(x[0, 1:], g + dl * x[0, :-1], nu))
    if name == "gamma":
        _, _, dl, nu = tc
        lp = _norm(x[0, 0], 0.0, nu / np.sqrt(1 - dl**2))
        return lp + np.sum(_norm(x[0, 1:], dl * x[0, :-1], nu))
    if name == "lingauss":
        mu, dl, sx, _ = tc
        lp = _norm(x[0, 0], mu, sx / np.sqrt(1 - dl**2))
        return lp + np.sum(_norm(x[0, 1:], mu + dl * (x[0, :-1] - mu), sx))
    raise AssertionError


def _oracle_meas(name, tc, x, y):
    if name == "sv":
        return np.sum(_norm(y, 0.0, np.exp(x[0] / 2)))
    if name == "gamma":
        tau, beta = tc[0], tc[1]
        # y = beta e^x e with e ~ Gamma(1/tau, tau)
        scale = beta * np.exp(x[0]) * tau
        return np.sum(stats.gamma.logpdf(y, 1 / tau, scale=scale))
    if name == "lingauss":
        return np.sum(_norm(y, x[0], tc[3]))
    raise AssertionError


@pytest.mark.parametrize("name", ["sv", "gamma", "lingauss"])
def test_log_joint_per_term_oracles(name):
    m = get_model(name)
    ds = simulate(m, m.default_theta, 25, 1)
    data = m.prepare(ds)
    rng = np.random.default_rng(2)
    for _ in range(3):
        ts = np.asarray(m.theta_from_dict(m.default_theta)) + 0.1 * rng.normal(size=m.d)
        tc = np.asarray(m.to_constrained(jnp.asarray(ts)))
        x = ds.x + 0.2 * rng.normal(size=ds.x.shape)
        assert float(log_state(m, ts, x, data)) == pytest.approx(_oracle_state(name, tc, x), abs=1e-10)
        assert float(log_meas(m, ts, x, data)) == pytest.approx(
            _oracle_meas(name, tc, x, ds.y), abs=1e-10
        )


def test_cev_state_oracle():
    m = get_model("cev")
    ds = simulate(m, m.default_theta, 30, 4)
    data = m.prepare(ds)
    ts = m.theta_from_dict(m.default_theta)
    a, b, g, sx, sy = m.default_theta.values()
    x = ds.x
    dt = 1 / 252
    ref = _norm(x[0, 0], ds.y[0], 0.01)
    xp = x[0, :-1]
    ref += np.sum(_norm(x[0, 1:], xp + dt * (a - b * xp), sx * xp**g * np.sqrt(dt)))
    assert float(log_state(m, ts, x, data)) == pytest.approx(ref, rel=1e-12)
    assert float(log_meas(m, ts, x, data)) == pytest.approx(np.sum(_norm(ds.y, x[0], sy)), rel=1e-12)


@pytest.mark.parametrize("name", ALL)
def test_transform_round_trip(name):
    m = get_model(name)
    tc = np.array([m.default_theta[n] for n in m.param_names])
    back = np.asarray(m.to_constrained(m.to_unconstrained(tc)))
    np.testing.assert_allclose(back, tc, rtol=1e-12, atol=1e-14)


def test_prior_summary_sv_independent():
    m = get_model("sv")
    h, G = prior_gauss_summary(m, jnp.array([0.0, 0.0, 0.0]), 3)
    np.testing.assert_allclose(G.diag, 1.0, atol=1e-15)
    np.testing.assert_allclose(G.offdiag, 0.0, atol=1e-15)
    np.testing.assert_allclose(h, 0.0, atol=1e-15)


@pytest.mark.parametrize("D", [3, 17, 50])
def test_prior_precision_inverts_covariance(D):
    m = get_model("sv")
    ts = m.to_unconstrained(np.array([0.1, 0.5, 1.0]))
    h, G = prior_gauss_summary(m, ts, D)
    idx = np.arange(D)
    cov = 0.5 ** np.abs(idx[:, None] - idx[None, :]) / (1 - 0.25)
    Gd = to_dense(type(G)(G.diag[0], G.offdiag[0]))
    np.testing.assert_allclose(Gd @ cov, np.eye(D), atol=1e-8)
    np.testing.assert_allclose(Gd, np.linalg.inv(cov), atol=1e-10)
    np.testing.assert_allclose(h, 0.1 / 0.5)


def test_gamma_prior_mean_zero_and_cev_unsupported():
    m = get_model("gamma")
    h, _ = prior_gauss_summary(m, m.theta_from_dict(m.default_theta), 12)
    np.testing.assert_array_equal(h, 0.0)
    cev = get_model("cev")
    with pytest.raises(Unsupported):
        prior_gauss_summary(cev, cev.theta_from_dict(cev.default_theta), 5)


def test_measurement_summaries():
    sv = get_model("sv")
    h, G = measurement_summary(sv, jnp.zeros(3), sv.prepare(Dataset(y=np.ones(4))))
    np.testing.assert_allclose(h, 0.0, atol=1e-15)
    np.testing.assert_allclose(G, 0.5)
    gm = get_model("gamma")
    ts = gm.to_unconstrained(np.array([0.13, 1.0, 0.9, 0.2]))
    h, G = measurement_summary(gm, ts, gm.prepare(Dataset(y=np.ones(4))))
    np.testing.assert_allclose(h, 0.0, atol=1e-14)
    np.testing.assert_allclose(G, 1 / 0.13, rtol=1e-12)
    assert float(G[0, 0]) == pytest.approx(7.6923, abs=1e-4)
    wm = get_model("wishart", r=3)
    tc = dict(wm.default_theta, nu=33.6)
    ds = simulate(wm, tc, 5, 0)
    _, G = measurement_summary(wm, wm.theta_from_dict(tc), wm.prepare(ds))
    np.testing.assert_allclose(G, 16.8, rtol=1e-12)


def test_sv_zero_observation_is_clamped():
    sv = get_model("sv")
    h, _ = measurement_summary(sv, jnp.zeros(3), sv.prepare(Dataset(y=np.array([0.0, 1.0]))))
    assert np.all(np.isfinite(h)) and float(h[0, 0]) == pytest.approx(np.log(1e-12))


@pytest.mark.parametrize("name", ["sv", "gamma", "cev", "lingauss", "wishart"])
def test_measurement_modes_are_stationary(name):
    m = get_model(name)
    ds = simulate(m, m.default_theta, 20, 6)
    data = m.prepare(ds)
    ts = m.theta_from_dict(m.default_theta)
    h, _ = measurement_summary(m, ts, data)
    mp = m.meas_params(ts, data)
    g = jax.grad(lambda x: jnp.sum(m.log_g(ts, x, mp)))(h)
    assert np.max(np.abs(np.asarray(g))) < 1e-8


def test_wishart_factorizes_over_series():
    m = get_model("wishart", r=3)
    ds = simulate(m, m.default_theta, 15, 2)
    data = m.prepare(ds)
    ts = m.theta_from_dict(m.default_theta)
    x = ds.x + 0.1
    joint = 0.0
    Yinv = np.linalg.inv(ds.y)
    H = np.asarray(m.H(ts))
    nu = m.default_theta["nu"]
    r = 3
    for t in range(ds.D):
        Sigma = H @ np.diag(np.exp(x[:, t])) @ H.T
        joint += stats.invwishart.logpdf(ds.y[t], df=nu, scale=Sigma)
    per_series = 0.0
    for s in range(r):
        ytil = np.einsum("i,tij,j->t", H[:, s], Yinv, H[:, s])
        per_series += np.sum(0.5 * nu * x[s] - 0.5 * ytil * np.exp(x[s]))
    const = ds.D * (
        -0.5 * nu * r * np.log(2)
        - 0.25 * r * (r - 1) * np.log(np.pi)
        - sum(gammaln(0.5 * (nu + 1 - s)) for s in range(1, r + 1))
    ) - 0.5 * (nu + r + 1) * np.sum(np.linalg.slogdet(ds.y)[1])
    assert per_series + const == pytest.approx(joint, abs=1e-10 * abs(joint))
    assert float(log_meas(m, ts, x, data)) == pytest.approx(joint, abs=1e-10 * abs(joint))


def test_simulate_degenerate_sv():
    m = get_model("sv")
    ds = simulate(m, {"gamma": 0.0, "delta": 0.0, "nu": 1e-8}, 2000, 0)
    assert np.max(np.abs(ds.x)) < 1e-6
    assert stats.kstest(ds.y, "norm").pvalue > 1e-3


def test_simulate_gamma_moments():
    m = get_model("gamma")
    tau, beta, delta, nu = 0.13, 2.7, 0.98, 0.22
    ds = simulate(m, [tau, beta, delta, nu], 500, 11)
    ly = np.log(ds.y)
    k = 1 / tau
    # log y = log beta + x + log e, with log e = log tau + log Gamma(k, 1)
    from scipy.special import digamma, polygamma

    mean = np.log(beta) + np.log(tau) + digamma(k)
    var_x = nu**2 / (1 - delta**2)
    var = var_x + polygamma(1, k)
    # AR(1) latent: the standard error of the mean is inflated by (1+delta)/(1-delta)
    se_mean = np.sqrt((var_x * (1 + delta) / (1 - delta) + polygamma(1, k)) / ds.D)
    assert abs(ly.mean() - mean) < 3 * se_mean
    # sampling sd of the variance estimate for a persistent series, by long simulation
    long_vars = [np.var(np.log(simulate(m, [tau, beta, delta, nu], 500, s).y)) for s in range(200)]
    assert abs(ly.var() - var) < 3 * np.std(long_vars) + abs(np.mean(long_vars) - var)


def test_simulate_deterministic_and_minimum_length():
    m = get_model("lingauss")
    a = simulate(m, m.default_theta, 10, 1)
    b = simulate(m, m.default_theta, 10, 1)
    np.testing.assert_array_equal(a.y, b.y)
    with pytest.raises(ValueError):
        simulate(m, m.default_theta, 1, 1)


def test_transform_logjac_points():
    sv = get_model("sv")
    assert float(transform_logjac(sv, [0.3, 0.0, 0.0])) == pytest.approx(0.0, abs=1e-15)
    cev = get_model("cev")
    for z in (-1.3, 0.0, 0.8):
        h = 1e-5
        g = lambda v: 4.0 / (1 + np.exp(-v))  # noqa: E731
        num = (g(z + h) - g(z - h)) / (2 * h)
        ts = jnp.array([0.0, 0.0, z, 0.0, 0.0])
        assert float(transform_logjac(cev, ts)) == pytest.approx(np.log(num), abs=1e-10)


def test_gamma_rejects_non_positive_data():
    m = get_model("gamma")
    with pytest.raises(DataError):
        m.prepare(Dataset(y=np.array([1.0, -0.5, 2.0])))
    ts = m.theta_from_dict(m.default_theta)
    with pytest.raises(NonFinite):
        log_joint(m, ts, np.zeros((1, 2)), jnp.array([1.0, -0.5]))


def test_wishart_rejects_bad_matrices():
    m = get_model("wishart", r=2)
    Y = np.array([[[1.0, 2.0], [2.0, 1.0]]])
    with pytest.raises(DataError):
        m.prepare(Dataset(y=Y))
