import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy import stats

from tmhmc import eis, transport
from tmhmc.errors import Unsupported
from tmhmc.linalg import SymTridiag, chol_tridiag, log_det_from_chol, reconstruct
from tmhmc.models import (
    Dataset,
    get_model,
    joint_derivs,
    kalman_loglik,
    kalman_smoother,
    simulate,
)
from tmhmc.models.base import LOG_2PI


def _setup(name, D, seed, **kw):
    m = get_model(name, **kw)
    ds = simulate(m, m.default_theta, D, seed)
    return m, ds, m.prepare(ds)


def _kinds(model, D):
    kinds = [transport.Prior(), transport.Laplace(0), transport.Laplace(2), transport.Eis(2, 6)]
    if model.fisher_location is not None:
        kinds.append(transport.Fisher())
    if model.name == "cev":
        kinds.remove(transport.Laplace(0))
    return kinds


def _crn(model, kind, D):
    return eis.make_crn(5, model.n_series, kind.r, D) if isinstance(kind, transport.Eis) else None


def test_lingauss_laplace_is_exact_posterior():
    m, ds, data = _setup("lingauss", 30, 0)
    ts = m.theta_from_dict(m.default_theta)
    mean, cov = kalman_smoother(ds.y, **m.default_theta)
    prec = np.linalg.inv(cov)
    for K in (1, 2, 4):
        mp = transport.build_laplace(m, ts, data, K)
        np.testing.assert_allclose(mp.h[0], mean, rtol=1e-10, atol=1e-10)
        G = reconstruct(mp.L)
        np.testing.assert_allclose(G.diag[0], np.diag(prec), rtol=1e-10)
        np.testing.assert_allclose(G.offdiag[0], np.diag(prec, 1), rtol=1e-10, atol=1e-12)


def test_sv_laplace0_equals_fisher_precision():
    m, _, data = _setup("sv", 40, 1)
    ts = m.theta_from_dict(m.default_theta)
    lap = transport.build_laplace(m, ts, data, 0)
    fis = transport.build_fisher(m, ts, data)
    np.testing.assert_allclose(lap.L.ldiag, fis.L.ldiag, rtol=1e-14)
    np.testing.assert_allclose(lap.L.lsub, fis.L.lsub, rtol=1e-14)
    np.testing.assert_array_equal(fis.h, 0.0)


def test_sv_fisher_white_noise():
    m, _, data = _setup("sv", 10, 1)
    fis = transport.build_fisher(m, jnp.zeros(3), data)
    G = reconstruct(fis.L)
    np.testing.assert_allclose(G.diag, 1.5, rtol=1e-14)
    np.testing.assert_allclose(G.offdiag, 0.0, atol=1e-15)


def test_gamma_fisher_equals_laplace0():
    m, _, data = _setup("gamma", 40, 2)
    ts = m.theta_from_dict(m.default_theta)
    lap = transport.build_laplace(m, ts, data, 0)
    fis = transport.build_fisher(m, ts, data)
    for a, b in zip(jax.tree_util.tree_leaves(lap), jax.tree_util.tree_leaves(fis)):
        np.testing.assert_allclose(a, b, rtol=1e-14)


def test_gamma_newton_converges_quadratically():
    m, _, data = _setup("gamma", 500, 3)
    ts = m.theta_from_dict(m.default_theta)
    norms = []
    for K in range(5):
        g, _ = joint_derivs(m, ts, transport.build_laplace(m, ts, data, K).h, data)
        norms.append(float(jnp.max(jnp.abs(g))))
    assert all(b < a for a, b in zip(norms[:4], norms[1:4]))
    # once close, each step roughly squares the error
    assert norms[3] < 10 * norms[2] ** 2
    assert norms[4] < 1e-10


def test_fisher_unavailable_for_cev():
    m, _, data = _setup("cev", 20, 0)
    with pytest.raises(Unsupported):
        transport.build_fisher(m, m.theta_from_dict(m.default_theta), data)
    with pytest.raises(Unsupported):
        transport.check_supported(m, transport.Fisher())


def test_lingauss_target_is_gaussian_in_u():
    m, ds, data = _setup("lingauss", 25, 4)
    ts = m.theta_from_dict(m.default_theta)
    ref = float(m.log_prior(ts)) + kalman_loglik(ds.y, **m.default_theta)
    rng = np.random.default_rng(0)
    for _ in range(5):
        u = rng.standard_normal((1, 25))
        val = transport.modified_log_target(m, transport.Laplace(1), ts, u, data)
        assert val + 0.5 * np.sum(u * u) + 12.5 * LOG_2PI == pytest.approx(ref, abs=1e-9)


def test_prior_map_single_point():
    m = get_model("sv")
    tc = np.array([-0.1, 0.6, 0.4])
    ts = m.to_unconstrained(tc)
    y = np.array([0.37])
    data = m.prepare(Dataset(y=y))
    u = np.array([[0.8]])
    g, dl, nu = tc
    x1 = g / (1 - dl) + nu * u[0, 0] / np.sqrt(1 - dl**2)
    ref = stats.norm.logpdf(u[0, 0]) + stats.norm.logpdf(y[0], 0, np.exp(x1 / 2)) + float(m.log_prior(ts))
    val = transport.modified_log_target(m, transport.Prior(), ts, u, data)
    assert val == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("name", ["sv", "gamma", "cev", "wishart", "lingauss"])
def test_jacobian_and_weight_forms_agree(name):
    D = 15
    m, _, data = _setup(name, D, 5, **({"r": 2} if name == "wishart" else {}))
    ts = m.theta_from_dict(m.default_theta)
    rng = np.random.default_rng(1)
    for kind in _kinds(m, D):
        Z = _crn(m, kind, D)
        for _ in range(3):
            t = ts + 0.05 * rng.standard_normal(m.d)
            u = rng.standard_normal((m.n_series, D))
            a = transport.modified_log_target(m, kind, t, u, data, Z, form="jacobian")
            b = transport.modified_log_target(m, kind, t, u, data, Z, form="weight")
            assert a == pytest.approx(b, abs=1e-10 * max(1.0, abs(a))), kind


def test_affine_apply_examples():
    u = jnp.array([[0.3, -1.2]])
    ident = transport._affine(jnp.zeros((1, 2)), chol_tridiag(SymTridiag(jnp.ones((1, 2)), jnp.zeros((1, 1)))))
    np.testing.assert_allclose(transport.affine_apply(ident, u), u)
    scaled = transport._affine(jnp.ones((1, 2)), chol_tridiag(SymTridiag(4 * jnp.ones((1, 2)), jnp.zeros((1, 1)))))
    np.testing.assert_allclose(transport.affine_apply(scaled, u), 1 + u / 2)
    assert float(scaled.logjac) == pytest.approx(-0.5 * float(log_det_from_chol(scaled.L)), rel=1e-14)


def test_eis_apply_matches_standalone_recursion():
    D = 20
    m, _, data = _setup("sv", D, 6)
    ts = m.theta_from_dict(m.default_theta)
    kind = transport.Eis(2, 6)
    Z = _crn(m, kind, D)
    a = eis.eis_fit(m, ts, data, Z, 2)
    u = np.random.default_rng(2).standard_normal((1, D))
    x = np.asarray(transport.apply_map(m, kind, ts, u, data, Z))
    g, dl, nu = np.asarray(m.to_constrained(ts))
    a1, a2 = np.asarray(a.a1)[0], np.asarray(a.a2)[0]
    ref = np.empty(D)
    prev = None
    for t in range(D):
        if t == 0:
            mt, st = g / (1 - dl), nu / np.sqrt(1 - dl**2)
        else:
            mt, st = g + dl * prev, nu
        pi = 1 / st**2 - 2 * a2[t]
        mu = (mt / st**2 + a1[t]) / pi
        ref[t] = mu + u[0, t] / np.sqrt(pi)
        prev = ref[t]
    np.testing.assert_allclose(x[0], ref, rtol=1e-10, atol=1e-10)


def test_inverse_map_round_trip():
    D = 12
    for name in ("sv", "cev"):
        m, _, data = _setup(name, D, 7)
        ts = m.theta_from_dict(m.default_theta)
        u = np.random.default_rng(3).standard_normal((1, D))
        for kind in _kinds(m, D):
            Z = _crn(m, kind, D)
            x = transport.apply_map(m, kind, ts, u, data, Z)
            back = transport.inverse_map(m, kind, ts, x, data, Z)
            np.testing.assert_allclose(back, u, rtol=1e-7, atol=1e-7)


def test_unbiased_weight_lingauss():
    D = 10
    m, ds, data = _setup("lingauss", D, 8)
    ts = m.theta_from_dict(m.default_theta)
    ref = kalman_loglik(ds.y, **m.default_theta)
    tg = transport.ModifiedTarget(m, transport.Prior(), data)
    U = jax.random.normal(jax.random.PRNGKey(0), (100_000, 1, D))
    lw = np.asarray(jax.jit(jax.vmap(tg.log_weight, in_axes=(None, 0)))(ts, U))
    w = np.exp(lw - ref)
    assert abs(w.mean() - 1.0) < 3 * w.std() / np.sqrt(w.size)


def test_exact_decoupling():
    m, _, data = _setup("lingauss", 50, 9)
    ts = m.theta_from_dict(m.default_theta)
    tg = transport.ModifiedTarget(m, transport.Laplace(1), data)
    U = np.random.default_rng(4).standard_normal((100, 1, 50))
    lw = np.asarray(jax.vmap(tg.log_weight, in_axes=(None, 0))(ts, U))
    assert lw.std() < 1e-6


def test_map_kind_contracts():
    with pytest.raises(ValueError):
        transport.Laplace(-1)
    with pytest.raises(ValueError):
        transport.Eis(0, 6)
    with pytest.raises(ValueError):
        transport.Eis(2, 3)
    with pytest.raises(ValueError):
        transport.map_kind("nope")
    assert transport.map_kind("EIS", J=1, r=7) == transport.Eis(1, 7)


def test_failed_map_gives_minus_inf():
    m, _, data = _setup("sv", 10, 0)
    ts = jnp.array([0.0, 0.0, 800.0])  # nu^2 overflows
    val = transport.modified_log_target(m, transport.Laplace(1), ts, np.zeros((1, 10)), data)
    assert val == -np.inf
