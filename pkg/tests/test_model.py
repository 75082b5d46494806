import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from matcod import categories as cat
from matcod.exceptions import DomainError, NonFiniteDensity
from matcod.model import (
    CauseModel,
    ModelParameters,
    ModelSpec,
    cholesky_to_cpc,
    cpc_to_cholesky,
    eta,
    half_normal_logpdf,
    lkj_log_normalizer,
    lkj_logpdf,
    log_likelihood_multinomial_reference,
    log_likelihood_poisson,
    log_prior,
    mvn_logpdf_rows,
    reduced_proportions,
)
from matcod.simulate import draw_lkj_cholesky, draw_parameters, simulate_spec


def one_obs_spec(y, observed=None, qtype=1, active=True):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    J = y.shape[1]
    observed = np.ones_like(y, dtype=bool) if observed is None else np.atleast_2d(observed)
    cats = cat.MAIN if J == 7 else tuple(f"k{j}" for j in range(J))
    return ModelSpec(y=y, observed=observed, country_of_obs=np.zeros(len(y), dtype=int),
                     region_of_country=np.array([0]), type_of_obs=np.full(len(y), qtype),
                     n_regions=1, categories=cats, quality_types_active=active)


def zero_params(K, N=1, C=1, R=1):
    return ModelParameters(beta0=np.zeros(K), beta_region=np.zeros((R, K)), sigma_beta=1.0,
                           u=np.zeros((C, K)), v=np.ones(K), omega=np.eye(K),
                           q=np.zeros((N, K)), sigma_type=np.full(3, 0.25), phi=np.zeros(N))


def random_params(spec, rng, scale=1.0):
    K = spec.K
    L = draw_lkj_cholesky(K, rng)
    return ModelParameters(
        beta0=rng.normal(0, scale, K), beta_region=rng.normal(0, scale, (spec.R, K)),
        sigma_beta=float(rng.uniform(0.3, 2)), u=rng.normal(0, scale, (spec.C, K)),
        v=rng.uniform(0.3, 2, K), omega=L @ L.T, q=rng.normal(0, 0.3, (spec.N, K)),
        sigma_type=rng.uniform(0.1, 0.5, 3), phi=rng.normal(0, 1, spec.N), chol_omega=L)


@pytest.fixture(scope="module")
def small_spec():
    spec, _ = simulate_spec(n_regions=2, countries_per_region=2, obs_per_country=(2, 3),
                            missing_rate=0.2, seed=3)
    return spec


# ---- linear predictor ----------------------------------------------------

def test_eta_zero_gives_uniform():
    spec = one_obs_spec(np.ones(7))
    p = zero_params(6)
    assert np.all(eta(p, spec) == 0)
    assert np.allclose(reduced_proportions(p, spec), 1 / 7)


def test_eta_sums_terms_type1():
    spec = one_obs_spec(np.ones(7))
    p = zero_params(6)
    p.beta0[0], p.beta_region[0, 0], p.u[0, 0], p.q[0, 0] = 0.5, -0.2, 0.1, 0.3
    assert eta(p, spec, 0, 0) == pytest.approx(0.4)


def test_eta_includes_q_for_type3():
    spec = one_obs_spec(np.ones(7), qtype=3)
    p = zero_params(6)
    p.beta0[0], p.beta_region[0, 0], p.u[0, 0], p.q[0, 0] = 0.5, -0.2, 0.1, 0.3
    assert eta(p, spec, 0, 0) == pytest.approx(0.7)


def test_eta_ignores_q_without_quality_types():
    spec = one_obs_spec(np.ones(7), qtype=1, active=False)
    p = zero_params(6)
    p.q[0, 0] = 0.3
    assert eta(p, spec, 0, 0) == 0.0


def test_eta_reference_has_no_ratio():
    with pytest.raises(ValueError):
        eta(zero_params(6), one_obs_spec(np.ones(7)), 0, 6)


# ---- likelihoods ---------------------------------------------------------

def test_poisson_hand_value():
    spec = one_obs_spec([3, 1])
    assert log_likelihood_poisson(zero_params(1), spec) == pytest.approx(-2.0)


def test_poisson_overflow_raises():
    p = zero_params(1)
    p.phi[:] = 800.0
    with pytest.raises(NonFiniteDensity):
        log_likelihood_poisson(p, one_obs_spec([3, 1]))


def test_multinomial_uniform():
    y = np.array([3, 0, 2, 5, 1, 4, 6.0])
    val = log_likelihood_multinomial_reference(zero_params(6), one_obs_spec(y))
    assert val == pytest.approx(y.sum() * np.log(1 / 7))


def test_renormalised_over_observed():
    observed = np.ones(7, dtype=bool)
    observed[cat.MAIN.index("ABO")] = False
    p = reduced_proportions(zero_params(6), one_obs_spec(np.ones(7), observed))
    assert p[0, 0] == 0.0
    assert np.allclose(p[0, 1:], 1 / 6)


def test_missing_cells_ignored_by_poisson():
    observed = np.array([True, False, True])
    a = one_obs_spec([3, 10, 1], observed)
    b = one_obs_spec([3, 99, 1], observed)
    p = zero_params(2)
    assert log_likelihood_poisson(p, a) == log_likelihood_poisson(p, b)


def _random_small_spec(rng):
    J = int(rng.integers(2, 5))
    N = int(rng.integers(1, 4))
    y = rng.integers(0, 21, (N, J)).astype(float)
    observed = rng.random((N, J)) > 0.25
    observed[np.arange(N), rng.integers(0, J, N)] = True
    y[np.arange(N), rng.integers(0, J, N)] += 1
    y = np.where(observed, y, 0)
    for i in range(N):
        if y[i].sum() == 0:
            y[i, np.flatnonzero(observed[i])[0]] = 1
    return one_obs_spec(y, observed)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_profile_poisson_matches_multinomial_up_to_constant(seed):
    rng = np.random.default_rng(seed)
    spec = _random_small_spec(rng)
    diffs = []
    for _ in range(4):
        p = random_params(spec, rng)
        full = np.concatenate([eta(p, spec), np.zeros((spec.N, 1))], axis=1)
        logG = np.log(np.where(spec.observed, np.exp(full), 0).sum(axis=1))
        p.phi = np.log(spec.totals) - logG  # profile maximiser
        diffs.append(log_likelihood_poisson(p, spec)
                     - log_likelihood_multinomial_reference(p, spec))
    assert np.ptp(diffs) < 1e-8
    D = spec.totals
    assert diffs[0] == pytest.approx(float((D * np.log(D) - D).sum()), abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_reference_category_invariance(seed, shift):
    """Changing the reference and shifting the offsets leaves the value unchanged."""
    rng = np.random.default_rng(seed)
    spec = _random_small_spec(rng)
    p = random_params(spec, rng)
    J = spec.J
    new_ref = int(rng.integers(0, J - 1))
    order = [j for j in range(J) if j != new_ref] + [new_ref]
    moved = one_obs_spec(spec.y[:, order], spec.observed[:, order])

    def rebase(a):
        full = np.concatenate([a, np.zeros(a.shape[:-1] + (1,))], axis=-1)[..., order]
        return full[..., :-1] - full[..., -1:]

    q = rebase(p.q) + shift  # common shift absorbed below
    e_old = np.concatenate([eta(p, spec), np.zeros((spec.N, 1))], axis=1)
    p2 = ModelParameters(beta0=rebase(p.beta0[None])[0], beta_region=rebase(p.beta_region),
                         sigma_beta=p.sigma_beta, u=rebase(p.u), v=p.v, omega=p.omega,
                         q=q - shift, sigma_type=p.sigma_type,
                         phi=p.phi + e_old[:, new_ref])
    assert log_likelihood_poisson(p2, moved) == pytest.approx(log_likelihood_poisson(p, spec),
                                                              rel=1e-10, abs=1e-9)


def test_missing_locality_for_density_and_gradient(small_spec, rng):
    spec = small_spec
    assert (~spec.observed).any()
    y2 = np.where(spec.observed, spec.y, 1e3)
    other = ModelSpec(y=y2, observed=spec.observed, country_of_obs=spec.country_of_obs,
                      region_of_country=spec.region_of_country, type_of_obs=spec.type_of_obs,
                      n_regions=spec.n_regions)
    m1, m2 = CauseModel(spec), CauseModel(other)
    for _ in range(5):
        x = rng.uniform(-1, 1, m1.dim)
        v1, g1 = m1(x)
        v2, g2 = m2(x)
        assert v1 == v2 and np.array_equal(g1, g2)


# ---- priors --------------------------------------------------------------

def test_lkj_uniform_is_flat(rng):
    a = draw_lkj_cholesky(6, rng)
    b = draw_lkj_cholesky(6, rng)
    assert lkj_logpdf(a @ a.T) - lkj_logpdf(b @ b.T) == pytest.approx(0.0, abs=1e-12)


def test_lkj_normaliser_known_volumes():
    assert lkj_log_normalizer(2) == pytest.approx(np.log(2.0))
    assert lkj_log_normalizer(3) == pytest.approx(np.log(np.pi**2 / 2))


def test_lkj_rejects_indefinite():
    with pytest.raises(DomainError):
        lkj_logpdf(np.array([[1, 0.9, 0.9], [0.9, 1, -0.9], [0.9, -0.9, 1.0]]))


def test_sigma_type_prior_ratio():
    ratio = half_normal_logpdf(0.25, 0.25) - half_normal_logpdf(0.5, 0.25)
    assert ratio == pytest.approx(1.5)


def test_mvn_at_zero_is_normaliser(rng):
    L = draw_lkj_cholesky(4, rng)
    sigma = np.diag([0.5, 1, 2, 3.0]) @ (L @ L.T) @ np.diag([0.5, 1, 2, 3.0])
    val = mvn_logpdf_rows(np.zeros((1, 4)), sigma)
    assert val == pytest.approx(-0.5 * np.linalg.slogdet(2 * np.pi * sigma)[1])
    u = rng.normal(size=(3, 4))
    assert val != mvn_logpdf_rows(u, sigma)
    ref = stats.multivariate_normal(np.zeros(4), sigma).logpdf(u).sum()
    assert mvn_logpdf_rows(u, sigma) == pytest.approx(ref)


@pytest.mark.parametrize("scale", [0.25, 1.0, 3.0])
def test_half_normal_density_normalised(scale):
    mass, _ = integrate.quad(lambda x: np.exp(half_normal_logpdf(x, scale)), 0, np.inf)
    m2, _ = integrate.quad(lambda x: x * x * np.exp(half_normal_logpdf(x, scale)), 0, np.inf)
    assert mass == pytest.approx(1.0) and m2 == pytest.approx(scale**2)


def test_prior_draw_moments():
    rng = np.random.default_rng(7)
    n = 4000
    draws = [draw_parameters(6, 2, 3, rng) for _ in range(n)]

    def check(x, mean, sd):
        se = np.std(x, ddof=1) / np.sqrt(len(x))
        assert abs(np.mean(x) - mean) < 3 * se, (np.mean(x), mean)
        assert np.std(x, ddof=1) == pytest.approx(sd, rel=0.05)

    hn = np.sqrt(2 / np.pi)
    check(np.array([d.v[0] for d in draws]), 3 * hn, 3 * np.sqrt(1 - 2 / np.pi))
    check(np.array([d.sigma_beta for d in draws]), hn, np.sqrt(1 - 2 / np.pi))
    check(np.array([d.sigma_type[1] for d in draws]), 0.25 * hn, 0.25 * np.sqrt(1 - 2 / np.pi))
    # LKJ(1) marginal correlation has variance 1/(K+1)
    check(np.array([d.omega[3, 1] for d in draws]), 0.0, np.sqrt(1 / 7))


def test_log_prior_components():
    spec = one_obs_spec(np.ones(3), qtype=2)
    p = zero_params(2)
    expected = (2 * stats.norm(0, 1).logpdf(0) + stats.halfnorm(0, 1).logpdf(1)
                + -0.5 * np.linalg.slogdet(2 * np.pi * np.eye(2))[1]
                + 2 * stats.halfnorm(0, 3).logpdf(1) - lkj_log_normalizer(2)
                + 2 * stats.norm(0, 0.25).logpdf(0) + 3 * stats.halfnorm(0, 0.25).logpdf(0.25))
    assert log_prior(p, spec) == pytest.approx(expected)


# ---- unconstrained density -------------------------------------------------

def test_cpc_roundtrip(rng):
    for K in (2, 3, 6):
        y = rng.normal(0, 1, K * (K - 1) // 2)
        L, _ = cpc_to_cholesky(y, K)
        assert np.allclose(np.diag(L @ L.T), 1.0)
        assert np.allclose(cholesky_to_cpc(L), y)


@pytest.mark.parametrize("effects", ["centered", "noncentered"])
@pytest.mark.parametrize("phi", ["offset", "raw"])
def test_pack_unpack_roundtrip(small_spec, rng, effects, phi):
    m = CauseModel(small_spec, country_effects=effects, phi_parameterization=phi)
    x = rng.uniform(-1, 1, m.dim)
    assert np.allclose(m.pack(m.unpack(x)), x, atol=1e-9)
    assert len(m.parameter_names) == m.dim


@pytest.mark.parametrize("effects", ["centered", "noncentered"])
@pytest.mark.parametrize("phi", ["offset", "raw"])
def test_density_equals_likelihood_prior_jacobian(small_spec, rng, effects, phi):
    m = CauseModel(small_spec, country_effects=effects, phi_parameterization=phi,
                   intercept_scale=1.0)
    diffs = []
    for _ in range(4):
        x = rng.uniform(-1, 1, m.dim)
        p = m.unpack(x)
        direct = (log_likelihood_poisson(p, small_spec) + log_prior(p, small_spec, 1.0)
                  + m.log_jacobian(x))
        diffs.append(m.log_density(x) - direct)
    assert np.ptp(diffs) < 1e-8


def _fd_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_gradient_matches_finite_differences(backend):
    rng = np.random.default_rng(11)
    y = np.array([[5, 3, 8], [2, 0, 4], [7, 1, 1], [3, 6, 2.0]])
    spec = ModelSpec(y=y, observed=np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], bool),
                     country_of_obs=np.array([0, 0, 1, 1]), region_of_country=np.array([0, 1]),
                     type_of_obs=np.array([1, 2, 3, 4]), n_regions=2,
                     categories=("a", "b", "ref"))
    for effects in ("centered", "noncentered"):
        m = CauseModel(spec, backend=backend, country_effects=effects)
        for _ in range(5):
            x = rng.uniform(-1, 1, m.dim)
            _, g = m(x)
            fd = _fd_grad(m.log_density, x)
            assert np.max(np.abs(g - fd) / np.maximum(np.abs(g), 1.0)) < 1e-5


def test_backends_agree(small_spec, rng):
    a = CauseModel(small_spec, backend="numba")
    b = CauseModel(small_spec, backend="numpy")
    for _ in range(5):
        x = rng.uniform(-2, 2, a.dim)
        va, ga = a(x)
        vb, gb = b(x)
        assert va == pytest.approx(vb, rel=1e-10)
        assert np.allclose(ga, gb, rtol=1e-9, atol=1e-9)


def test_density_is_deterministic(small_spec, rng):
    m = CauseModel(small_spec)
    x = rng.uniform(-1, 1, m.dim)
    v1, g1 = m(x)
    v2, g2 = m(x.copy())
    assert v1 == v2 and np.array_equal(g1, g2)


def test_removing_observation_is_local(rng):
    """Dropping an observation changes only likelihood-driven gradient entries."""
    y = np.array([[5, 3, 8], [2, 4, 4], [7, 1, 1.0]])
    base = dict(country_of_obs=np.array([0, 0, 1]), region_of_country=np.array([0, 0]),
                type_of_obs=np.array([2, 2, 1]), n_regions=1, categories=("a", "b", "ref"),
                observation_ids=("o0", "o1", "o2"))
    full = ModelSpec(y=y, observed=np.ones_like(y, bool), **base)
    keep = [0, 2]
    red = ModelSpec(y=y[keep], observed=np.ones((2, 3), bool),
                    country_of_obs=base["country_of_obs"][keep],
                    region_of_country=base["region_of_country"],
                    type_of_obs=base["type_of_obs"][keep], n_regions=1,
                    categories=base["categories"], observation_ids=("o0", "o2"))
    mf, mr = CauseModel(full, phi_parameterization="raw"), CauseModel(red,
                                                                     phi_parameterization="raw")
    pf = random_params(full, rng)
    xf = mf.pack(pf)
    names_f, names_r = mf.parameter_names, mr.parameter_names
    xr = np.array([xf[names_f.index(n)] for n in names_r])
    _, gf = mf(xf)
    _, gr = mr(xr)
    shared = {n: k for k, n in enumerate(names_f)}
    # the removed observation's own q and phi vanish from the reduced model
    assert "phi[o1]" not in names_r and not any(n.startswith("q_raw[o1") for n in names_r)
    # its likelihood term is the whole difference on the shared coordinates
    p1 = ModelSpec(y=y[[1]], observed=np.ones((1, 3), bool), country_of_obs=np.array([0]),
                   region_of_country=base["region_of_country"], type_of_obs=np.array([1]),
                   n_regions=1, categories=base["categories"], quality_types_active=False)

    def lik1(x):
        p = mf.unpack(x)
        p1p = ModelParameters(beta0=p.beta0, beta_region=p.beta_region,
                              sigma_beta=p.sigma_beta, u=p.u, v=p.v, omega=p.omega,
                              q=np.zeros((1, 2)), sigma_type=p.sigma_type, phi=p.phi[[1]])
        full_eta = eta(p, full)[1]
        p1p.beta0 = full_eta - p.beta_region[0] - p.u[0]
        return log_likelihood_poisson(p1p, p1)

    g1 = _fd_grad(lik1, xf)
    for n in names_r:
        k = shared[n]
        expect = gf[k] - g1[k]
        if not n.startswith("phi") and not n.startswith("q_raw") \
                and not n.startswith("log_sigma_type"):
            assert gr[names_r.index(n)] == pytest.approx(expect, rel=1e-5, abs=1e-5), n


def test_bad_options_rejected(small_spec):
    with pytest.raises(ValueError):
        CauseModel(small_spec, backend="jax")
    with pytest.raises(ValueError):
        CauseModel(small_spec, intercept_scale=0)
    with pytest.raises(ValueError):
        CauseModel(small_spec)(np.zeros(3))


def test_spec_validation():
    with pytest.raises(ValueError):
        one_obs_spec([[0, 0]])
    with pytest.raises(ValueError):
        one_obs_spec([[1, 2]], observed=[[False, False]])
