"""Hierarchical multinomial model on the Poisson scale.

For observation ``i`` and non-reference category ``j`` the log-ratio against
the reference (last) category is::

    eta[i, j] = beta0[j] + beta_region[r(c(i)), j] + u[c(i), j] + q[i, j]

Counts enter through independent Poisson terms ``y ~ Poisson(g * exp(phi_i))``
with ``g = exp(eta)``, omitting missing categories. The sampler works on an
unconstrained vector; :class:`CauseModel` maps it to :class:`ModelParameters`
and returns the log posterior with its exact gradient.

Unconstrained layout (in order)::

    beta0            K            flat (or Normal(0, s) when intercept_scale=s)
    beta_region_raw  R*K          beta_region = sigma_beta * raw
    log_sigma_beta   1            sigma_beta ~ half-Normal(0, 1)
    u                C*K          u_c, or u_raw_c with u_c = diag(v) L_Omega u_raw_c
    log_v            K            v ~ half-Normal(0, 3)
    omega_cpc        K(K-1)/2     tanh -> canonical partial correlations
    q_raw            Nq*K         q_i = sigma_type[type(i)] * q_raw_i
    log_sigma_type   3            sigma_type ~ half-Normal(0, 0.25)
    phi_offset       N            see ``phi_parameterization``

With ``phi_parameterization="offset"`` (default) the last block stores
``s_i = phi_i + log G_i - log D_i`` where ``G_i`` sums ``g`` over observed
categories and ``D_i`` is the observed total. The shift has unit Jacobian, so
the posterior is unchanged, but ``s_i`` is a posteriori independent of the
other parameters. ``"raw"`` stores ``phi_i`` itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln

from . import _kernel
from . import categories as cat
from .exceptions import DomainError, NonFiniteDensity

LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)
LOG_2 = np.log(2.0)

SIGMA_BETA_SCALE = 1.0
V_SCALE = 3.0
SIGMA_TYPE_SCALE = 0.25
QUALITY_TYPES = (2, 3, 4)


# --------------------------------------------------------------------------
# data


@dataclass
class ModelSpec:
    """Counts plus the index structure of one model instance.

    The last category is the reference. ``observed`` is ``False`` for the
    missing categories ``J_i`` of each observation.
    """

    y: np.ndarray
    observed: np.ndarray
    country_of_obs: np.ndarray
    region_of_country: np.ndarray
    type_of_obs: np.ndarray
    n_regions: int
    categories: tuple = cat.MAIN
    countries: tuple = ()
    regions: tuple = ()
    observation_ids: tuple = ()
    quality_types_active: bool = True

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        self.y = np.where(self.observed, self.y, 0.0)
        self.country_of_obs = np.asarray(self.country_of_obs, dtype=int)
        self.region_of_country = np.asarray(self.region_of_country, dtype=int)
        self.type_of_obs = np.asarray(self.type_of_obs, dtype=int)
        N, J = self.y.shape
        if J < 2:
            raise ValueError("need at least two categories")
        if len(self.categories) != J:
            raise ValueError("categories must match the number of count columns")
        if self.observed.shape != (N, J):
            raise ValueError("observed mask must have the shape of y")
        if np.any(self.y < 0) or not np.all(np.isfinite(self.y)):
            raise ValueError("observed counts must be finite and nonnegative")
        if np.any(self.observed.sum(axis=1) == 0):
            raise ValueError("every observation needs at least one observed category")
        if np.any(self.y.sum(axis=1) <= 0):
            raise ValueError("every observation needs a positive observed total")
        if self.country_of_obs.shape != (N,) or self.type_of_obs.shape != (N,):
            raise ValueError("index arrays must have one entry per observation")
        if N and (self.country_of_obs.min() < 0 or self.country_of_obs.max() >= self.C):
            raise ValueError("country index out of range")
        if self.C and (self.region_of_country.min() < 0
                       or self.region_of_country.max() >= self.n_regions):
            raise ValueError("region index out of range")
        if not set(np.unique(self.type_of_obs)) <= {1, 2, 3, 4}:
            raise ValueError("quality types must be 1-4")
        if not self.countries:
            self.countries = tuple(f"c{c}" for c in range(self.C))
        if not self.regions:
            self.regions = tuple(f"r{r}" for r in range(self.n_regions))
        if not self.observation_ids:
            self.observation_ids = tuple(f"obs{i}" for i in range(N))

    @property
    def N(self):
        return self.y.shape[0]

    @property
    def J(self):
        return self.y.shape[1]

    @property
    def K(self):
        return self.J - 1

    @property
    def C(self):
        return len(self.region_of_country)

    @property
    def R(self):
        return self.n_regions

    @property
    def reference_index(self):
        return self.J - 1

    @property
    def missing_sets(self):
        return [tuple(np.flatnonzero(~row)) for row in self.observed]

    @property
    def totals(self):
        return self.y.sum(axis=1)

    def q_rows(self):
        """Observations that carry quality errors."""
        if not self.quality_types_active:
            return np.zeros(0, dtype=int)
        return np.flatnonzero(self.type_of_obs >= 2)


# --------------------------------------------------------------------------
# parameters


@dataclass
class ModelParameters:
    """One point in constrained parameter space."""

    beta0: np.ndarray
    beta_region: np.ndarray
    sigma_beta: float
    u: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    q: np.ndarray
    sigma_type: np.ndarray
    phi: np.ndarray
    chol_omega: np.ndarray | None = field(default=None, repr=False)

    @property
    def sigma(self):
        return self.v[:, None] * self.omega * self.v[None, :]

    def validate(self):
        om = np.asarray(self.omega)
        if not np.allclose(om, om.T, atol=1e-10) or not np.allclose(np.diag(om), 1.0, atol=1e-10):
            raise DomainError("Omega must be a symmetric matrix with unit diagonal")
        try:
            np.linalg.cholesky(om)
        except np.linalg.LinAlgError:
            raise DomainError("Omega is not positive definite") from None
        if self.sigma_beta <= 0 or np.any(self.v <= 0) or np.any(self.sigma_type <= 0):
            raise DomainError("scale parameters must be positive")


def eta(params, spec, i=None, j=None):
    """Log-ratios of categories to the reference.

    Returns the full ``(N, K)`` array, or the single value ``eta[i, j]`` when
    both indices are given. Quality errors are dropped for type-1 observations
    and for models without quality types.
    """
    c = spec.country_of_obs
    out = params.beta0[None, :] + params.beta_region[spec.region_of_country[c]] + params.u[c]
    if spec.quality_types_active:
        mask = (spec.type_of_obs >= 2)[:, None]
        out = out + np.where(mask, params.q, 0.0)
    if i is None:
        return out
    if j == spec.reference_index:
        raise ValueError("the reference category has no log-ratio")
    return float(out[i, j])


def _full_eta(eta_k):
    return np.concatenate([eta_k, np.zeros((eta_k.shape[0], 1))], axis=1)


def log_likelihood_poisson(params, spec):
    """Poisson log likelihood over observed cells, log-gamma terms dropped."""
    e = _full_eta(eta(params, spec)) + params.phi[:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        terms = np.where(spec.observed, spec.y * e - np.exp(e), 0.0)
        value = float(terms.sum())
    if not np.isfinite(value):
        raise NonFiniteDensity("Poisson log likelihood is not finite")
    return value


def log_likelihood_multinomial_reference(params, spec):
    """Reduced-multinomial log likelihood ``sum y log p~`` (test oracle)."""
    e = _full_eta(eta(params, spec))
    total = 0.0
    for i in range(spec.N):
        obs = spec.observed[i]
        ei = e[i, obs]
        log_p = ei - np.logaddexp.reduce(ei)
        total += float(np.dot(spec.y[i, obs], log_p))
    return total


def reduced_proportions(params, spec):
    """Model proportions renormalised over each observation's observed set."""
    e = _full_eta(eta(params, spec))
    e = np.where(spec.observed, e, -np.inf)
    e = e - e.max(axis=1, keepdims=True)
    g = np.exp(e)
    return g / g.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# priors


def half_normal_logpdf(x, scale):
    x = np.asarray(x, dtype=float)
    return LOG_2 - LOG_SQRT_2PI - np.log(scale) - 0.5 * (x / scale) ** 2


def normal_logpdf(x, scale):
    x = np.asarray(x, dtype=float)
    return -LOG_SQRT_2PI - np.log(scale) - 0.5 * (x / scale) ** 2


def lkj_log_normalizer(K, shape=1.0):
    """Log of the integral of ``det(Omega)**(shape-1)`` over K x K correlations."""
    if K < 2:
        return 0.0
    total = 0.0
    for k in range(1, K):
        b = shape + (K - k - 1) / 2.0
        total += (2 * shape - 2 + K - k) * (K - k) * np.log(2.0)
        total += (K - k) * betaln(b, b)
    return float(total)


def lkj_logpdf(omega, shape=1.0):
    K = omega.shape[0]
    if K < 2:
        return 0.0
    sign, logdet = np.linalg.slogdet(omega)
    if sign <= 0:
        raise DomainError("Omega is not positive definite")
    return float((shape - 1.0) * logdet - lkj_log_normalizer(K, shape))


def mvn_logpdf_rows(u, sigma):
    K = sigma.shape[0]
    try:
        Lc = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise DomainError("covariance is not positive definite") from None
    z = np.linalg.solve(Lc, u.T)
    logdet = 2.0 * np.log(np.diag(Lc)).sum()
    return float(-0.5 * (z**2).sum() - u.shape[0] * (K * LOG_SQRT_2PI + 0.5 * logdet))


def log_prior(params, spec, intercept_scale=None):
    """Log prior density in constrained space (no Jacobian terms).

    ``beta0`` and ``phi`` have flat priors unless ``intercept_scale`` gives
    ``beta0`` a Normal(0, intercept_scale) prior.
    """
    params.validate()
    lp = 0.0
    if intercept_scale is not None:
        lp += float(normal_logpdf(params.beta0, intercept_scale).sum())
    lp += float(normal_logpdf(params.beta_region, params.sigma_beta).sum())
    lp += float(half_normal_logpdf(params.sigma_beta, SIGMA_BETA_SCALE))
    if spec.C:
        lp += mvn_logpdf_rows(params.u, params.sigma)
    lp += float(half_normal_logpdf(params.v, V_SCALE).sum())
    lp += lkj_logpdf(params.omega)
    if spec.quality_types_active:
        rows = spec.q_rows()
        scales = params.sigma_type[spec.type_of_obs[rows] - 2]
        lp += float(normal_logpdf(params.q[rows], scales[:, None]).sum())
        lp += float(half_normal_logpdf(params.sigma_type, SIGMA_TYPE_SCALE).sum())
    return lp


# --------------------------------------------------------------------------
# correlation matrices via canonical partial correlations


def n_cpc(K):
    return K * (K - 1) // 2


def cpc_to_cholesky(y, K):
    """Map unconstrained values to the Cholesky factor of a correlation matrix.

    ``y`` has shape ``(..., K(K-1)/2)`` ordered row by row over the strict lower
    triangle. Returns ``(L, log_jacobian)`` where the Jacobian is that of the
    map onto the off-diagonal entries of ``Omega = L L^T``.
    """
    y = np.asarray(y, dtype=float)
    batch = y.shape[:-1]
    L = np.zeros(batch + (K, K))
    L[..., 0, 0] = 1.0
    logj = np.zeros(batch)
    z = np.tanh(y)
    log1mz2 = np.log1p(-z**2)
    pos = 0
    for i in range(1, K):
        zi = z[..., pos:pos + i]
        half = 0.5 * log1mz2[..., pos:pos + i]
        logw = np.concatenate([np.zeros(batch + (1,)), np.cumsum(half, axis=-1)], axis=-1)
        w = np.exp(logw)
        L[..., i, :i] = zi * w[..., :i]
        L[..., i, i] = w[..., i]
        # Omega->L (diag powers), L->z (triangular) and z->y (tanh) Jacobians.
        k = np.arange(i)
        logj = logj + ((K - k) / 2.0 * log1mz2[..., pos:pos + i]).sum(axis=-1)
        pos += i
    return L, logj


def _cpc_backward(y, L, gL, K):
    """Gradient with respect to ``y`` of ``f(L(y)) + log_jacobian(y)``."""
    z = np.tanh(y)
    g = np.empty_like(y)
    pos = 0
    for i in range(1, K):
        zi = z[pos:pos + i]
        row = gL[i, :i + 1] * L[i, :i + 1]
        # tail[k] = sum_{j > k, j <= i} gL[i, j] L[i, j]
        tail = np.cumsum(row[::-1])[::-1][1:]
        w = _row_w(zi)
        k = np.arange(i)
        g[pos:pos + i] = (1 - zi**2) * gL[i, :i] * w - zi * tail - zi * (K - k)
        pos += i
    return g


def _row_w(zi):
    half = 0.5 * np.log1p(-zi**2)
    return np.exp(np.concatenate([[0.0], np.cumsum(half)[:-1]]))


def cholesky_to_cpc(L):
    """Inverse of :func:`cpc_to_cholesky` for a single factor."""
    K = L.shape[0]
    out = []
    for i in range(1, K):
        rem = 1.0
        for j in range(i):
            zij = L[i, j] / np.sqrt(rem)
            out.append(np.arctanh(np.clip(zij, -1 + 1e-15, 1 - 1e-15)))
            rem -= L[i, j] ** 2
    return np.array(out)


# --------------------------------------------------------------------------
# the model


class CauseModel:
    """Log posterior of one model instance over an unconstrained vector.

    Parameters
    ----------
    spec : ModelSpec
    phi_parameterization : {"offset", "raw"}
    intercept_scale : float, optional
        Normal prior scale for ``beta0``; ``None`` keeps the flat prior.
    country_effects : {"centered", "noncentered"}
        Whether the ``u`` block stores the country effects themselves or
        standardised values mapped through ``diag(v) L_Omega``.
    backend : {"numba", "numpy"}
        Implementation of :meth:`log_density_and_gradient`; both give the same
        values to rounding.
    """

    def __init__(self, spec, phi_parameterization="offset", intercept_scale=None,
                 country_effects="noncentered", backend="numba"):
        if phi_parameterization not in ("offset", "raw"):
            raise ValueError("phi_parameterization must be 'offset' or 'raw'")
        if country_effects not in ("centered", "noncentered"):
            raise ValueError("country_effects must be 'centered' or 'noncentered'")
        if backend not in ("numba", "numpy"):
            raise ValueError("backend must be 'numba' or 'numpy'")
        if intercept_scale is not None and not intercept_scale > 0:
            raise ValueError("intercept_scale must be positive")
        self.spec = spec
        self.phi_parameterization = phi_parameterization
        self.intercept_scale = intercept_scale
        self.country_effects = country_effects
        self.backend = backend
        self.centered = country_effects == "centered"
        N, K, C, R = spec.N, spec.K, spec.C, spec.R
        self.K = K
        self._q_rows = spec.q_rows()
        self.Nq = len(self._q_rows)
        self.n_types = len(QUALITY_TYPES) if spec.quality_types_active else 0
        sizes = [
            ("beta0", K), ("beta_region_raw", R * K), ("log_sigma_beta", 1),
            ("u", C * K), ("log_v", K), ("omega_cpc", n_cpc(K)),
            ("q_raw", self.Nq * K), ("log_sigma_type", self.n_types), ("phi", N),
        ]
        self.slices = {}
        pos = 0
        for name, size in sizes:
            self.slices[name] = slice(pos, pos + size)
            pos += size
        self.dim = pos

        self._y = spec.y
        self._mask = spec.observed
        self._D = spec.totals
        self._logD = np.log(self._D)
        self._ylogy_const = float((self._D * self._logD).sum())
        obs_region = spec.region_of_country[spec.country_of_obs]
        self._obs_country_onehot = np.zeros((N, C))
        self._obs_country_onehot[np.arange(N), spec.country_of_obs] = 1.0
        self._obs_region_onehot = np.zeros((N, R))
        self._obs_region_onehot[np.arange(N), obs_region] = 1.0
        self._country = spec.country_of_obs
        self._obs_region = obs_region
        self._q_type_idx = spec.type_of_obs[self._q_rows] - 2
        self._q_type_onehot = np.zeros((self.Nq, self.n_types))
        if self.Nq:
            self._q_type_onehot[np.arange(self.Nq), self._q_type_idx] = 1.0
        self._qidx = np.full(N, -1, dtype=np.int64)
        self._qidx[self._q_rows] = np.arange(self.Nq)
        # Normal(0,1) constants for raw blocks and half-normal constants for scales
        n_std = R * K + C * K + self.Nq * K
        self._const = (
            -lkj_log_normalizer(K)
            - n_std * LOG_SQRT_2PI
            + (LOG_2 - LOG_SQRT_2PI - np.log(SIGMA_BETA_SCALE))
            + K * (LOG_2 - LOG_SQRT_2PI - np.log(V_SCALE))
            + self.n_types * (LOG_2 - LOG_SQRT_2PI - np.log(SIGMA_TYPE_SCALE))
        )
        if intercept_scale is not None:
            self._const += K * (-LOG_SQRT_2PI - np.log(intercept_scale))
        self._kernel_args = (
            K, R, C, N, np.ascontiguousarray(self._y), np.ascontiguousarray(self._mask),
            self._D, self._logD, self._ylogy_const, obs_region.astype(np.int64),
            self._country.astype(np.int64), self._qidx, self._q_type_idx.astype(np.int64),
            self.n_types, float(intercept_scale or 0.0),
            phi_parameterization == "offset", self.centered, float(self._const),
        )

    # ---- names -----------------------------------------------------------

    @property
    def parameter_names(self):
        """Names of the unconstrained coordinates."""
        s, cats = self.spec, self.spec.categories[:-1]
        u_label = "u" if self.centered else "u_raw"
        names = [f"beta0[{c}]" for c in cats]
        names += [f"beta_region_raw[{r},{c}]" for r in s.regions for c in cats]
        names += ["log_sigma_beta"]
        names += [f"{u_label}[{k},{c}]" for k in s.countries for c in cats]
        names += [f"log_v[{c}]" for c in cats]
        names += [f"omega_cpc[{i},{j}]" for i in range(1, self.K) for j in range(i)]
        names += [f"q_raw[{s.observation_ids[i]},{c}]" for i in self._q_rows for c in cats]
        names += [f"log_sigma_type[{t}]" for t in QUALITY_TYPES[: self.n_types]]
        label = "phi_offset" if self.phi_parameterization == "offset" else "phi"
        names += [f"{label}[{o}]" for o in s.observation_ids]
        return names

    @property
    def constrained_names(self):
        """Names of the columns produced by :meth:`constrain_draws`."""
        s, cats = self.spec, self.spec.categories[:-1]
        names = [f"beta0[{c}]" for c in cats]
        names += [f"beta_region[{r},{c}]" for r in s.regions for c in cats]
        names += ["sigma_beta"]
        names += [f"u[{k},{c}]" for k in s.countries for c in cats]
        names += [f"v[{c}]" for c in cats]
        names += [f"Omega[{cats[i]},{cats[j]}]" for i in range(1, self.K) for j in range(i)]
        names += [f"q[{s.observation_ids[i]},{c}]" for i in self._q_rows for c in cats]
        names += [f"sigma_type[{t}]" for t in QUALITY_TYPES[: self.n_types]]
        names += [f"phi[{o}]" for o in s.observation_ids]
        return names

    # ---- transforms ------------------------------------------------------

    def _blocks(self, x):
        sl, s, K = self.slices, self.spec, self.K
        return dict(
            beta0=x[sl["beta0"]],
            b_raw=x[sl["beta_region_raw"]].reshape(s.R, K),
            lsb=x[sl["log_sigma_beta"]][0],
            u_block=x[sl["u"]].reshape(s.C, K),
            lv=x[sl["log_v"]],
            cpc=x[sl["omega_cpc"]],
            q_raw=x[sl["q_raw"]].reshape(self.Nq, K),
            lst=x[sl["log_sigma_type"]],
            phi=x[sl["phi"]],
        )

    def _country_effects(self, b, A):
        """``(u, z)`` with ``u_c = A z_c``."""
        if self.centered:
            u = b["u_block"]
            z = np.linalg.solve(A, u.T).T if len(u) else u.copy()
            return u, z
        z = b["u_block"]
        return z @ A.T, z

    def _eta(self, b):
        sigma_beta = np.exp(b["lsb"])
        v = np.exp(b["lv"])
        L, _ = cpc_to_cholesky(b["cpc"], self.K)
        A = v[:, None] * L
        u, _ = self._country_effects(b, A)
        beta_region = sigma_beta * b["b_raw"]
        e = b["beta0"][None, :] + beta_region[self._obs_region] + u[self._country]
        q_full = np.zeros_like(e)
        sigma_type = np.exp(b["lst"])
        if self.Nq:
            q_full[self._q_rows] = sigma_type[self._q_type_idx][:, None] * b["q_raw"]
            e = e + q_full
        return e, dict(sigma_beta=sigma_beta, v=v, L=L, A=A, u=u,
                       beta_region=beta_region, q=q_full, sigma_type=sigma_type)

    def unpack(self, x):
        """Constrained :class:`ModelParameters` at unconstrained point ``x``."""
        x = np.asarray(x, dtype=float)
        b = self._blocks(x)
        e, aux = self._eta(b)
        if self.phi_parameterization == "offset":
            phi = b["phi"] + self._logD - self._log_G(e)
        else:
            phi = b["phi"].copy()
        sigma_type = aux["sigma_type"] if self.n_types else np.ones(len(QUALITY_TYPES))
        return ModelParameters(
            beta0=b["beta0"].copy(), beta_region=aux["beta_region"],
            sigma_beta=float(aux["sigma_beta"]), u=np.array(aux["u"]), v=aux["v"],
            omega=aux["L"] @ aux["L"].T, q=aux["q"], sigma_type=sigma_type,
            phi=phi, chol_omega=aux["L"],
        )

    def pack(self, params):
        """Inverse of :meth:`unpack`."""
        s = self.spec
        x = np.zeros(self.dim)
        sl = self.slices
        x[sl["beta0"]] = params.beta0
        x[sl["beta_region_raw"]] = (params.beta_region / params.sigma_beta).ravel()
        x[sl["log_sigma_beta"]] = np.log(params.sigma_beta)
        L = params.chol_omega if params.chol_omega is not None else np.linalg.cholesky(params.omega)
        if self.centered:
            x[sl["u"]] = np.asarray(params.u).ravel()
        else:
            A = params.v[:, None] * L
            x[sl["u"]] = np.linalg.solve(A, params.u.T).T.ravel()
        x[sl["log_v"]] = np.log(params.v)
        x[sl["omega_cpc"]] = cholesky_to_cpc(L)
        if self.Nq:
            st = params.sigma_type[self._q_type_idx]
            x[sl["q_raw"]] = (params.q[self._q_rows] / st[:, None]).ravel()
        if self.n_types:
            x[sl["log_sigma_type"]] = np.log(params.sigma_type[: self.n_types])
        if self.phi_parameterization == "offset":
            e = eta(params, s)
            x[sl["phi"]] = params.phi - self._logD + self._log_G(e)
        else:
            x[sl["phi"]] = params.phi
        return x

    def _log_G(self, e):
        full = np.where(self._mask, _full_eta(e), -np.inf)
        m = full.max(axis=1)
        return m + np.log(np.exp(full - m[:, None]).sum(axis=1))

    def log_jacobian(self, x):
        """Log |det| of the map from ``x`` to the constrained parameters."""
        b = self._blocks(np.asarray(x, dtype=float))
        s, K = self.spec, self.K
        L, logj_omega = cpc_to_cholesky(b["cpc"], K)
        lv = b["lv"]
        out = b["lsb"] * (1 + s.R * K) + lv.sum() + float(logj_omega)
        if not self.centered:
            out += s.C * (lv.sum() + np.log(np.diag(L)).sum())
        if self.n_types:
            out += b["lst"].sum() + K * b["lst"][self._q_type_idx].sum()
        return float(out)

    # ---- density ---------------------------------------------------------

    def log_density(self, x):
        return self.log_density_and_gradient(x)[0]

    def log_density_and_gradient(self, x):
        """Log posterior (up to a constant) and its gradient at ``x``."""
        x = np.ascontiguousarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {x.shape}")
        if self.backend == "numba":
            grad = np.empty(self.dim)
            value = _kernel.log_density_grad(x, grad, *self._kernel_args)
        else:
            value, grad = self._numpy_log_density_and_gradient(x)
        # a non-finite entry makes the sum non-finite
        if not (math.isfinite(value) and math.isfinite(grad.sum())):
            raise NonFiniteDensity("log posterior or gradient is not finite")
        return float(value), grad

    __call__ = log_density_and_gradient

    def _numpy_log_density_and_gradient(self, x):
        s, K = self.spec, self.K
        b = self._blocks(x)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            sigma_beta = np.exp(b["lsb"])
            v = np.exp(b["lv"])
            sigma_type = np.exp(b["lst"])
            L, logj_omega = cpc_to_cholesky(b["cpc"], K)
            A = v[:, None] * L
            u, z = self._country_effects(b, A)
            beta_region = sigma_beta * b["b_raw"]
            e = b["beta0"][None, :] + beta_region[self._obs_region] + u[self._country]
            if self.Nq:
                st_rows = sigma_type[self._q_type_idx]
                e[self._q_rows] += st_rows[:, None] * b["q_raw"]

            # likelihood
            full = np.concatenate([e, np.zeros((s.N, 1))], axis=1)
            y, mask, D = self._y, self._mask, self._D
            phi = b["phi"]
            if self.phi_parameterization == "offset":
                fm = np.where(mask, full, -np.inf)
                mx = fm.max(axis=1)
                ex = np.exp(fm - mx[:, None])
                G = ex.sum(axis=1)
                logG = mx + np.log(G)
                es = np.exp(phi)
                ll = (y * full).sum() - (D * logG).sum() + self._ylogy_const \
                    + (D * phi).sum() - (D * es).sum()
                g_full = y - D[:, None] * ex / G[:, None]
                g_phi = D - D * es
            else:
                mu = np.where(mask, np.exp(full + phi[:, None]), 0.0)
                ll = (y * (full + phi[:, None])).sum() - mu.sum()
                g_full = y - mu
                g_phi = D - mu.sum(axis=1)
            g_eta = g_full[:, :K]

            # priors, with Jacobians of the log and non-centred transforms
            lp = self._const
            g_b0 = g_eta.sum(axis=0)
            if self.intercept_scale is not None:
                lp += -0.5 * (b["beta0"] ** 2).sum() / self.intercept_scale**2
                g_b0 = g_b0 - b["beta0"] / self.intercept_scale**2

            g_br = self._obs_region_onehot.T @ g_eta
            lp += -0.5 * (b["b_raw"] ** 2).sum()
            g_braw = sigma_beta * g_br - b["b_raw"]
            lp += -0.5 * (sigma_beta / SIGMA_BETA_SCALE) ** 2 + b["lsb"]
            g_lsb = sigma_beta * (g_br * b["b_raw"]).sum() \
                - (sigma_beta / SIGMA_BETA_SCALE) ** 2 + 1.0

            g_u = self._obs_country_onehot.T @ g_eta
            lp += -0.5 * (z**2).sum()
            if self.centered:
                # z_c = A^{-1} u_c, w_c = A^{-T} z_c
                w = np.linalg.solve(A.T, z.T).T if s.C else z
                g_ublock = g_u - w
                g_A = np.tril(w.T @ z)
                lp -= s.C * np.log(np.diag(A)).sum()
                g_A[np.diag_indices(K)] -= s.C / np.diag(A)
            else:
                g_ublock = g_u @ A - z
                g_A = np.tril(g_u.T @ z)
            g_v = (g_A * L).sum(axis=1)
            g_L = v[:, None] * g_A
            lp += (-0.5 * (v / V_SCALE) ** 2 + b["lv"]).sum()
            g_lv = g_v * v - (v / V_SCALE) ** 2 + 1.0

            lp += float(logj_omega)
            g_cpc = _cpc_backward(b["cpc"], L, g_L, K)

            if self.Nq:
                g_qrow = g_eta[self._q_rows]
                lp += -0.5 * (b["q_raw"] ** 2).sum()
                g_qraw = st_rows[:, None] * g_qrow - b["q_raw"]
                g_st = self._q_type_onehot.T @ (g_qrow * b["q_raw"]).sum(axis=1)
            else:
                g_qraw = np.zeros((0, K))
                g_st = np.zeros(self.n_types)
            if self.n_types:
                lp += (-0.5 * (sigma_type / SIGMA_TYPE_SCALE) ** 2 + b["lst"]).sum()
                g_lst = g_st * sigma_type - (sigma_type / SIGMA_TYPE_SCALE) ** 2 + 1.0
            else:
                g_lst = np.zeros(0)

            value = float(ll + lp)
            grad = np.concatenate([
                g_b0, g_braw.ravel(), [g_lsb], g_ublock.ravel(), g_lv, g_cpc,
                g_qraw.ravel(), g_lst, g_phi,
            ])
        return value, grad

    # ---- draws -----------------------------------------------------------

    def constrain_draws(self, draws):
        """Constrained values for a ``(S, dim)`` array of unconstrained draws."""
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        il = np.tril_indices(self.K, -1)
        rows = []
        for x in draws:
            p = self.unpack(x)
            parts = [p.beta0, p.beta_region.ravel(), [p.sigma_beta], p.u.ravel(), p.v,
                     p.omega[il], p.q[self._q_rows].ravel(),
                     p.sigma_type[: self.n_types], p.phi]
            rows.append(np.concatenate([np.ravel(a) for a in parts]))
        return np.array(rows)

    def effects(self, draws):
        """Vectorised ``beta0, beta_region, u, v, chol`` for ``(S, dim)`` draws."""
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        sl, s, K = self.slices, self.spec, self.K
        S = draws.shape[0]
        beta0 = draws[:, sl["beta0"]]
        sigma_beta = np.exp(draws[:, sl["log_sigma_beta"]])
        beta_region = sigma_beta[:, :, None] * draws[:, sl["beta_region_raw"]].reshape(S, s.R, K)
        v = np.exp(draws[:, sl["log_v"]])
        L, _ = cpc_to_cholesky(draws[:, sl["omega_cpc"]], K)
        block = draws[:, sl["u"]].reshape(S, s.C, K)
        if self.centered:
            u = block
        else:
            A = v[:, :, None] * L
            u = np.einsum("sck,sjk->scj", block, A)
        return dict(beta0=beta0, beta_region=beta_region, u=u, v=v, chol=L,
                    sigma_beta=sigma_beta[:, 0])


def log_posterior_and_gradient(x, spec, **kwargs):
    """Functional form of :meth:`CauseModel.log_density_and_gradient`."""
    return CauseModel(spec, **kwargs).log_density_and_gradient(x)


# --------------------------------------------------------------------------
# building specs from records


def build_model_spec(records, quality_types, region_map, target="main", regions=None):
    """Assemble a :class:`ModelSpec` from adjusted observation records.

    Parameters
    ----------
    records : list of ObservationRecord
    quality_types : mapping
        Observation id to quality type; only used for the main model.
    region_map : RegionMap
    target : str
        ``"main"`` or one of ``"HEM"``, ``"SEP"``, ``"DIR"``.
    regions : sequence of str, optional
        Modeling regions to include, so that region effects exist for
        countries without data. Defaults to the regions of the data.

    Observations with no observed deaths in the target categories carry no
    information about proportions and are left out.
    """
    if target == "main":
        categories = cat.MAIN
    elif target in cat.SUB:
        categories = cat.SUB[target]
    else:
        raise ValueError(f"unknown model target {target!r}")
    rows, keep = [], []
    for r in records:
        arr = r.main_array() if target == "main" else r.sub_array(target)
        observed = ~np.isnan(arr)
        if observed.sum() == 0 or np.nansum(arr) <= 0:
            continue
        rows.append((np.nan_to_num(arr), observed))
        keep.append(r)
    countries = sorted({r.country for r in keep})
    missing_region = [c for c in countries if c not in region_map]
    if missing_region:
        raise KeyError(f"countries without a modeling region: {missing_region}")
    data_regions = {region_map.model_region[c] for c in countries}
    regions = sorted(set(regions or ()) | data_regions)
    c_index = {c: k for k, c in enumerate(countries)}
    r_index = {r: k for k, r in enumerate(regions)}
    y = np.array([a for a, _ in rows]).reshape(len(rows), len(categories))
    observed = np.array([o for _, o in rows], dtype=bool).reshape(len(rows), len(categories))
    active = target == "main"
    return ModelSpec(
        y=y,
        observed=observed,
        country_of_obs=np.array([c_index[r.country] for r in keep], dtype=int),
        region_of_country=np.array([r_index[region_map.model_region[c]] for c in countries],
                                   dtype=int),
        type_of_obs=np.array([int(quality_types[r.observation_id]) if active else 1
                              for r in keep], dtype=int),
        n_regions=len(regions),
        categories=tuple(categories),
        countries=tuple(countries),
        regions=tuple(regions),
        observation_ids=tuple(r.observation_id for r in keep),
        quality_types_active=active,
    )
