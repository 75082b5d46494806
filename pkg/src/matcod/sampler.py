"""No-U-turn Hamiltonian Monte Carlo with windowed warmup adaptation.

Trajectories are built by repeated doubling with multinomial sampling of the
next state and the generalised U-turn criterion. Warmup adapts the step size
by dual averaging and a diagonal (or dense) inverse metric over doubling
windows.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import AllInitsFailed, MaxDepthSaturation, NonFiniteDensity

logger = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0
INIT_RADIUS = 2.0
INIT_TRIES = 100
THREADS_ENV = "MATCOD_THREADS"


@dataclass(frozen=True)
class SamplerConfig:
    """Run settings for :func:`sample`.

    The defaults are the full-scale configuration; :meth:`desk` gives the
    small profile used for quick runs and tests.
    """

    chains: int = 4
    warmup_iters: int = 6000
    sampling_iters: int = 4000
    seed: int = 1
    target_accept: float = 0.8
    max_tree_depth: int = 10
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25
    init_radius: float = INIT_RADIUS
    metric: str = "diag"
    threads: int | None = None

    def __post_init__(self):
        if self.chains < 1 or self.warmup_iters < 0 or self.sampling_iters < 1:
            raise ValueError("chains and sampling_iters must be >= 1, warmup_iters >= 0")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")
        if self.metric not in ("diag", "dense"):
            raise ValueError("metric must be 'diag' or 'dense'")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def desk(cls, **kwargs):
        kwargs.setdefault("warmup_iters", 500)
        kwargs.setdefault("sampling_iters", 500)
        return cls(**kwargs)

    def replace(self, **kwargs):
        return replace(self, **kwargs)


@dataclass
class PosteriorDraws:
    """Post-warmup draws on the unconstrained scale.

    Attributes
    ----------
    draws : ndarray, shape (chains, iterations, dim)
    parameter_names : list of str
    divergences : ndarray of int, per chain
    stats : dict
        Per-chain step size, inverse metric, and per-iteration tree depth,
        acceptance statistic and divergence flags.
    diagnostics : pandas.DataFrame or None
        Filled in by :func:`matcod.diagnostics.diagnose`.
    """

    draws: np.ndarray
    parameter_names: list
    divergences: np.ndarray
    stats: dict = field(default_factory=dict)
    diagnostics: object = None

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_iterations(self):
        return self.draws.shape[1]

    def flat(self):
        return self.draws.reshape(-1, self.draws.shape[-1])

    @property
    def divergence_count(self):
        return int(self.divergences.sum())


# --------------------------------------------------------------------------
# trajectory building


class _Hamiltonian:
    """Potential from ``log_density``, Gaussian kinetic energy.

    ``inv_metric`` is a vector (diagonal metric) or a matrix (dense metric).
    """

    def __init__(self, log_density, inv_metric):
        self.log_density = log_density
        self.inv_metric = inv_metric

    @property
    def inv_metric(self):
        return self._inv_metric

    @inv_metric.setter
    def inv_metric(self, value):
        value = np.asarray(value, dtype=float)
        self._inv_metric = value
        self.dense = value.ndim == 2
        if self.dense:
            self._chol = np.linalg.cholesky(value)

    def velocity(self, p):
        return self._inv_metric @ p if self.dense else self._inv_metric * p

    def draw_momentum(self, rng, shape):
        z = rng.standard_normal(shape)
        if self.dense:
            # p ~ N(0, M) with M the inverse of inv_metric = L L^T
            return solve_triangular(self._chol, z, trans="T", lower=True)
        return z / np.sqrt(self._inv_metric)

    def position(self, q):
        try:
            lp, g = self.log_density(q)
        except NonFiniteDensity:
            return -np.inf, None
        if not np.isfinite(lp):
            return -np.inf, None
        return lp, g

    def energy(self, lp, p):
        return -lp + 0.5 * float(np.dot(self.velocity(p), p))


class _Point:
    __slots__ = ("q", "p", "lp", "g")

    def __init__(self, q, p, lp, g):
        self.q, self.p, self.lp, self.g = q, p, lp, g


class _Tree:
    """Mutable bookkeeping for one NUTS transition."""

    def __init__(self, ham, eps, H0, rng):
        self.ham = ham
        self.eps = eps
        self.H0 = H0
        self.rng = rng
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False

    def leapfrog(self, z, sign):
        eps = sign * self.eps
        p = z.p + 0.5 * eps * z.g
        q = z.q + eps * self.ham.velocity(p)
        lp, g = self.ham.position(q)
        if g is None:
            return _Point(q, p, -np.inf, None)
        p = p + 0.5 * eps * g
        return _Point(q, p, lp, g)

    def build(self, depth, z, sign, rho):
        """Extend from frontier ``z``; returns a tuple describing the subtree.

        The result is ``(valid, frontier, proposal, log_weight, rho,
        p_beg, p_sharp_beg, p_end, p_sharp_end)``.
        """
        if depth == 0:
            z = self.leapfrog(z, sign)
            self.n_leapfrog += 1
            if z.g is None:
                self.divergent = True
                return (False, z, z, -np.inf, rho, None, None, None, None)
            h = self.ham.energy(z.lp, z.p)
            if not np.isfinite(h):
                h = np.inf
            if h - self.H0 > MAX_DELTA_H:
                self.divergent = True
            delta = self.H0 - h
            self.sum_metro += 1.0 if delta > 0 else np.exp(delta)
            ps = self.ham.velocity(z.p)
            return (not self.divergent, z, z, delta, rho + z.p, z.p, ps, z.p, ps)

        zero = np.zeros_like(rho)
        init = self.build(depth - 1, z, sign, zero)
        if not init[0]:
            return (False,) + init[1:]
        _, z, prop_init, lw_init, rho_init, p_beg, ps_beg, p_init_end, ps_init_end = init
        final = self.build(depth - 1, z, sign, zero)
        if not final[0]:
            return (False,) + final[1:]
        _, z, prop_final, lw_final, rho_final, p_final_beg, ps_final_beg, p_end, ps_end = final

        lw_subtree = np.logaddexp(lw_init, lw_final)
        if lw_final > lw_subtree or self.rng.uniform() < np.exp(lw_final - lw_subtree):
            proposal = prop_final
        else:
            proposal = prop_init
        rho_subtree = rho_init + rho_final
        persist = _no_u_turn(ps_beg, ps_end, rho_subtree)
        persist &= _no_u_turn(ps_beg, ps_final_beg, rho_init + p_final_beg)
        persist &= _no_u_turn(ps_init_end, ps_end, rho_final + p_init_end)
        return (persist, z, proposal, lw_subtree, rho + rho_subtree,
                p_beg, ps_beg, p_end, ps_end)


def _no_u_turn(ps_minus, ps_plus, rho):
    return bool(np.dot(ps_plus, rho) > 0 and np.dot(ps_minus, rho) > 0)


def nuts_transition(z, ham, eps, max_depth, rng):
    """One NUTS transition from point ``z``.

    Returns ``(new_point, accept_stat, depth, n_leapfrog, divergent)``.
    """
    p0 = ham.draw_momentum(rng, z.q.shape)
    z = _Point(z.q, p0, z.lp, z.g)
    H0 = ham.energy(z.lp, p0)
    tree = _Tree(ham, eps, H0, rng)

    z_fwd = z_bck = z
    sample = z
    ps0 = ham.velocity(p0)
    p_fwd_fwd = p_fwd_bck = p_bck_fwd = p_bck_bck = p0
    ps_fwd_fwd = ps_fwd_bck = ps_bck_fwd = ps_bck_bck = ps0
    rho = p0.copy()
    log_weight = 0.0
    depth = 0
    zero = np.zeros_like(p0)

    while depth < max_depth:
        if rng.uniform() > 0.5:
            rho_bck = rho
            p_bck_fwd, ps_bck_fwd = p_fwd_bck, ps_fwd_bck
            valid, z_fwd, proposal, lw_sub, rho_fwd, p_fwd_bck, ps_fwd_bck, p_fwd_fwd, ps_fwd_fwd = \
                tree.build(depth, z_fwd, 1, zero)
        else:
            rho_fwd = rho
            p_fwd_bck, ps_fwd_bck = p_bck_fwd, ps_bck_fwd
            valid, z_bck, proposal, lw_sub, rho_bck, p_bck_fwd, ps_bck_fwd, p_bck_bck, ps_bck_bck = \
                tree.build(depth, z_bck, -1, zero)
        if not valid:
            break
        depth += 1
        if lw_sub > log_weight or rng.uniform() < np.exp(lw_sub - log_weight):
            sample = proposal
        log_weight = np.logaddexp(log_weight, lw_sub)
        rho = rho_bck + rho_fwd
        persist = _no_u_turn(ps_bck_bck, ps_fwd_fwd, rho)
        persist &= _no_u_turn(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
        persist &= _no_u_turn(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
        if not persist:
            break

    accept = tree.sum_metro / max(tree.n_leapfrog, 1)
    return sample, accept, depth, tree.n_leapfrog, tree.divergent


# --------------------------------------------------------------------------
# adaptation


class DualAveraging:
    """Step-size adaptation towards a target acceptance statistic."""

    def __init__(self, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.mu = 0.0
        self.restart()

    def restart(self):
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def learn(self, accept):
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.target - accept)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1 - x_eta) * self.x_bar + x_eta * x
        return float(np.exp(x))

    def final(self):
        return float(np.exp(self.x_bar))


class WindowedVariance:
    """Metric estimation over doubling slow windows.

    Returns variances, or full covariance matrices when ``dense``.
    """

    def __init__(self, warmup, init_buffer=75, term_buffer=50, base_window=25, dense=False):
        self.warmup = warmup
        self.dense = dense
        if warmup < 20:
            self.active = False
            self.init_buffer = self.term_buffer = self.base_window = 0
        else:
            self.active = True
            if init_buffer + base_window + term_buffer > warmup:
                init_buffer = int(0.15 * warmup)
                term_buffer = int(0.1 * warmup)
                base_window = warmup - (init_buffer + term_buffer)
            self.init_buffer, self.term_buffer, self.base_window = (
                init_buffer, term_buffer, base_window)
        self.counter = 0
        self.window_size = self.base_window
        self.next_window = self.init_buffer + self.window_size - 1
        self._reset()

    def _reset(self):
        self._n = 0
        self._mean = None
        self._m2 = None

    def _add(self, q):
        self._n += 1
        if self._mean is None:
            self._mean = np.zeros_like(q)
            self._m2 = np.zeros((q.size, q.size)) if self.dense else np.zeros_like(q)
        delta = q - self._mean
        self._mean += delta / self._n
        if self.dense:
            self._m2 += np.outer(delta, q - self._mean)
        else:
            self._m2 += delta * (q - self._mean)

    def _in_window(self):
        return (self.counter >= self.init_buffer
                and self.counter < self.warmup - self.term_buffer
                and self.counter != self.warmup)

    def _end_window(self):
        return self.counter == self.next_window and self.counter != self.warmup

    def _next_window(self):
        last = self.warmup - self.term_buffer - 1
        if self.next_window == last:
            return
        self.window_size *= 2
        self.next_window = self.counter + self.window_size
        if self.next_window != last and self.next_window + 2 * self.window_size >= last + 1:
            self.next_window = last

    def learn(self, q):
        """Record ``q``; return a new inverse metric at a window end, else ``None``."""
        if not self.active:
            self.counter += 1
            return None
        if self._in_window():
            self._add(q)
        if self._end_window():
            self._next_window()
            n = self._n
            ident = np.eye(q.size) if self.dense else np.ones_like(q)
            var = self._m2 / (n - 1) if n > 1 else ident
            # shrink towards a small multiple of the identity
            var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0)) * ident
            self._reset()
            self.counter += 1
            return var
        self.counter += 1
        return None


def find_reasonable_stepsize(z, ham, eps, rng):
    """Double or halve ``eps`` until one leapfrog step crosses acceptance 0.8."""
    log_target = np.log(0.8)

    def delta_h():
        p = ham.draw_momentum(rng, z.q.shape)
        H0 = ham.energy(z.lp, p)
        tree = _Tree(ham, eps, H0, rng)
        z1 = tree.leapfrog(_Point(z.q, p, z.lp, z.g), 1)
        if z1.g is None:
            return -np.inf
        h = ham.energy(z1.lp, z1.p)
        return H0 - (h if np.isfinite(h) else np.inf)

    direction = 1 if delta_h() > log_target else -1
    for _ in range(200):
        d = delta_h()
        if direction == 1 and not d > log_target:
            break
        if direction == -1 and not d < log_target:
            break
        eps = eps * 2.0 if direction == 1 else eps * 0.5
        if eps > 1e7:
            raise RuntimeError("step size diverged to infinity during initialisation")
        if eps == 0.0:
            raise RuntimeError("step size collapsed to zero during initialisation")
    return eps


# --------------------------------------------------------------------------
# chains


def _initial_point(log_density, dim, rng, radius, init=None):
    ham = _Hamiltonian(log_density, np.ones(dim))
    if init is not None:
        q = np.asarray(init, dtype=float).copy()
        lp, g = ham.position(q)
        if g is not None and np.all(np.isfinite(g)):
            return _Point(q, None, lp, g)
    for _ in range(INIT_TRIES):
        q = rng.uniform(-radius, radius, size=dim)
        lp, g = ham.position(q)
        if g is not None and np.all(np.isfinite(g)):
            return _Point(q, None, lp, g)
    raise AllInitsFailed(f"no finite log density after {INIT_TRIES} initial draws")


def run_chain(log_density, dim, config, seed_seq, init=None):
    """Run one chain; returns ``(draws, stats)``."""
    rng = np.random.default_rng(seed_seq)
    z = _initial_point(log_density, dim, rng, config.init_radius, init)
    ham = _Hamiltonian(log_density, np.ones(dim))
    eps = find_reasonable_stepsize(z, ham, 1.0, rng)
    da = DualAveraging(config.target_accept)
    da.mu = np.log(10 * eps)
    windows = WindowedVariance(config.warmup_iters, config.init_buffer,
                               config.term_buffer, config.base_window,
                               dense=config.metric == "dense")
    n_total = config.warmup_iters + config.sampling_iters
    draws = np.empty((config.sampling_iters, dim))
    depth = np.zeros(n_total, dtype=int)
    accept = np.zeros(n_total)
    divergent = np.zeros(n_total, dtype=bool)
    n_leapfrog = np.zeros(n_total, dtype=int)
    for it in range(n_total):
        z, a, d, n, div = nuts_transition(z, ham, eps, config.max_tree_depth, rng)
        depth[it], accept[it], divergent[it], n_leapfrog[it] = d, a, div, n
        if it < config.warmup_iters:
            eps = da.learn(a)
            var = windows.learn(z.q)
            if var is not None:
                ham.inv_metric = var
                eps = find_reasonable_stepsize(z, ham, eps, rng)
                da.mu = np.log(10 * eps)
                da.restart()
            if it == config.warmup_iters - 1:
                eps = da.final()
        else:
            draws[it - config.warmup_iters] = z.q
    stats = dict(
        step_size=eps,
        inv_metric=ham.inv_metric.copy(),
        tree_depth=depth[config.warmup_iters:],
        accept_stat=accept[config.warmup_iters:],
        divergent=divergent[config.warmup_iters:],
        n_leapfrog=n_leapfrog[config.warmup_iters:],
        warmup_divergent=int(divergent[:config.warmup_iters].sum()),
    )
    return draws, stats


def _thread_count(config):
    if config.threads is not None:
        return max(1, int(config.threads))
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


def _chain_job(args):
    log_density, dim, config, seed_seq, init = args
    return run_chain(log_density, dim, config, seed_seq, init)


def sample(model, config=None, init=None):
    """Draw from the density of ``model`` with NUTS.

    Parameters
    ----------
    model : object
        Callable ``x -> (log_density, gradient)`` with attribute ``dim`` and
        optionally ``parameter_names``.
    config : SamplerConfig, optional
    init : array_like, optional
        Starting point shared by all chains; random inits are used if absent
        or not finite.

    Returns
    -------
    PosteriorDraws
        Draws are identical for a given seed and config whatever the number
        of worker processes.
    """
    config = config or SamplerConfig()
    dim = int(model.dim)
    names = list(getattr(model, "parameter_names", [f"x[{k}]" for k in range(dim)]))
    seeds = np.random.SeedSequence(int(config.seed)).spawn(config.chains)
    jobs = [(model, dim, config, s, init) for s in seeds]
    workers = min(_thread_count(config), config.chains)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    draws = np.stack([r[0] for r in results])
    stats = {k: [r[1][k] for r in results] for k in results[0][1]}
    divergences = np.array([int(d.sum()) for d in stats["divergent"]])
    saturated = np.mean(np.concatenate(stats["tree_depth"]) >= config.max_tree_depth)
    if saturated > 0.10:
        warnings.warn(
            f"{saturated:.0%} of iterations hit the maximum tree depth {config.max_tree_depth}",
            MaxDepthSaturation, stacklevel=2,
        )
    if divergences.sum():
        logger.warning("%d divergent transitions after warmup", divergences.sum())
    return PosteriorDraws(draws=draws, parameter_names=names, divergences=divergences,
                          stats=stats)


class FunctionTarget:
    """Wrap a ``x -> (logp, grad)`` function with a dimension for :func:`sample`."""

    def __init__(self, fn, dim, names=None):
        self.fn = fn
        self.dim = dim
        if names is not None:
            self.parameter_names = list(names)

    def __call__(self, x):
        return self.fn(x)
