"""Convergence diagnostics: rank-normalised split R-hat, bulk ESS, quantile MCSE."""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy import stats

from .exceptions import InsufficientDraws

RHAT_LIMIT = 1.01
ESS_LIMIT = 100.0


def _check(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected an array of shape (chains, draws)")
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise InsufficientDraws(
            f"need at least 2 chains and 4 draws per chain, got {x.shape[0]} x {x.shape[1]}"
        )
    return x


def split_chains(x):
    """Halve every chain, dropping the middle draw of odd-length chains."""
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, -n:]], axis=0)


def rank_normalize(x):
    """Normal scores of the pooled ranks (average ranks for ties)."""
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return stats.norm.ppf((r - 0.375) / (x.size + 0.25))


def _rhat(x):
    n = x.shape[1]
    between = n * np.var(x.mean(axis=1), ddof=1)
    within = np.mean(np.var(x, axis=1, ddof=1))
    if within == 0:
        return np.nan
    return float(np.sqrt((between / within + n - 1) / n))


def _autocov(x):
    n = x.shape[-1]
    m = 2 ** int(np.ceil(np.log2(2 * n)))
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, n=m, axis=-1)
    return np.fft.irfft(f * np.conj(f), n=m, axis=-1)[..., :n] / n


def _ess(x):
    m, n = x.shape
    if np.ptp(x) == 0:
        return np.nan
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = np.mean(acov[:, 0]) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += np.var(chain_mean, ddof=1)
    rho = np.zeros(n)
    rho_even = 1.0
    rho[0] = 1.0
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * np.sum(rho[: max_t + 1]) + rho[max_t + 1]
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def rhat(x):
    """Rank-normalised split R-hat: the larger of the bulk and folded values.

    Parameters
    ----------
    x : array_like, shape (chains, draws)
    """
    x = _check(x)
    if np.ptp(x) == 0:
        return np.nan
    s = split_chains(x)
    bulk = _rhat(rank_normalize(s))
    folded = _rhat(rank_normalize(np.abs(s - np.median(s))))
    return float(max(bulk, folded))


def ess_bulk(x):
    """Bulk effective sample size from rank-normalised split chains."""
    x = _check(x)
    return _ess(rank_normalize(split_chains(x)))


def ess_basic(x):
    """Effective sample size of the raw split chains."""
    x = _check(x)
    return _ess(split_chains(x))


def mcse_quantile(x, prob):
    """Monte Carlo standard error of the ``prob`` quantile.

    The ESS of the indicator ``x <= q`` sets the spread of a Beta distribution
    whose one-sigma quantiles are mapped back through the empirical quantiles.
    """
    x = _check(x)
    q = np.quantile(x, prob)
    ess = _ess(split_chains((x <= q).astype(float)))
    if not np.isfinite(ess):
        return 0.0
    a = stats.beta.ppf([0.1586553, 0.8413447], ess * prob + 1, ess * (1 - prob) + 1)
    srt = np.sort(x.ravel())
    size = srt.size
    pos = a * size - 1
    lo = srt[int(np.floor(max(pos[0], 0)))]
    hi = srt[int(np.ceil(min(pos[1], size - 1)))]
    return float((hi - lo) / 2.0)


def mcse_mean(x):
    x = _check(x)
    ess = _ess(split_chains(x))
    if not np.isfinite(ess):
        return 0.0
    return float(np.std(x, ddof=1) / np.sqrt(ess))


def summary_table(values, names):
    """Per-parameter ``rhat`` and ``ess`` for ``values`` of shape (chains, draws, P)."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ValueError("expected an array of shape (chains, draws, parameters)")
    _check(values[:, :, 0] if values.shape[-1] else values.sum(axis=-1))
    rows = []
    for k, name in enumerate(names):
        col = values[:, :, k]
        rows.append((name, rhat(col), ess_bulk(col)))
    return pd.DataFrame(rows, columns=["parameter", "rhat", "ess"])


def passes(table, rhat_limit=RHAT_LIMIT, ess_limit=ESS_LIMIT):
    """True when every non-constant parameter has R-hat and ESS within limits."""
    t = table.dropna(subset=["rhat", "ess"])
    return bool(len(t) and (t["rhat"] < rhat_limit).all() and (t["ess"] > ess_limit).all())


def diagnose(draws, model=None):
    """Diagnostics table for a :class:`~matcod.sampler.PosteriorDraws` or an array.

    With ``model`` given, diagnostics are computed on its constrained
    parameters (``model.constrain_draws``) rather than the unconstrained ones.
    Parameters that are constant across all draws get ``NaN`` and are ignored
    by :func:`passes`.
    """
    if hasattr(draws, "draws"):
        arr, names = draws.draws, draws.parameter_names
    else:
        arr = np.asarray(draws, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        names = [f"x[{k}]" for k in range(arr.shape[-1])]
    _check(arr[..., 0])
    if model is not None:
        m, n, d = arr.shape
        arr = model.constrain_draws(arr.reshape(-1, d)).reshape(m, n, -1)
        names = model.constrained_names
    table = summary_table(arr, names)
    if hasattr(draws, "draws"):
        draws.diagnostics = table
    return table
