"""Effective sample size and posterior summaries.

ESS uses Geyer's initial positive sequence: biased lag autocovariances,
pair sums ``Gamma_m = rho_{2m} + rho_{2m+1}`` accumulated while positive,
``tau = -1 + 2 sum Gamma_m`` and ``ESS = N / tau`` clamped to ``(0, N]``.
"""

from dataclasses import dataclass, field

import numpy as np

from tmhmc.errors import DegenerateSeries


def _autocov(x, lag):
    n = x.shape[0]
    return float(np.dot(x[: n - lag], x[lag:])) / n


def ess_geyer(series):
    x = np.asarray(series, dtype=float).ravel()
    N = x.shape[0]
    if N < 10:
        raise ValueError("ESS needs at least 10 draws")
    center = x.mean()
    x = x - center
    c0 = _autocov(x, 0)
    if not c0 > 1e-28 * max(1.0, center * center):
        raise DegenerateSeries("series is constant")
    max_lag = N // 2
    total = 0.0
    m = 0
    while 2 * m + 1 <= max_lag:
        pair = (_autocov(x, 2 * m) + _autocov(x, 2 * m + 1)) / c0
        if pair <= 0:
            break
        total += pair
        m += 1
    tau = -1.0 + 2.0 * total
    if not tau > 0:
        return float(N)
    return float(min(N / tau, N))


def mcse(series):
    """Batch-means Monte Carlo standard error with floor(sqrt(N)) batches."""
    x = np.asarray(series, dtype=float).ravel()
    N = x.shape[0]
    nb = int(np.floor(np.sqrt(N)))
    if nb < 2:
        raise ValueError("need at least 4 draws for batch means")
    size = N // nb
    means = x[: nb * size].reshape(nb, size).mean(axis=1)
    return float(np.sqrt(size * means.var(ddof=1) / N))


@dataclass
class QuantitySummary:
    name: str
    mean: float
    std: float
    ess: float
    ess_per_s: float
    degenerate: bool = False


@dataclass
class ChainSummary:
    quantities: list
    wall_time: float
    extras: dict = field(default_factory=dict)

    def get(self, name):
        for q in self.quantities:
            if q.name == name:
                return q
        raise KeyError(name)

    @property
    def names(self):
        return [q.name for q in self.quantities]

    @property
    def min_ess(self):
        return min(q.ess for q in self.quantities)


def summarize_columns(columns, wall_time):
    """``columns`` maps quantity name -> 1-d draws array (burn-in removed)."""
    out = []
    for name, values in columns.items():
        v = np.asarray(values, dtype=float)
        mean = float(np.mean(v))
        std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
        try:
            ess = ess_geyer(v)
            degenerate = False
        except DegenerateSeries:
            ess, degenerate = float("nan"), True
        eps = ess / wall_time if wall_time > 0 and not degenerate else float("nan")
        out.append(QuantitySummary(name, mean, std, ess, eps, degenerate))
    return ChainSummary(out, float(wall_time))


def chain_columns(chain):
    """Constrained parameters plus first latent and u components per series."""
    cols = {n: chain.params[:, i] for i, n in enumerate(chain.param_names)}
    S = chain.x_first.shape[1]
    for s in range(S):
        tag = "1" if S == 1 else f"{s + 1}_1"
        cols[f"x_{tag}"] = chain.x_first[:, s]
        cols[f"u_{tag}"] = chain.u_first[:, s]
    return cols


def summarize(chain, wall_time=None):
    wall = chain.wall_time if wall_time is None else wall_time
    summ = summarize_columns(chain_columns(chain), wall)
    summ.extras["accept_rate"] = chain.accept_rate
    return summ


U_SD_BAND = (0.8, 1.2)


def u_sd_check(chain, band=U_SD_BAND):
    """Range of the posterior std of every u component, and whether it lies in ``band``.

    Under a map that decouples theta from u well, each u stays close to
    standard normal, so its posterior std sits near 1.
    """
    sd = np.asarray(chain.u_sd, dtype=float)
    lo, hi = float(sd.min()), float(sd.max())
    return band[0] <= lo and hi <= band[1], lo, hi


def aggregate(summaries):
    """Min and mean over replicas of each quantity's mean, std, ESS and ESS/s."""
    names = summaries[0].names
    rows = {}
    for how, fn in (("min", np.min), ("mean", np.mean)):
        block = {}
        for name in names:
            qs = [s.get(name) for s in summaries]
            block[name] = {
                k: float(fn([getattr(q, k) for q in qs]))
                for k in ("mean", "std", "ess", "ess_per_s")
            }
        rows[how] = block
    return rows
