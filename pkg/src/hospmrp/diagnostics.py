"""Split-chain R-hat and effective sample size."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamDiagnostic:
    rhat: float
    ess: float
    degenerate: bool = False

    @property
    def mcse_scale(self) -> float:
        """Multiply a posterior sd by this to get the Monte Carlo standard error of the mean."""
        return 1.0 / np.sqrt(self.ess) if self.ess > 0 else np.inf


def _split(chains: np.ndarray) -> np.ndarray:
    chains = np.asarray(chains, dtype=np.float64)
    if chains.ndim != 2:
        raise ValueError("expected a (chains, draws) array")
    m, n = chains.shape
    half = n // 2
    return np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)


def _check(chains: np.ndarray):
    if chains.ndim != 2:
        raise ValueError("expected a (chains, draws) array")
    if chains.shape[0] < 2:
        raise ValueError(f"R-hat needs at least 2 chains, got {chains.shape[0]}")
    if chains.shape[1] < 4:
        raise ValueError("too few draws per chain to split")


def _is_constant(chains: np.ndarray) -> bool:
    return bool(np.ptp(chains) <= 1e-14 * max(1.0, float(np.abs(chains).max())))


def split_rhat(chains) -> float:
    """Potential scale reduction factor on split chains; ``nan`` for a constant input."""
    chains = np.asarray(chains, dtype=np.float64)
    _check(chains)
    if _is_constant(chains):
        return float("nan")
    s = _split(chains)
    n = s.shape[1]
    means = s.mean(axis=1)
    within = s.var(axis=1, ddof=1).mean()
    between = n * means.var(ddof=1)
    if within <= 0:
        return float("inf")
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    centered = x - x.mean()
    f = np.fft.rfft(centered, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n] / n
    return acov


def effective_sample_size(chains) -> float:
    """ESS from split chains using Geyer's initial monotone sequence."""
    chains = np.asarray(chains, dtype=np.float64)
    _check(chains)
    if _is_constant(chains):
        return float("nan")
    s = _split(chains)
    m, n = s.shape
    acov = np.array([_autocovariance(c) for c in s])
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += s.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float("nan")
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    # sum consecutive pairs while positive, enforcing monotone decrease
    pair_sums = []
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair_sums.append(pair)
        t += 2
    pairs = np.minimum.accumulate(np.array(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def summarize(values: np.ndarray, names) -> dict[str, ParamDiagnostic]:
    """Diagnostics for every column of a ``(chains, draws, params)`` array."""
    values = np.asarray(values, dtype=np.float64)
    _check(values[..., 0])
    out = {}
    for k, name in enumerate(names):
        col = values[..., k]
        if _is_constant(col):
            out[name] = ParamDiagnostic(float("nan"), float("nan"), degenerate=True)
        else:
            out[name] = ParamDiagnostic(split_rhat(col), effective_sample_size(col))
    return out
