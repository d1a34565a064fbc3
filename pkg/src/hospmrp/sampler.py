"""No-U-turn Hamiltonian Monte Carlo with windowed warmup adaptation.

The transition is the multinomial variant of NUTS with a diagonal mass
matrix. During warmup the step size is tuned by dual averaging toward the
target acceptance statistic, and the mass matrix is re-estimated at the end
of each slow adaptation window (75-draw fast buffer, doubling slow windows
starting at 25 draws, 50-draw terminal buffer).

Each chain owns a generator seeded from ``(seed, chain)``, so results do not
depend on how many chains run, in which order, or in how many processes.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ParamDiagnostic, summarize
from .model import Layout, ParameterDraw

logger = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0
DIVERGENCE_WARN_FRACTION = 0.10


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup_iterations: int = 1000
    sampling_iterations: int = 1000
    seed: int = 0
    target_acceptance: float = 0.8
    max_step_depth: int = 10
    init_radius: float = 1.0
    metric: str = "diag"
    workers: int = 1

    def __post_init__(self):
        for name in ("chains", "warmup_iterations", "sampling_iterations", "max_step_depth",
                     "workers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")
        if self.metric not in ("diag", "dense"):
            raise ValueError("metric must be 'diag' or 'dense'")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class PosteriorDraws:
    """Post-warmup draws on the constrained scale.

    ``values`` has shape ``(chains, iterations, len(names))``; draw
    ``(c, i)`` is ``values[c, i]``.
    """

    values: np.ndarray
    names: list[str]
    layout: Layout | None = None
    divergences: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    step_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    accept_stat: np.ndarray | None = None
    tree_depth: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)
    _diagnostics: dict | None = field(default=None, repr=False)

    @property
    def chains(self) -> int:
        return self.values.shape[0]

    @property
    def iterations(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.chains * self.iterations

    def flat(self) -> np.ndarray:
        """All draws stacked chain by chain: ``(chains * iterations, params)``."""
        return self.values.reshape(-1, self.values.shape[-1])

    def column(self, name: str) -> np.ndarray:
        return self.values[..., self.names.index(name)]

    def draw(self, chain: int, iteration: int) -> ParameterDraw:
        if self.layout is None:
            raise ValueError("these draws do not come from the hierarchical model")
        return ParameterDraw.from_vector(self.values[chain, iteration], self.layout)

    def iter_draws(self):
        """Yield ``(chain, iteration, ParameterDraw)``."""
        for c in range(self.chains):
            for i in range(self.iterations):
                yield c, i, self.draw(c, i)

    @property
    def diagnostics(self) -> dict[str, ParamDiagnostic]:
        if self._diagnostics is None:
            self._diagnostics = diagnostics(self)
        return self._diagnostics


def diagnostics(draws: PosteriorDraws) -> dict[str, ParamDiagnostic]:
    if draws.chains < 2:
        raise ValueError(f"diagnostics need at least 2 chains, got {draws.chains}")
    return summarize(draws.values, draws.names)


# ---------------------------------------------------------------------------
# NUTS transition
# ---------------------------------------------------------------------------


def _safe_eval(target, q):
    try:
        lp, g = target.log_density_and_gradient(q)
    except (FloatingPointError, OverflowError, ValueError, ArithmeticError, RuntimeError):
        return -math.inf, None
    if not math.isfinite(lp) or not np.all(np.isfinite(g)):
        return -math.inf, None
    return lp, g


class _Tree:
    __slots__ = ("q_minus", "p_minus", "g_minus", "q_plus", "p_plus", "g_plus",
                 "q_prop", "lp_prop", "g_prop", "log_w", "rho", "n_steps", "sum_accept",
                 "divergent", "lp_minus", "lp_plus")


class _Metric:
    """Inverse mass matrix, diagonal (1-d array) or dense (2-d array)."""

    def __init__(self, inv):
        inv = np.asarray(inv, dtype=np.float64)
        self.inv = inv
        self.dense = inv.ndim == 2
        if self.dense:
            # p ~ N(0, inv^-1): p = L^-T xi with inv = L L^T
            self._chol = np.linalg.cholesky(inv)
        else:
            self._sd = np.sqrt(inv)

    def velocity(self, p):
        return self.inv @ p if self.dense else self.inv * p

    def momentum(self, rng, dim):
        xi = rng.standard_normal(dim)
        if self.dense:
            return np.linalg.solve(self._chol.T, xi)
        return xi / self._sd

    @classmethod
    def estimate(cls, samples, dense):
        n = samples.shape[0]
        w = n / (n + 5.0)
        shrink = 1e-3 * (5.0 / (n + 5.0))
        if dense:
            cov = np.cov(samples, rowvar=False)
            return cls(w * cov + shrink * np.eye(cov.shape[0]))
        return cls(w * samples.var(axis=0, ddof=1) + shrink)


class _NUTS:
    def __init__(self, target, metric, max_depth, rng):
        self.target = target
        self.metric = metric
        self.max_depth = max_depth
        self.rng = rng

    def _leapfrog(self, q, p, g, eps):
        p = p + 0.5 * eps * g
        q = q + eps * self.metric.velocity(p)
        lp, g_new = _safe_eval(self.target, q)
        if g_new is None:
            return q, p, None, -math.inf
        p = p + 0.5 * eps * g_new
        return q, p, g_new, lp

    def _kinetic(self, p):
        return 0.5 * float(p @ self.metric.velocity(p))

    def _no_uturn(self, rho, p_minus, p_plus):
        v = self.metric.velocity
        return float(v(p_minus) @ rho) > 0 and float(v(p_plus) @ rho) > 0

    def _build(self, q, p, g, lp, direction, depth, eps, h0):
        if depth == 0:
            q1, p1, g1, lp1 = self._leapfrog(q, p, g, direction * eps)
            t = _Tree()
            t.n_steps = 1
            if g1 is None:
                h = math.inf
            else:
                h = -lp1 + self._kinetic(p1)
            if math.isnan(h):
                h = math.inf
            t.divergent = (h - h0) > MAX_DELTA_H
            t.log_w = h0 - h
            t.sum_accept = math.exp(min(0.0, h0 - h)) if math.isfinite(h) else 0.0
            t.q_minus = t.q_plus = t.q_prop = q1
            t.p_minus = t.p_plus = p1
            t.g_minus = t.g_plus = t.g_prop = g1
            t.lp_minus = t.lp_plus = t.lp_prop = lp1
            t.rho = p1.copy()
            return t, not t.divergent

        left, ok = self._build(q, p, g, lp, direction, depth - 1, eps, h0)
        if not ok:
            return left, False
        if direction > 0:
            right, ok = self._build(left.q_plus, left.p_plus, left.g_plus, left.lp_plus,
                                    direction, depth - 1, eps, h0)
        else:
            right, ok = self._build(left.q_minus, left.p_minus, left.g_minus, left.lp_minus,
                                    direction, depth - 1, eps, h0)
        left.n_steps += right.n_steps
        left.sum_accept += right.sum_accept
        if not ok:
            left.divergent = right.divergent
            return left, False

        # "left" is the first-built half, "right" the continuation in `direction`
        log_w = np.logaddexp(left.log_w, right.log_w)
        if math.log(self.rng.uniform()) < right.log_w - log_w:
            left.q_prop, left.lp_prop, left.g_prop = right.q_prop, right.lp_prop, right.g_prop
        left.log_w = log_w

        if direction > 0:
            first, second = left, right
        else:
            first, second = right, left
        # first: lower end of the combined subtree; second: upper end
        rho = first.rho + second.rho
        ok = self._no_uturn(rho, first.p_minus, second.p_plus)
        # extra checks across the merge point
        ok = ok and self._no_uturn(first.rho + second.p_minus, first.p_minus, second.p_minus)
        ok = ok and self._no_uturn(first.p_plus + second.rho, first.p_plus, second.p_plus)
        merged = left
        merged.q_minus, merged.p_minus, merged.g_minus, merged.lp_minus = (
            first.q_minus, first.p_minus, first.g_minus, first.lp_minus)
        merged.q_plus, merged.p_plus, merged.g_plus, merged.lp_plus = (
            second.q_plus, second.p_plus, second.g_plus, second.lp_plus)
        merged.rho = rho
        return merged, ok

    def transition(self, q, lp, g, eps):
        rng = self.rng
        p0 = self.metric.momentum(rng, q.size)
        h0 = -lp + self._kinetic(p0)

        q_minus = q_plus = q
        p_minus = p_plus = p0
        g_minus = g_plus = g
        lp_minus = lp_plus = lp
        q_prop, lp_prop, g_prop = q, lp, g
        rho = p0.copy()
        log_w = 0.0
        n_steps = 0
        sum_accept = 0.0
        depth = 0
        divergent = False

        while depth < self.max_depth:
            direction = 1 if rng.uniform() < 0.5 else -1
            if direction > 0:
                sub, ok = self._build(q_plus, p_plus, g_plus, lp_plus, 1, depth, eps, h0)
            else:
                sub, ok = self._build(q_minus, p_minus, g_minus, lp_minus, -1, depth, eps, h0)
            n_steps += sub.n_steps
            sum_accept += sub.sum_accept
            depth += 1
            if not ok:
                divergent = sub.divergent
                break

            # biased progressive sampling favours the new subtree
            if sub.log_w > log_w or math.log(rng.uniform()) < sub.log_w - log_w:
                q_prop, lp_prop, g_prop = sub.q_prop, sub.lp_prop, sub.g_prop
            log_w = np.logaddexp(log_w, sub.log_w)

            if direction > 0:
                old_rho, old_pm, old_pp = rho, p_minus, p_plus
                q_plus, p_plus, g_plus, lp_plus = sub.q_plus, sub.p_plus, sub.g_plus, sub.lp_plus
                rho = old_rho + sub.rho
                ok = self._no_uturn(rho, p_minus, p_plus)
                ok = ok and self._no_uturn(old_rho + sub.p_minus, old_pm, sub.p_minus)
                ok = ok and self._no_uturn(old_pp + sub.rho, old_pp, sub.p_plus)
            else:
                old_rho, old_pm, old_pp = rho, p_minus, p_plus
                q_minus, p_minus, g_minus, lp_minus = (
                    sub.q_minus, sub.p_minus, sub.g_minus, sub.lp_minus)
                rho = sub.rho + old_rho
                ok = self._no_uturn(rho, p_minus, p_plus)
                ok = ok and self._no_uturn(sub.rho + old_pm, sub.p_minus, old_pm)
                ok = ok and self._no_uturn(sub.p_plus + old_rho, sub.p_plus, old_pp)
            if not ok:
                break

        accept = sum_accept / max(n_steps, 1)
        return q_prop, lp_prop, g_prop, accept, depth, divergent


# ---------------------------------------------------------------------------
# Adaptation
# ---------------------------------------------------------------------------


class _DualAveraging:
    def __init__(self, eps, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.count = 0

    def update(self, accept) -> float:
        self.count += 1
        m = self.count
        w = 1.0 / (m + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def _windows(n_warmup: int) -> tuple[int, int, list[int]]:
    """Fast/slow/fast warmup schedule: returns (init buffer, term buffer, slow window ends)."""
    init, term, base = 75, 50, 25
    if init + term + base > n_warmup:
        init = int(0.15 * n_warmup)
        term = int(0.1 * n_warmup)
        base = n_warmup - init - term
    ends = []
    start = init
    size = base
    slow_end = n_warmup - term
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start = end
        size *= 2
    return init, term, ends


def _find_step_size(target, q, lp, g, metric, rng, eps=1.0):
    p = metric.momentum(rng, q.size)
    h0 = -lp + 0.5 * float(p @ metric.velocity(p))

    def delta_h(e):
        p1 = p + 0.5 * e * g
        q1 = q + e * metric.velocity(p1)
        lp1, g1 = _safe_eval(target, q1)
        if g1 is None:
            return -math.inf
        p1 = p1 + 0.5 * e * g1
        return h0 - (-lp1 + 0.5 * float(p1 @ metric.velocity(p1)))

    direction = 1 if delta_h(eps) > math.log(0.8) else -1
    for _ in range(100):
        new = eps * (2.0 ** direction)
        dh = delta_h(new)
        if direction == 1 and not dh > math.log(0.8):
            break
        if direction == -1 and dh > math.log(0.8):
            eps = new
            break
        eps = new
    return eps


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chain),)))


def _initial_point(target, init, rng, radius):
    if init is not None:
        q = np.asarray(init, dtype=np.float64).copy()
        lp, g = _safe_eval(target, q)
        if g is None:
            raise InitializationError(
                "log posterior is not finite at the supplied initial values; "
                "re-initialize from a different starting point"
            )
        return q, lp, g
    for _ in range(100):
        q = rng.uniform(-radius, radius, target.dim)
        lp, g = _safe_eval(target, q)
        if g is not None:
            return q, lp, g
    raise InitializationError(
        "could not find a finite log posterior from random starts; "
        "re-initialize with explicit initial values"
    )


def run_chain(target, config: SamplerConfig, chain: int, init=None):
    """Run one chain; returns unconstrained draws and per-iteration statistics."""
    rng = chain_rng(config.seed, chain)
    q, lp, g = _initial_point(target, init, rng, config.init_radius)
    dim = target.dim
    metric = _Metric(np.ones(dim))
    n_warm = config.warmup_iterations
    n_draw = config.sampling_iterations

    eps = _find_step_size(target, q, lp, g, metric, rng)
    adapt = _DualAveraging(eps, config.target_acceptance)
    init_buf, _, window_ends = _windows(n_warm)
    window_start = init_buf
    window_draws = []

    nuts = _NUTS(target, metric, config.max_step_depth, rng)
    for it in range(n_warm):
        q, lp, g, accept, _, _ = nuts.transition(q, lp, g, eps)
        eps = adapt.update(accept)
        if window_ends and it >= window_start and it < window_ends[-1]:
            window_draws.append(q)
        if window_ends and it + 1 in window_ends:
            samples = np.asarray(window_draws)
            if samples.shape[0] > 1:
                metric = _Metric.estimate(samples, config.metric == "dense")
                nuts.metric = metric
            window_draws = []
            window_start = it + 1
            eps = _find_step_size(target, q, lp, g, metric, rng, eps)
            adapt = _DualAveraging(eps, config.target_acceptance)
    eps = adapt.final if n_warm > 0 else eps

    draws = np.empty((n_draw, dim))
    accepts = np.empty(n_draw)
    depths = np.empty(n_draw, dtype=np.int64)
    divergent = np.zeros(n_draw, dtype=bool)
    for it in range(n_draw):
        q, lp, g, accept, depth, div = nuts.transition(q, lp, g, eps)
        draws[it] = q
        accepts[it] = accept
        depths[it] = depth
        divergent[it] = div
    return draws, accepts, depths, divergent, eps


def _run_chain_args(args):
    return run_chain(*args)


def sample(target, config: SamplerConfig | None = None, init=None) -> PosteriorDraws:
    """Draw posterior samples from ``target``.

    ``target`` needs ``dim`` and ``log_density_and_gradient(theta)``. When it
    also provides ``constrain`` / ``layout`` (as :class:`HierarchicalModel`
    does) draws are stored on the constrained scale. ``init`` may be an
    unconstrained vector or a :class:`ParameterDraw`; it is shared by all
    chains.
    """
    config = config or SamplerConfig()
    if isinstance(init, ParameterDraw):
        init = target.unconstrain(init)
    jobs = [(target, config, c, init) for c in range(config.chains)]
    if config.workers > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_chain_args, jobs))
    else:
        results = [run_chain(*job) for job in jobs]

    raw = np.stack([r[0] for r in results])
    if hasattr(target, "constrain"):
        values = target.constrain(raw.reshape(-1, raw.shape[-1])).reshape(
            raw.shape[0], raw.shape[1], -1
        )
        layout = getattr(target, "layout", None)
        names = list(layout.names) if layout is not None else [f"x[{i}]" for i in range(values.shape[-1])]
    else:
        values = raw
        layout = None
        names = list(getattr(target, "param_names", [f"x[{i}]" for i in range(raw.shape[-1])]))

    divergences = np.array([int(r[3].sum()) for r in results])
    out = PosteriorDraws(
        values=values,
        names=names,
        layout=layout,
        divergences=divergences,
        step_sizes=np.array([r[4] for r in results]),
        accept_stat=np.stack([r[1] for r in results]),
        tree_depth=np.stack([r[2] for r in results]),
    )
    total = divergences.sum()
    if total > DIVERGENCE_WARN_FRACTION * len(out):
        msg = (
            f"{total} of {len(out)} post-warmup transitions diverged; "
            "posterior estimates may be biased"
        )
        out.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    elif total:
        logger.info("%d divergent transitions after warmup", total)
    return out
