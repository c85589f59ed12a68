"""No-U-Turn sampling with windowed warmup adaptation.

Targets are callables ``f(q) -> (log_density, gradient)``. The kernel is the
multinomial NUTS variant: trajectories are extended by doubling in a random
direction, states are weighted by ``exp(-H)``, the proposal is drawn with
biased progressive sampling at the top level and uniform progressive
sampling inside subtrees, and expansion stops at a U-turn (checked on the
whole trajectory and across the two halves of every merge), at a
divergence (energy error above ``DIVERGENCE_THRESHOLD``) or at the maximum
depth.

Warmup uses dual averaging of the step size and a diagonal metric estimated
from regularised sample variances over doubling windows (75-draw initial
buffer, 25-draw first window, 50-draw terminal buffer).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .errors import ConfigError, SamplerError

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0
INIT_BUFFER = 75
TERM_BUFFER = 50
BASE_WINDOW = 25


@dataclass(frozen=True)
class ChainConfig:
    """Sampling schedule.

    ``total_post_warmup`` counts iterations across all chains before
    thinning, so each chain runs ``total_post_warmup / chains`` iterations
    after warmup and keeps every ``thin``-th one.
    """

    chains: int = 4
    warmup: int = 1000
    total_post_warmup: int = 4000
    thin: int = 1
    seed: int = 0
    target_accept: float = 0.8
    max_tree_depth: int = 10
    step_size: float | None = None
    adapt: bool = True
    adapt_metric: bool | None = None
    init_attempts: int = 100

    def __post_init__(self):
        for name in ("chains", "total_post_warmup", "thin", "max_tree_depth"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer", value=getattr(self, name))
        if self.warmup < 0 or (self.adapt and self.warmup < 1):
            raise ConfigError("warmup must be a positive integer", warmup=self.warmup)
        if self.total_post_warmup % self.chains:
            raise ConfigError(
                "total_post_warmup must be divisible by chains",
                total_post_warmup=self.total_post_warmup, chains=self.chains,
            )
        if self.iterations_per_chain % self.thin:
            raise ConfigError(
                "thin must divide the per-chain post-warmup count",
                per_chain=self.iterations_per_chain, thin=self.thin,
            )
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)", target_accept=self.target_accept)
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer", seed=self.seed)
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError("step_size must be positive", step_size=self.step_size)
        if self.metric_adaptation:
            window_schedule(self.warmup)

    @property
    def iterations_per_chain(self) -> int:
        return self.total_post_warmup // self.chains

    @property
    def retained_per_chain(self) -> int:
        return self.iterations_per_chain // self.thin

    @property
    def metric_adaptation(self) -> bool:
        if not self.adapt:
            return False
        if self.adapt_metric is None:
            return self.warmup >= INIT_BUFFER + BASE_WINDOW + TERM_BUFFER
        return bool(self.adapt_metric)


@dataclass
class PosteriorDraws:
    """Retained draws, shape ``(chains, iterations, parameters)``."""

    names: list
    draws: np.ndarray
    divergence_count: np.ndarray
    accept_stat: np.ndarray = field(repr=False, default=None)
    tree_depth: np.ndarray = field(repr=False, default=None)
    step_size: np.ndarray = field(repr=False, default=None)
    inv_metric: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.names = list(self.names)
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise SamplerError("draws must be (chains, iterations, parameters)",
                               shape=self.draws.shape, names=len(self.names))
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iterations(self) -> int:
        return self.draws.shape[1]

    def __contains__(self, name) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def chains_of(self, name: str) -> np.ndarray:
        """``(chains, iterations)`` matrix of one parameter."""
        return self.draws[:, :, self.index(name)]

    def pooled(self, name: str) -> np.ndarray:
        return self.chains_of(name).reshape(-1)


def leapfrog(position, momentum, step, gradient_fn, inv_metric=None):
    """One velocity-Verlet step for the potential ``-log density``.

    ``gradient_fn`` returns the gradient of the log density. Returns the new
    ``(position, momentum)``; non-finite results are left for the caller to
    flag as divergent.
    """
    q = np.asarray(position, dtype=float)
    p = np.asarray(momentum, dtype=float)
    if q.shape != p.shape:
        raise ValueError("position and momentum must have the same shape")
    if not step > 0:
        raise ValueError("step must be positive")
    inv = np.ones_like(q) if inv_metric is None else np.asarray(inv_metric, dtype=float)
    with np.errstate(all="ignore"):
        p = p + 0.5 * step * np.asarray(gradient_fn(q), dtype=float)
        q = q + step * inv * p
        p = p + 0.5 * step * np.asarray(gradient_fn(q), dtype=float)
    return q, p


class _Point:
    __slots__ = ("q", "p", "g", "lp", "ps")

    def __init__(self, q, p, g, lp, ps):
        self.q, self.p, self.g, self.lp, self.ps = q, p, g, lp, ps


class _Subtree:
    __slots__ = ("inner", "outer", "rho", "prop", "log_w", "valid", "divergent",
                 "sum_accept", "n_steps")


@dataclass
class Transition:
    position: np.ndarray
    log_density: float
    gradient: np.ndarray
    accept_stat: float
    depth: int
    n_leapfrog: int
    divergent: bool


class _Kernel:
    """One NUTS transition for a fixed step size and diagonal metric."""

    def __init__(self, target, step, inv_metric, rng, max_depth):
        self.target = target
        self.step = float(step)
        self.inv = np.asarray(inv_metric, dtype=float)
        self.sqrt_mass = 1.0 / np.sqrt(self.inv)
        self.rng = rng
        self.max_depth = int(max_depth)

    def _leaf(self, start: _Point, direction: int, h0: float) -> _Subtree:
        eps = direction * self.step
        inv = self.inv
        with np.errstate(all="ignore"):
            p = start.p + (0.5 * eps) * start.g
            q = start.q + eps * (inv * p)
            lp, g = self.target(q)
            p = p + (0.5 * eps) * g
            ps = inv * p
            h = -lp + 0.5 * float(p @ ps)
        t = _Subtree()
        t.n_steps = 1
        if not math.isfinite(h):
            h = math.inf
        pt = _Point(q, p, g, lp, ps)
        t.inner = t.outer = t.prop = pt
        t.rho = p
        dh = h - h0
        t.divergent = dh > DIVERGENCE_THRESHOLD
        t.valid = not t.divergent
        t.log_w = -dh
        t.sum_accept = 1.0 if dh <= 0 else math.exp(-dh)
        return t

    def _build(self, start: _Point, direction: int, depth: int, h0: float) -> _Subtree:
        if depth == 0:
            return self._leaf(start, direction, h0)
        a = self._build(start, direction, depth - 1, h0)
        if not a.valid:
            return a
        b = self._build(a.outer, direction, depth - 1, h0)
        a.n_steps += b.n_steps
        a.sum_accept += b.sum_accept
        if not b.valid:
            a.valid = False
            a.divergent = b.divergent
            return a
        log_w = _logaddexp(a.log_w, b.log_w)
        if b.log_w > log_w or self.rng.random() < math.exp(b.log_w - log_w):
            a.prop = b.prop
        a.log_w = log_w
        a.valid = _no_uturn(a, b)
        a.rho = a.rho + b.rho
        a.outer = b.outer
        return a

    def transition(self, q, lp, g) -> Transition:
        jit_fn = getattr(self.target, "jit_fn", None)
        if jit_fn is not None:
            out = _engine.transition(jit_fn, self.target.jit_data, q, lp, g, self.step,
                                     self.inv, self.rng, self.max_depth)
            return Transition(*out)
        return self.python_transition(q, lp, g)

    def python_transition(self, q, lp, g) -> Transition:
        rng = self.rng
        p = rng.standard_normal(q.size) * self.sqrt_mass
        ps = self.inv * p
        h0 = -lp + 0.5 * float(p @ ps)
        origin = _Point(q, p, g, lp, ps)
        traj = _Subtree()
        traj.inner = traj.outer = traj.prop = origin  # inner = left, outer = right
        traj.rho = p
        traj.log_w = 0.0
        depth = n_steps = 0
        sum_accept = 0.0
        divergent = False
        while depth < self.max_depth:
            direction = 1 if rng.random() < 0.5 else -1
            edge = traj.outer if direction == 1 else traj.inner
            sub = self._build(edge, direction, depth, h0)
            depth += 1
            n_steps += sub.n_steps
            sum_accept += sub.sum_accept
            if not sub.valid:
                divergent = sub.divergent
                break
            if sub.log_w > traj.log_w or rng.random() < math.exp(sub.log_w - traj.log_w):
                traj.prop = sub.prop
            traj.log_w = _logaddexp(traj.log_w, sub.log_w)
            # orient the old trajectory so its outer edge faces the new subtree
            old = _Subtree()
            old.rho = traj.rho
            if direction == 1:
                old.inner, old.outer = traj.inner, traj.outer
            else:
                old.inner, old.outer = traj.outer, traj.inner
            keep_going = _no_uturn(old, sub)
            traj.rho = traj.rho + sub.rho
            if direction == 1:
                traj.outer = sub.outer
            else:
                traj.inner = sub.outer
            if not keep_going:
                break
        prop = traj.prop
        return Transition(prop.q, prop.lp, prop.g, sum_accept / max(n_steps, 1), depth,
                          n_steps, divergent)


def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def _criterion(ps_a, ps_b, rho) -> bool:
    return float(ps_a @ rho) > 0.0 and float(ps_b @ rho) > 0.0


def _no_uturn(a: _Subtree, b: _Subtree) -> bool:
    """U-turn test for ``b`` built outward from ``a``'s outer edge."""
    rho = a.rho + b.rho
    if not _criterion(a.inner.ps, b.outer.ps, rho):
        return False
    if not _criterion(a.inner.ps, b.inner.ps, a.rho + b.inner.p):
        return False
    return _criterion(a.outer.ps, b.outer.ps, b.rho + a.outer.p)


class CompiledTarget:
    """Wraps a numba function ``fn(q, data) -> (log_density, gradient)``.

    Targets exposing ``jit_fn``/``jit_data`` run the compiled transition.
    """

    def __init__(self, fn, data=()):
        self.jit_fn = fn
        self.jit_data = data

    def __call__(self, q):
        return self.jit_fn(np.asarray(q, dtype=float), self.jit_data)


def nuts_transition(position, step, inv_metric, rng, gradient_fn, max_tree_depth=10,
                    log_density=None, gradient=None) -> Transition:
    """Single NUTS transition from ``position``.

    ``gradient_fn`` maps a position to ``(log_density, gradient)``.
    ``inv_metric`` is the diagonal of the inverse mass matrix (the posterior
    variance scale).
    """
    q = np.asarray(position, dtype=float)
    if log_density is None or gradient is None:
        log_density, gradient = gradient_fn(q)
    kernel = _Kernel(gradient_fn, step, inv_metric, rng, max_tree_depth)
    return kernel.transition(q, log_density, gradient)


def find_reasonable_step(target, q, lp, g, inv_metric, rng, step=1.0) -> float:
    """Double or halve ``step`` until one leapfrog step crosses acceptance 0.8."""
    inv = np.asarray(inv_metric, dtype=float)
    sqrt_mass = 1.0 / np.sqrt(inv)
    log_target = math.log(0.8)

    def delta_h(eps):
        p = rng.standard_normal(q.size) * sqrt_mass
        h0 = -lp + 0.5 * float(p @ (inv * p))
        with np.errstate(all="ignore"):
            p1 = p + 0.5 * eps * g
            q1 = q + eps * inv * p1
            lp1, g1 = target(q1)
            p1 = p1 + 0.5 * eps * g1
            h = -lp1 + 0.5 * float(p1 @ (inv * p1))
        return h0 - h if math.isfinite(h) else -math.inf

    d = delta_h(step)
    direction = 1 if d > log_target else -1
    for _ in range(200):
        d = delta_h(step)
        if direction == 1 and not d > log_target:
            break
        if direction == -1 and not d < log_target:
            break
        step = step * 2.0 if direction == 1 else step * 0.5
        if step > 1e7:
            raise SamplerError("posterior is improper; step size diverged")
        if step < 1e-300:
            raise SamplerError("no acceptable step size; density is not finite near the start")
    return step


class DualAveraging:
    """Step-size adaptation (gamma=0.05, t0=10, kappa=0.75)."""

    def __init__(self, step: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step)

    def restart(self, step: float) -> None:
        self.mu = math.log(10.0 * step)
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.counter = 0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    @property
    def final_step(self) -> float:
        return math.exp(self.x_bar)


def window_schedule(warmup: int, init_buffer=INIT_BUFFER, term_buffer=TERM_BUFFER,
                    base_window=BASE_WINDOW) -> list[tuple[int, int]]:
    """Metric-estimation windows as ``[start, end)`` warmup iteration ranges."""
    if warmup < init_buffer + term_buffer + base_window:
        raise ConfigError(
            "warmup too short for metric adaptation",
            warmup=warmup, required=init_buffer + term_buffer + base_window,
        )
    end_slow = warmup - term_buffer
    windows = []
    start, size = init_buffer, base_window
    while start < end_slow:
        stop = start + size
        # absorb a trailing window that would not fit at double size
        if stop + 2 * size > end_slow:
            stop = end_slow
        windows.append((start, stop))
        start, size = stop, size * 2
    return windows


def regularized_variance(samples: np.ndarray) -> np.ndarray:
    """Sample variances shrunk toward 1e-3 by ``5 / (n + 5)``."""
    n = samples.shape[0]
    var = samples.var(axis=0, ddof=1) if n > 1 else np.ones(samples.shape[1])
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


@dataclass
class ChainResult:
    draws: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    divergent: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    warmup_accept: np.ndarray


def adapt(target, q, config: ChainConfig, rng, inv_metric=None, on_draw=None):
    """Run warmup; returns ``(step, inv_metric, position, log_density, gradient, accept)``."""
    q = np.asarray(q, dtype=float)
    dim = q.size
    inv = np.ones(dim) if inv_metric is None else np.asarray(inv_metric, dtype=float).copy()
    lp, g = target(q)
    step = config.step_size or find_reasonable_step(target, q, lp, g, inv, rng)
    accept = np.empty(config.warmup)
    if not config.adapt:
        for i in range(config.warmup):
            tr = _Kernel(target, step, inv, rng, config.max_tree_depth).transition(q, lp, g)
            q, lp, g = tr.position, tr.log_density, tr.gradient
            accept[i] = tr.accept_stat
        return step, inv, q, lp, g, accept
    windows = window_schedule(config.warmup) if config.metric_adaptation else []
    ends = {stop: start for start, stop in windows}
    da = DualAveraging(step, config.target_accept)
    buffer = []
    in_window = windows[0][0] if windows else config.warmup
    for i in range(config.warmup):
        kernel = _Kernel(target, step, inv, rng, config.max_tree_depth)
        tr = kernel.transition(q, lp, g)
        q, lp, g = tr.position, tr.log_density, tr.gradient
        accept[i] = tr.accept_stat
        step = da.update(tr.accept_stat)
        if i >= in_window:
            buffer.append(q)
        if (i + 1) in ends:
            inv = regularized_variance(np.asarray(buffer))
            buffer = []
            step = find_reasonable_step(target, q, lp, g, inv, rng, step)
            da.restart(step)
        if on_draw is not None:
            on_draw(i, q)
    return da.final_step, inv, q, lp, g, accept


def _run_one_chain(target, config: ChainConfig, init, chain: int, transform) -> ChainResult:
    rng = chain_rng(config.seed, chain)
    step, inv, q, lp, g, warm_accept = adapt(target, init, config, rng)
    n_iter = config.iterations_per_chain
    kept = []
    accept = np.empty(n_iter)
    depth = np.empty(n_iter, dtype=np.int64)
    divergent = np.zeros(n_iter, dtype=bool)
    kernel = _Kernel(target, step, inv, rng, config.max_tree_depth)
    for i in range(n_iter):
        tr = kernel.transition(q, lp, g)
        q, lp, g = tr.position, tr.log_density, tr.gradient
        accept[i], depth[i], divergent[i] = tr.accept_stat, tr.depth, tr.divergent
        if (i + 1) % config.thin == 0:
            kept.append(q)
    draws = np.asarray(kept)
    if transform is not None:
        draws = transform(draws)
    return ChainResult(draws, accept, depth, divergent, step, inv, warm_accept)


def chain_seed(seed: int, chain: int, stream: int = 0) -> np.random.SeedSequence:
    """Independent stream for ``(seed, chain, stream)`` via SeedSequence hashing."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chain), int(stream)))


def chain_rng(seed: int, chain: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(chain_seed(seed, chain, stream))


def _checked_init(target, init, chain, config, reinit):
    q = np.asarray(init, dtype=float)
    for attempt in range(config.init_attempts + 1):
        with np.errstate(all="ignore"):
            lp, g = target(q)
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            return q
        if reinit is None or attempt == config.init_attempts:
            break
        q = np.asarray(reinit(chain_rng(config.seed, chain, 2 + attempt)), dtype=float)
    raise SamplerError(
        "initial log density is not finite", chain=chain, attempts=config.init_attempts
    )


def run_chains(target, config: ChainConfig, inits, names=None, transform=None, reinit=None,
               n_jobs: int = 1) -> PosteriorDraws:
    """Run ``config.chains`` independent chains and collect retained draws.

    ``inits`` holds one unconstrained start vector per chain. ``reinit``
    (optional) maps a generator to a fresh start vector and is used when a
    start has a non-finite density. ``transform`` maps an ``(iterations,
    dim)`` array of unconstrained draws to the reported scale. Chains get
    their own generator derived from ``(seed, chain)``, so the output does
    not depend on ``n_jobs``.
    """
    inits = list(inits)
    if len(inits) != config.chains:
        raise ConfigError("need one initial state per chain", chains=config.chains,
                          inits=len(inits))
    starts = [_checked_init(target, q, c, config, reinit) for c, q in enumerate(inits)]
    if n_jobs > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, config.chains)) as pool:
            futures = [pool.submit(_run_one_chain, target, config, starts[c], c, transform)
                       for c in range(config.chains)]
            results = [f.result() for f in futures]
    else:
        results = [_run_one_chain(target, config, starts[c], c, transform)
                   for c in range(config.chains)]
    draws = np.stack([r.draws for r in results])
    if names is None:
        names = [f"theta[{i + 1}]" for i in range(draws.shape[2])]
    if not np.all(np.isfinite(draws)):
        raise SamplerError("non-finite draws produced")
    return PosteriorDraws(
        names=names,
        draws=draws,
        divergence_count=np.array([int(r.divergent.sum()) for r in results]),
        accept_stat=np.stack([r.accept_stat for r in results]),
        tree_depth=np.stack([r.tree_depth for r in results]),
        step_size=np.array([r.step_size for r in results]),
        inv_metric=np.stack([r.inv_metric for r in results]),
    )
