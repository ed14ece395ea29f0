"""Outer-loop search over surrogate parameters.

Each step samples M parameter vectors around the current mean, trains one
network per sample from a shared initialization, scores it on the hold-out
split with the exact target metric, and moves the mean with a clipped
importance-ratio (PPO2) update. A random-search baseline shares the same
protocol but never moves the mean.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from . import curves
from .errors import ConfigError, NumericError
from .metrics import MetricId
from .net import TrainSchedule, evaluate, model_init, train
from .seeding import subseed, substream
from .surrogate import LossSpec, slot_count, spec_from_params

MU_BOX = (0.01, 0.99)

# values used for the published search (proxy task on 8 GPUs)
PAPER_STEPS = 20
PAPER_SAMPLES = 32
PAPER_SIGMA = 0.2
PAPER_EPSILON = 0.1
PAPER_UPDATE_STEPS = 100

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# -- truncated normal ----------------------------------------------------------

def _bounds(bounded: bool):
    return (0.0, 1.0) if bounded else (-np.inf, np.inf)


def truncnorm_sample(mu, sigma: float, rng, bounded: bool = True) -> np.ndarray:
    """Inverse-CDF draw from N(mu, sigma^2) truncated to [0, 1] per dimension."""
    mu = np.asarray(mu, dtype=np.float64)
    lo, hi = _bounds(bounded)
    a = ndtr((lo - mu) / sigma)
    b = ndtr((hi - mu) / sigma)
    u = rng.uniform(size=mu.shape)
    x = mu + sigma * ndtri(a + u * (b - a))
    return np.clip(x, lo, hi) if bounded else x


def _log_norm_const(mu, sigma, bounded):
    if not bounded:
        return np.zeros_like(mu)
    a, b = (0.0 - mu) / sigma, (1.0 - mu) / sigma
    # log(Phi(b) - Phi(a)) without cancellation for either tail
    return np.where(a > 0, log_ndtr(-a) + np.log1p(-np.exp(log_ndtr(-b) - log_ndtr(-a))),
                    log_ndtr(b) + np.log1p(-np.exp(log_ndtr(a) - log_ndtr(b))))


def truncnorm_logpdf(theta, mu, sigma: float, bounded: bool = True) -> float:
    """Joint log-density of independent truncated normals; -inf outside [0, 1]."""
    theta = np.asarray(theta, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), theta.shape)
    if bounded and (np.any(theta < 0.0) or np.any(theta > 1.0)):
        return -np.inf
    z = (theta - mu) / sigma
    per = -0.5 * z * z - _LOG_SQRT_2PI - math.log(sigma) - _log_norm_const(mu, sigma, bounded)
    return float(per.sum())


def _logpdf_rows(thetas, mu, sigma, bounded):
    z = (thetas - mu) / sigma
    per = -0.5 * z * z - _LOG_SQRT_2PI - math.log(sigma) - _log_norm_const(mu, sigma, bounded)
    return per.sum(axis=1)


def truncnorm_dlogpdf_dmu(thetas, mu, sigma: float, bounded: bool = True) -> np.ndarray:
    """d log p(theta; mu) / d mu for each row of ``thetas``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    mu = np.asarray(mu, dtype=np.float64)
    g = (thetas - mu) / sigma ** 2
    if bounded:
        a, b = -mu / sigma, (1.0 - mu) / sigma
        # d/dmu log Z = (phi(a) - phi(b)) / (sigma Z)
        log_z = _log_norm_const(mu, sigma, True)
        phi_a = np.exp(-0.5 * a * a - _LOG_SQRT_2PI - log_z)
        phi_b = np.exp(-0.5 * b * b - _LOG_SQRT_2PI - log_z)
        g = g - (phi_a - phi_b) / sigma
    return g


# -- PPO2 ------------------------------------------------------------------------

def center_rewards(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0 or s.max() == s.min():
        return np.zeros_like(s)
    adv = s - math.fsum(s) / s.size
    # fold the rounding residual back in so the advantages sum to exactly zero
    for _ in range(64):
        r = math.fsum(adv)
        if r == 0.0:
            break
        k = int(np.argmin(np.abs(adv)))  # smallest entry absorbs it with the least rounding
        adv[k] -= r
    return adv


def clipped_term(ratio, advantage, epsilon: float):
    """Pessimistic PPO2 term min(r A, clip(r, 1-eps, 1+eps) A), elementwise."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - epsilon, 1 + epsilon) * advantage)


def ppo2_objective(mu, mu_t, samples, advantages, sigma: float, epsilon: float,
                   bounded: bool = True) -> float:
    """Mean over samples of min(r A, clip(r, 1-eps, 1+eps) A), r = p(.; mu) / p(.; mu_t)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    adv = np.asarray(advantages, dtype=np.float64)
    ratio = _ratios(mu, mu_t, samples, sigma, bounded)
    return float(np.mean(clipped_term(ratio, adv, epsilon)))


def _ratios(mu, mu_t, samples, sigma, bounded):
    return np.exp(_logpdf_rows(samples, np.asarray(mu, float), sigma, bounded)
                  - _logpdf_rows(samples, np.asarray(mu_t, float), sigma, bounded))


def ppo2_update(mu_t, samples, scores, sigma: float, epsilon: float, steps: int, lr: float,
                bounded: bool = True) -> np.ndarray:
    """Projected gradient ascent on the clipped objective, starting from mu_t."""
    mu_t = np.asarray(mu_t, dtype=np.float64)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    adv = center_rewards(scores)
    mu = mu_t.copy()
    if not np.any(adv):
        return mu
    M = samples.shape[0]
    for step in range(steps):
        ratio = _ratios(mu, mu_t, samples, sigma, bounded)
        # the clipped branch is constant in mu, so only unclipped terms carry gradient
        active = ((adv > 0) & (ratio <= 1 + epsilon)) | ((adv < 0) & (ratio >= 1 - epsilon))
        dlog = truncnorm_dlogpdf_dmu(samples, mu, sigma, bounded)
        grad = ((active * adv * ratio)[:, None] * dlog).sum(axis=0) / M
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite PPO2 gradient", update_step=step, mu=mu.tolist())
        mu = mu + lr * grad
        if bounded:
            mu = np.clip(mu, *MU_BOX)
    return mu


# -- search driver ---------------------------------------------------------------------

@dataclass(frozen=True)
class SearchConfig:
    metric: str = "miou"
    tolerance_px: int | None = None
    family: str = curves.BEZIER
    n_segments: int = 2
    steps: int = 10
    samples: int = 8
    sigma: float = PAPER_SIGMA
    epsilon: float = PAPER_EPSILON
    inner_update_steps: int = PAPER_UPDATE_STEPS
    inner_update_lr: float = 0.02
    hidden: int = 16
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(iterations=100))
    master_seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must be in (0, 1)")
        if self.steps < 1 or self.samples < 1:
            raise ConfigError("steps and samples must be >= 1")
        if self.family not in curves.FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.n_segments < 1:
            raise ConfigError("n_segments must be >= 1")
        if self.inner_update_steps < 0 or self.inner_update_lr < 0:
            raise ConfigError("inner update steps and rate must be >= 0")
        if self.tolerance_px is not None and not MetricId.of(self.metric).name.is_boundary:
            raise ConfigError(f"tolerance only applies to boundary metrics, not {self.metric}")
        MetricId.of(self.metric, self.tolerance_px)

    @classmethod
    def paper_defaults(cls, **overrides) -> "SearchConfig":
        base = dict(steps=PAPER_STEPS, samples=PAPER_SAMPLES, sigma=PAPER_SIGMA,
                    epsilon=PAPER_EPSILON, inner_update_steps=PAPER_UPDATE_STEPS)
        base.update(overrides)
        return cls(**base)

    @property
    def metric_id(self) -> MetricId:
        return MetricId.of(self.metric, self.tolerance_px)

    @property
    def bounded(self) -> bool:
        # linear-family parameters are softmax-normalized, so they are sampled untruncated
        return self.family == curves.BEZIER

    @property
    def dim(self) -> int:
        return slot_count(self.metric_id) * curves.param_count(self.family, self.n_segments)

    def initial_mu(self) -> np.ndarray:
        p = curves.identity_params(self.family, self.n_segments)
        return np.tile(p, slot_count(self.metric_id))

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class SearchResult:
    best_spec: LossSpec
    best_step: int
    history: list
    trainings: int


def _spec(config: SearchConfig, params) -> LossSpec:
    return spec_from_params(config.metric_id, config.family, config.n_segments, params)


def _candidate(job):
    """Train one candidate from the shared init and score it on the hold-out split."""
    config, params, net0, train_xy, hold_xy = job
    try:
        net = train(net0, *train_xy, _spec(config, params), config.schedule)
        return evaluate(net, *hold_xy, config.metric_id), False
    except (NumericError, FloatingPointError):
        return 0.0, True


def initial_network(config: SearchConfig, dataset):
    p = dataset.params
    return model_init(subseed(config.master_seed, "init"), p.num_features, config.hidden, p.num_classes)


def train_schedule(config: SearchConfig) -> TrainSchedule:
    return replace(config.schedule, seed=subseed(config.master_seed, "batches"))


def run_search(config: SearchConfig, dataset, jobs: int = 1, strategy: str = "ppo2",
               on_step=None, timing: bool = False) -> SearchResult:
    """Search surrogate parameters; ``strategy`` is 'ppo2' or 'random'.

    ``on_step(record)`` is called after every step with the trajectory record.
    """
    if strategy not in ("ppo2", "random"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    config = replace(config, schedule=train_schedule(config))
    net0 = initial_network(config, dataset)
    train_xy = dataset.arrays("train")
    hold_xy = dataset.arrays("holdout")
    mu = config.initial_mu()
    history = []
    best_mean, best_max = -np.inf, -np.inf
    trainings = 0
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for t in range(1, config.steps + 1):
            start = time.perf_counter()
            thetas = np.stack([
                truncnorm_sample(mu, config.sigma, substream(config.master_seed, "sample", t, i), config.bounded)
                for i in range(config.samples)
            ])
            work = [(config, th, net0, train_xy, hold_xy) for th in thetas]
            results = list(pool.map(_candidate, work)) if pool else [_candidate(w) for w in work]
            trainings += len(results)
            scores = [r[0] for r in results]
            failed = [i for i, r in enumerate(results) if r[1]]
            mean_score = math.fsum(scores) / len(scores)
            max_score = max(scores)
            best_mean = max(best_mean, mean_score)
            best_max = max(best_max, max_score)
            record = {
                "t": t,
                "mu": [float(x) for x in mu],
                "scores": [float(s) for s in scores],
                "mean_score": mean_score,
                "max_score": max_score,
                "best_mean_so_far": best_mean,
                "best_max_so_far": best_max,
                "failed": failed,
                "strategy": strategy,
                "master_seed": config.master_seed,
                "wall_ms": round((time.perf_counter() - start) * 1000.0, 3) if timing else 0,
            }
            history.append(record)
            if on_step is not None:
                on_step(record)
            if strategy == "ppo2":
                try:
                    mu = ppo2_update(mu, thetas, scores, config.sigma, config.epsilon,
                                     config.inner_update_steps, config.inner_update_lr, config.bounded)
                except NumericError as exc:
                    raise NumericError(str(exc), t=t) from exc
    finally:
        if pool is not None:
            pool.shutdown()
    best = max(range(len(history)), key=lambda k: (history[k]["mean_score"], -k))
    best_spec = _spec(config, history[best]["mu"])
    return SearchResult(best_spec, history[best]["t"], history, trainings)


def random_search(config: SearchConfig, dataset, jobs: int = 1, on_step=None, timing: bool = False):
    return run_search(config, dataset, jobs=jobs, strategy="random", on_step=on_step, timing=timing)


def retrain_and_score(config: SearchConfig, dataset, spec: LossSpec, metric=None) -> float:
    """Train ``spec`` exactly as a search candidate would and score it on the hold-out split."""
    config = replace(config, schedule=train_schedule(config))
    net = train(initial_network(config, dataset), *dataset.arrays("train"), spec, config.schedule)
    return evaluate(net, *dataset.arrays("holdout"), metric or config.metric_id)
