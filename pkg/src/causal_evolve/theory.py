"""Monte-Carlo experiments on structured versus structure-free program search.

Two settings are simulated:

* Linear programs, ``f(p) = <x_p, w*>``, where estimating ``w*`` from the ``d``
  basis programs and committing to the best predicted program needs a number
  of evaluations growing like ``d log K``. A policy that ignores the features
  and spreads evaluations uniformly over the ``K`` programs needs ``~K``.
* Two hypotheses that produce identical observations in a source environment
  but disagree on which program is best in the target. Any policy that only
  sees the source pays at least half the margin in expected target regret
  under one of the two.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

CSV_COLUMNS = ("policy", "d", "K", "epsilon", "delta", "sigma", "budget", "success_rate", "mean_regret", "trials")


class TheoryError(ValueError):
    pass


@dataclass(frozen=True)
class LinearInstance:
    features: np.ndarray  # (K, d)
    w_star: np.ndarray
    sigma: float

    def __post_init__(self):
        K, d = self.features.shape
        if K < d:
            raise TheoryError("need at least d programs")
        if not np.array_equal(self.features[:d], np.eye(d)):
            raise TheoryError("the first d programs must have the standard basis as features")
        if np.any(np.linalg.norm(self.features, axis=1) > 1 + 1e-12):
            raise TheoryError("feature vectors must have norm <= 1")
        if self.w_star.shape != (d,):
            raise TheoryError("w_star has the wrong dimension")
        if self.sigma < 0:
            raise TheoryError("sigma must be >= 0")

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def K(self) -> int:
        return self.features.shape[0]

    def values(self) -> np.ndarray:
        return self.features @ self.w_star


def make_linear_instance(d: int, K: int, sigma: float, rng: np.random.Generator, w_star=None) -> LinearInstance:
    """Basis programs followed by ``K - d`` random features inside the unit ball."""
    if K < d:
        raise TheoryError("K must be >= d")
    extra = rng.normal(size=(K - d, d))
    norms = np.linalg.norm(extra, axis=1, keepdims=True)
    radii = rng.uniform(0.0, 1.0, size=(K - d, 1))
    extra = extra / np.where(norms > 0, norms, 1.0) * radii
    features = np.vstack([np.eye(d), extra])
    if w_star is None:
        w_star = rng.normal(size=d)
        w_star /= np.linalg.norm(w_star)
    return LinearInstance(features, np.asarray(w_star, dtype=float), float(sigma))


@dataclass(frozen=True)
class BlackBoxInstance:
    mu: np.ndarray
    sigma: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.mu)):
            raise TheoryError("means must be finite")
        if self.sigma < 0:
            raise TheoryError("sigma must be >= 0")

    @property
    def K(self) -> int:
        return len(self.mu)


@dataclass(frozen=True)
class PolicyResult:
    recommendation: int
    simple_regret: float
    evaluations_used: int


def _regret(values: np.ndarray, rec: int) -> float:
    return float(max(values.max() - values[rec], 0.0))


def run_etc_linear(instance: LinearInstance, n_per_basis: int, rng: np.random.Generator) -> PolicyResult:
    """Pull each basis program ``n_per_basis`` times, then commit to the best predicted program."""
    if n_per_basis < 1:
        raise TheoryError("n_per_basis must be >= 1")
    d = instance.d
    pulls = instance.w_star[:, None] + instance.sigma * rng.normal(size=(d, n_per_basis))
    w_hat = pulls.mean(axis=1)
    rec = int(np.argmax(instance.features @ w_hat))
    return PolicyResult(rec, _regret(instance.values(), rec), n_per_basis * d)


def uniform_allocation(budget: int, K: int) -> list[int]:
    if budget < K:
        raise TheoryError(f"budget {budget} is smaller than the number of programs {K}")
    base, extra = divmod(budget, K)
    return [base + (1 if i < extra else 0) for i in range(K)]


def run_blackbox_uniform(instance: BlackBoxInstance, budget: int, rng: np.random.Generator) -> PolicyResult:
    """Spread ``budget`` evaluations evenly over all programs and recommend the empirical best."""
    counts = uniform_allocation(budget, instance.K)
    means = np.array(
        [instance.mu[i] + instance.sigma * rng.normal(size=c).mean() for i, c in enumerate(counts)]
    )
    rec = int(np.argmax(means))
    return PolicyResult(rec, _regret(instance.mu, rec), budget)


def hard_instance(K: int, epsilon: float, alt_index: int = 0, sigma: float = 1.0) -> BlackBoxInstance:
    """Base instance (``alt_index=0``) or the alternative that raises program ``alt_index`` (1-based, >= 2)."""
    if K < 2:
        raise TheoryError("K must be >= 2")
    if alt_index != 0 and not 2 <= alt_index <= K:
        raise TheoryError(f"alt_index must be 0 or in [2, {K}], got {alt_index}")
    mu = np.full(K, -2.0 * epsilon)
    mu[0] = 0.0
    if alt_index:
        mu[alt_index - 1] = 2.0 * epsilon
    return BlackBoxInstance(mu, sigma)


def kl_per_pull(epsilon: float, sigma: float) -> float:
    """KL divergence of one pull of the flipped program, base versus alternative."""
    return (4.0 * epsilon) ** 2 / (2.0 * sigma**2)


def etc_sample_size(epsilon: float, delta: float, K: int, sigma: float) -> int:
    """Pulls per basis program sufficient for regret <= 2*epsilon with probability >= 1 - delta."""
    if epsilon <= 0 or not 0 < delta < 1:
        raise TheoryError("need epsilon > 0 and delta in (0, 1)")
    return max(1, math.ceil(2.0 * sigma**2 / epsilon**2 * math.log(2 * K / delta)))


def blackbox_lower_bound(K: int, epsilon: float, delta: float, sigma: float) -> float:
    """Evaluations any uniformly correct black-box policy needs on the hard family."""
    return (K - 1) * sigma**2 / (8 * epsilon**2) * math.log(1 / (2 * delta))


# ---------------------------------------------------------------------------
# Monte-Carlo drivers


@dataclass(frozen=True)
class TrialSummary:
    policy: str
    d: int
    K: int
    epsilon: float
    delta: float
    sigma: float
    budget: int
    success_rate: float
    mean_regret: float
    trials: int

    @property
    def success_se(self) -> float:
        p = self.success_rate
        return math.sqrt(p * (1 - p) / self.trials)

    def row(self) -> dict:
        return asdict(self)


def _monte_carlo(run: Callable[[np.random.Generator], PolicyResult], trials: int, seed: int, threshold: float):
    successes, regrets = 0, []
    for t in range(trials):
        res = run(np.random.default_rng(seed + t))
        if res.simple_regret < 0:
            raise AssertionError("negative simple regret")
        regrets.append(res.simple_regret)
        successes += res.simple_regret <= threshold
    return successes / trials, math.fsum(regrets) / trials


def etc_trials(
    d: int, K: int, epsilon: float, delta: float, sigma: float, trials: int = 1000, seed: int = 0,
    n_per_basis: int | None = None,
) -> TrialSummary:
    """ETC on one random linear instance; success means simple regret <= 2*epsilon."""
    instance = make_linear_instance(d, K, sigma, np.random.default_rng(seed))
    n = etc_sample_size(epsilon, delta, K, sigma) if n_per_basis is None else n_per_basis
    rate, regret = _monte_carlo(lambda g: run_etc_linear(instance, n, g), trials, seed, 2 * epsilon)
    return TrialSummary("etc", d, K, epsilon, delta, sigma, n * d, rate, regret, trials)


def blackbox_trials(
    K: int, epsilon: float, delta: float, sigma: float, budget: int, trials: int = 1000, seed: int = 0,
    d: int = 0,
) -> TrialSummary:
    """Uniform allocation on the base hard instance; success means the best program is identified."""
    instance = hard_instance(K, epsilon, 0, sigma)
    rate, regret = _monte_carlo(lambda g: run_blackbox_uniform(instance, budget, g), trials, seed, epsilon)
    return TrialSummary("blackbox_uniform", d, K, epsilon, delta, sigma, budget, rate, regret, trials)


def required_uniform_budget(
    K: int, epsilon: float, sigma: float, target: float = 0.9, trials: int = 1000, seed: int = 0,
    max_per_arm: int = 1 << 20,
) -> int:
    """Smallest budget (a multiple of K) at which uniform allocation identifies the best program
    of the base hard instance with empirical probability >= ``target``.

    With ``m`` pulls per program the empirical mean is distributed as ``mu + sigma * z / sqrt(m)``,
    so one standard-normal draw per program and trial is reused for every ``m``; the success
    rate is then monotone in ``m`` and a bisection finds the threshold exactly.
    """
    mu = hard_instance(K, epsilon, 0, sigma).mu
    z = np.stack([np.random.default_rng(seed + t).normal(size=K) for t in range(trials)])

    def rate(m: int) -> float:
        means = mu + sigma * z / math.sqrt(m)
        # identification requires program 0 to beat every other program
        return float(np.mean(means[:, 0] > means[:, 1:].max(axis=1)))

    if sigma == 0:
        return K
    lo, hi = 1, 1
    while rate(hi) < target:
        lo, hi = hi + 1, hi * 2
        if hi > max_per_arm:
            raise TheoryError("required budget exceeds the search limit")
    while lo < hi:
        mid = (lo + hi) // 2
        if rate(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return hi * K


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


# ---------------------------------------------------------------------------
# source/target barrier


@dataclass(frozen=True)
class BarrierWorld:
    """Two hypotheses sharing source means but with opposite target optima."""

    source_means: np.ndarray
    target_values: np.ndarray  # (2, K)
    sigma: float

    @classmethod
    def build(cls, delta_margin: float, sigma: float = 1.0) -> "BarrierWorld":
        if delta_margin <= 0:
            raise TheoryError("delta_margin must be > 0")
        # program 2 looks best in the source and is optimal under neither hypothesis
        source = np.array([0.3, 0.3, 0.6])
        target = np.array([[delta_margin, 0.0, 0.0], [0.0, delta_margin, 0.0]])
        return cls(source, target, float(sigma))

    @property
    def K(self) -> int:
        return len(self.source_means)

    def source_mean(self, hypothesis: int, program: int) -> float:
        # the source environment does not depend on the hypothesis
        return float(self.source_means[program])

    def log_likelihood(self, hypothesis: int, program: int, y: float) -> float:
        m = self.source_mean(hypothesis, program)
        s = self.sigma
        return -0.5 * ((y - m) / s) ** 2 - math.log(s * math.sqrt(2 * math.pi))

    def regret(self, hypothesis: int, program: int) -> float:
        v = self.target_values[hypothesis]
        return float(v.max() - v[program])


class _Policy:
    name = "policy"

    def __init__(self, world: BarrierWorld, rng: np.random.Generator):
        self.world = world
        self.rng = rng
        self.sums = np.zeros(world.K)
        self.counts = np.zeros(world.K, dtype=int)

    def choose(self, t: int) -> int:
        return t % self.world.K

    def observe(self, program: int, y: float) -> None:
        self.sums[program] += y
        self.counts[program] += 1

    def commit(self) -> int:
        raise NotImplementedError

    def _empirical_best(self) -> int:
        means = np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), -np.inf)
        return int(np.argmax(means))


class UniformPolicy(_Policy):
    name = "uniform"

    def commit(self) -> int:
        return self._empirical_best()


class GreedyPolicy(_Policy):
    name = "greedy"

    def choose(self, t: int) -> int:
        if t < self.world.K:
            return t
        return self._empirical_best()

    def commit(self) -> int:
        return self._empirical_best()


class RandomPolicy(_Policy):
    name = "random"

    def choose(self, t: int) -> int:
        return int(self.rng.integers(self.world.K))

    def commit(self) -> int:
        return int(self.rng.integers(self.world.K))


class PosteriorGreedyPolicy(_Policy):
    """Bayes over the two hypotheses (log space); commits to the best posterior-expected target value."""

    name = "posterior_greedy"

    def __init__(self, world: BarrierWorld, rng: np.random.Generator):
        super().__init__(world, rng)
        self.log_belief = np.zeros(2)
        self.history: list[tuple[float, float]] = []

    def posterior(self) -> tuple[float, float]:
        shifted = self.log_belief - self.log_belief.max()
        w = np.exp(shifted)
        total = w.sum()
        return float(w[0] / total), float(w[1] / total)

    def observe(self, program: int, y: float) -> None:
        super().observe(program, y)
        for h in (0, 1):
            self.log_belief[h] += self.world.log_likelihood(h, program, y)
        self.history.append(self.posterior())

    def commit(self) -> int:
        b = np.array(self.posterior())
        expected = b @ self.world.target_values
        best = np.flatnonzero(expected == expected.max())
        return int(best[self.rng.integers(len(best))])


POLICIES: dict[str, type[_Policy]] = {
    p.name: p for p in (UniformPolicy, GreedyPolicy, RandomPolicy, PosteriorGreedyPolicy)
}


@dataclass
class BarrierResult:
    policy: str
    mean_regret: tuple[float, float]
    regret_se: tuple[float, float]
    worst_regret: float
    worst_se: float
    min_pair_sum: float
    posterior_history_ok: bool | None
    trials: int
    budget: int
    delta_margin: float


def barrier_experiment(
    delta_margin: float,
    budget: int,
    trials: int = 1000,
    policies: Iterable[str] = tuple(POLICIES),
    seed: int = 0,
    sigma: float = 1.0,
) -> list[BarrierResult]:
    """Run each policy against the source for ``budget`` rounds and score its commitment on both targets.

    Because source observations do not depend on the hypothesis, one interaction per trial is
    scored under both hypotheses.
    """
    world = BarrierWorld.build(delta_margin, sigma)
    results = []
    for name in policies:
        cls = POLICIES[name]
        regrets = np.zeros((trials, 2))
        posterior_ok: bool | None = True if cls is PosteriorGreedyPolicy else None
        for t in range(trials):
            rng = np.random.default_rng(seed + t)
            policy = cls(world, rng)
            for step in range(budget):
                p = policy.choose(step)
                # hypothesis 0 is used to draw; the draw is identical under hypothesis 1
                y = world.source_mean(0, p) + world.sigma * rng.normal()
                policy.observe(p, y)
            if isinstance(policy, PosteriorGreedyPolicy):
                posterior_ok = posterior_ok and all(b == (0.5, 0.5) for b in policy.history)
            choice = policy.commit()
            regrets[t] = (world.regret(0, choice), world.regret(1, choice))
        means = regrets.mean(axis=0)
        ses = regrets.std(axis=0) / math.sqrt(trials)
        worst = int(np.argmax(means))
        results.append(
            BarrierResult(
                policy=name,
                mean_regret=(float(means[0]), float(means[1])),
                regret_se=(float(ses[0]), float(ses[1])),
                worst_regret=float(means[worst]),
                worst_se=float(ses[worst]),
                min_pair_sum=float(regrets.sum(axis=1).min()),
                posterior_history_ok=posterior_ok,
                trials=trials,
                budget=budget,
                delta_margin=delta_margin,
            )
        )
    return results


def to_csv(rows: Iterable[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


BARRIER_COLUMNS = (
    "policy", "delta_margin", "budget", "trials",
    "regret_h0", "regret_h1", "worst_regret", "worst_se", "min_pair_sum", "posterior_fixed",
)


def barrier_rows(results: Iterable[BarrierResult]) -> list[dict]:
    return [
        {
            "policy": r.policy,
            "delta_margin": r.delta_margin,
            "budget": r.budget,
            "trials": r.trials,
            "regret_h0": r.mean_regret[0],
            "regret_h1": r.mean_regret[1],
            "worst_regret": r.worst_regret,
            "worst_se": r.worst_se,
            "min_pair_sum": r.min_pair_sum,
            "posterior_fixed": "" if r.posterior_history_ok is None else r.posterior_history_ok,
        }
        for r in results
    ]
