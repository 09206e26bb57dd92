"""Permutation GA for take-off sequencing with cost variants v1..v5.

A chromosome is a permutation of request indices. Decoding is greedy list
scheduling: in chromosome order each request starts at
``max(release, earliest free time among its class's pads)``, and that pad
stays busy for ``service_demand + separation``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import kernels
from .metrics import (
    LONG_WAIT_THRESHOLD,
    TAIL_BETA,
    MetricVector,
    Schedule,
    compute_metrics,
)
from .scenario import Scenario

VARIANTS = ("v1", "v2", "v3", "v4", "v5", "custom")


@dataclass(frozen=True)
class CostWeights:
    """Weights of ``a1*avg + a2*std + a3*tail_95 + penalty (+ c*max)``.

    ``pad_weighting`` selects the pad penalty matrix: ``fixed`` uses each
    class's base weight at all times, ``time`` uses the scenario's
    weather-modulated profile. ``class1_penalty_scale`` multiplies class 1's
    row (the v2 reduction).
    """

    alpha1: float = 1.0
    alpha2: float = 0.0
    alpha3: float = 0.0
    variant: str = "custom"
    max_delay_coeff: float = 0.0
    class1_penalty_scale: float = 1.0
    pad_weighting: str = "fixed"
    penalty_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.alpha1, self.alpha2, self.alpha3, self.max_delay_coeff, self.penalty_scale) < 0:
            raise ValueError("cost weights must be >= 0")
        if max(self.alpha1, self.alpha2, self.alpha3) <= 0:
            raise ValueError("at least one alpha must be positive")
        if not 0.0 <= self.class1_penalty_scale <= 1.0:
            raise ValueError("class1_penalty_scale must lie in [0, 1]")
        if self.pad_weighting not in ("fixed", "time"):
            raise ValueError(f"unknown pad_weighting {self.pad_weighting!r}")

    def scaled(self, factor: float) -> "CostWeights":
        return replace(
            self,
            alpha1=self.alpha1 * factor,
            alpha2=self.alpha2 * factor,
            alpha3=self.alpha3 * factor,
            max_delay_coeff=self.max_delay_coeff * factor,
            penalty_scale=self.penalty_scale * factor,
        )

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CostWeights":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def variant_weights(variant: str) -> CostWeights:
    """Preset cost weights for the five named variants.

    v1 waits plus time-constant pad penalties; v2 the same with class 1's
    penalty cut to a quarter; v3 weather-modulated pad weights; v4 v1 plus a
    max-delay term; v5 mean/std/tail statistics on top of v1's penalties.

    Magnitudes are sized for desk scenarios of ~500 requests, where the pad
    penalty sum is O(n * avg_wait). The v5 tail weight spread over the worst
    5% (~115 per second per tail member) exceeds v4's pull on the single max.
    """
    presets = {
        "v1": CostWeights(variant="v1"),
        "v2": CostWeights(variant="v2", class1_penalty_scale=0.25),
        "v3": CostWeights(variant="v3", pad_weighting="time"),
        "v4": CostWeights(variant="v4", max_delay_coeff=100.0),
        "v5": CostWeights(variant="v5", alpha2=300.0, alpha3=3000.0),
    }
    try:
        return presets[variant]
    except KeyError:
        raise ValueError(f"no preset for variant {variant!r}; choose one of v1..v5") from None


@dataclass(frozen=True)
class GaParams:
    pop_size: int = 100
    generations: int = 300
    crossover_prob: float = 0.85
    mutation_prob: float = 0.2
    elite_count: int = 2
    tournament_size: int = 3
    seed: int = 0
    init_jitter: float = 60.0
    swap_window: int = 8

    def __post_init__(self) -> None:
        if self.pop_size < 2:
            raise ValueError("pop_size must be >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if not (0 <= self.crossover_prob <= 1 and 0 <= self.mutation_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if not 0 <= self.elite_count < self.pop_size:
            raise ValueError("elite_count must lie in [0, pop_size)")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")


@dataclass
class EvolutionTrace:
    best: list[float] = field(default_factory=list)
    mean: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float]]:
        return [(g, b, m) for g, (b, m) in enumerate(zip(self.best, self.mean))]


# --------------------------------------------------------------------------
# decoding and cost


class _Instance:
    """Scenario arrays plus the variant's penalty matrix, prepared once."""

    def __init__(self, scenario: Scenario, w: CostWeights):
        self.scenario = scenario
        self.arr = scenario.arrays()
        self.w = w
        self.penalty = np.ascontiguousarray(penalty_matrix(scenario, w), dtype=np.float64)
        n = scenario.n
        self.k_tail = max(1, math.ceil(round((1.0 - TAIL_BETA) * n, 9))) if n else 1

    def decode(self, orders: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = self.arr
        orders = np.ascontiguousarray(orders, dtype=np.int64)
        starts, pads = kernels.decode_batch(
            orders, a.release, a.demand, a.class_index, a.pad_offset, a.separations, a.bin_width
        )
        return starts, pads, starts - a.release

    def costs(self, starts: np.ndarray, waits: np.ndarray) -> np.ndarray:
        return batch_cost(starts, waits, self.arr.class_index, self.penalty, self.arr.bin_width, self.k_tail, self.w)


def penalty_matrix(scenario: Scenario, w: CostWeights) -> np.ndarray:
    prof = scenario.pad_weights
    if w.pad_weighting == "time":
        m = prof.weights.copy()
    else:
        base = {c.class_id: c.base_weight for c in scenario.classes}
        m = np.empty_like(prof.weights)
        for row, cid in enumerate(prof.class_ids):
            m[row, :] = base.get(cid, float(prof.weights[row].min()))
    if 1 in prof.class_ids:
        m[prof.class_ids.index(1)] *= w.class1_penalty_scale
    return m * w.penalty_scale


def batch_cost(
    starts: np.ndarray,
    waits: np.ndarray,
    class_index: np.ndarray,
    penalty: np.ndarray,
    bin_width: int,
    k_tail: int,
    w: CostWeights,
) -> np.ndarray:
    """Cost of each row; the single-schedule cost is this on one row."""
    waits = np.ascontiguousarray(waits, dtype=np.int64)
    n = waits.shape[1]
    mom = kernels.wait_moments(waits, k_tail, LONG_WAIT_THRESHOLD)
    s, sq, mx, tail = mom[:, 0], mom[:, 1], mom[:, 2], mom[:, 3]
    avg = s / n
    # exact integer variance numerator
    std = np.sqrt((n * sq - s * s).astype(np.float64)) / n
    cvar = tail / k_tail
    pen = kernels.penalty_sums(np.ascontiguousarray(starts, dtype=np.int64), waits, class_index, penalty, bin_width)
    cost = w.alpha1 * avg + w.alpha2 * std + w.alpha3 * cvar + pen
    if w.max_delay_coeff:
        cost = cost + w.max_delay_coeff * mx
    return cost


def decode(chromosome: np.ndarray, scenario: Scenario) -> tuple[Schedule, np.ndarray]:
    order = np.asarray(chromosome, dtype=np.int64)
    check_permutation(order, scenario.n)
    a = scenario.arrays()
    starts, pads = kernels.decode_batch(
        order[None, :], a.release, a.demand, a.class_index, a.pad_offset, a.separations, a.bin_width
    )
    ids = np.array([r.id for r in scenario.requests], dtype=np.int64)
    return Schedule(ids, starts[0], pads[0]), starts[0] - a.release


def schedule_cost(waits: np.ndarray, schedule: Schedule, scenario: Scenario, w: CostWeights) -> float:
    inst = _Instance(scenario, w)
    return float(inst.costs(np.asarray(schedule.starts)[None, :], np.asarray(waits)[None, :])[0])


def check_permutation(order: np.ndarray, n: int) -> None:
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise ValueError("chromosome is not a permutation of the scenario's requests")


# --------------------------------------------------------------------------
# operators


def order_crossover(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = a.shape[0]
    if n < 2:
        return a.copy()
    lo, hi = sorted(rng.choice(n + 1, size=2, replace=False).tolist())
    return kernels.order_crossover(a, b, lo, hi)


def swap_mutation(order: np.ndarray, rng: np.random.Generator, window: int = 0) -> np.ndarray:
    """Swap two genes; with ``window > 0`` they lie at most ``window`` apart."""
    out = order.copy()
    n = out.shape[0]
    if n < 2:
        return out
    if window <= 0 or window >= n - 1:
        i, j = rng.choice(n, size=2, replace=False)
    else:
        i = int(rng.integers(0, n))
        j = i + int(rng.integers(1, window + 1)) * (1 if rng.random() < 0.5 else -1)
        if not 0 <= j < n:
            j = i - (j - i)
    out[i], out[j] = out[j], out[i]
    return out


def tournament(costs: np.ndarray, size: int, rng: np.random.Generator, count: int = 1) -> np.ndarray:
    """Winners of ``count`` independent tournaments of ``size`` draws each.

    Lowest cost wins; ties go to the lower population index.
    """
    rank = np.empty(costs.shape[0], dtype=np.int64)
    rank[np.lexsort((np.arange(costs.shape[0]), costs))] = np.arange(costs.shape[0])
    picks = rng.integers(0, costs.shape[0], size=(count, size))
    return picks[np.arange(count), np.argmin(rank[picks], axis=1)]


def initial_population(scenario: Scenario, p: GaParams, rng: np.random.Generator) -> np.ndarray:
    """Release-order priority keys perturbed by Gaussian jitter.

    Jitter of zero seeds every individual with the release order itself.
    """
    rel = scenario.arrays().release.astype(np.float64)
    pop = np.empty((p.pop_size, scenario.n), dtype=np.int64)
    for k in range(p.pop_size):
        keys = rel + rng.normal(0.0, p.init_jitter, size=scenario.n) if p.init_jitter > 0 else rel
        pop[k] = np.argsort(keys, kind="stable")
    return pop


# --------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class GaResult:
    chromosome: np.ndarray
    schedule: Schedule
    waits: np.ndarray
    metrics: MetricVector
    cost: float
    trace: EvolutionTrace


def ga_optimize(scenario: Scenario, w: CostWeights, p: GaParams) -> GaResult:
    """Elitist generational GA; returns the best individual ever evaluated."""
    rng = np.random.default_rng(p.seed)
    inst = _Instance(scenario, w)
    n = scenario.n
    trace = EvolutionTrace()

    if n <= 1:
        chrom = np.arange(n, dtype=np.int64)
        schedule, waits = decode(chrom, scenario)
        cost = schedule_cost(waits, schedule, scenario, w) if n else 0.0
        metrics = compute_metrics(waits, schedule, scenario, inst.penalty) if n else None
        trace.best.append(cost)
        trace.mean.append(cost)
        return GaResult(chrom, schedule, waits, metrics, cost, trace)  # type: ignore[arg-type]

    pop = initial_population(scenario, p, rng)
    starts, _, waits = inst.decode(pop)
    costs = inst.costs(starts, waits)
    best_i = int(np.argmin(costs))
    best, best_cost = pop[best_i].copy(), float(costs[best_i])
    trace.best.append(best_cost)
    trace.mean.append(float(costs.mean()))

    for _ in range(p.generations):
        ranked = np.lexsort((np.arange(p.pop_size), costs))
        m = p.pop_size - p.elite_count
        mothers = tournament(costs, p.tournament_size, rng, m)
        fathers = tournament(costs, p.tournament_size, rng, m)
        do_cx = rng.random(m) < p.crossover_prob
        do_mut = rng.random(m) < p.mutation_prob
        nxt = np.empty_like(pop)
        nxt[: p.elite_count] = pop[ranked[: p.elite_count]]
        for k in range(m):
            child = order_crossover(pop[mothers[k]], pop[fathers[k]], rng) if do_cx[k] else pop[mothers[k]].copy()
            if do_mut[k]:
                child = swap_mutation(child, rng, p.swap_window)
            nxt[p.elite_count + k] = child
        pop = nxt
        starts, _, waits = inst.decode(pop)
        costs = inst.costs(starts, waits)
        gi = int(np.argmin(costs))
        if costs[gi] < best_cost:
            best, best_cost = pop[gi].copy(), float(costs[gi])
        trace.best.append(best_cost)
        trace.mean.append(float(costs.mean()))

    schedule, waits = decode(best, scenario)
    return GaResult(best, schedule, waits, compute_metrics(waits, schedule, scenario, inst.penalty), best_cost, trace)


def exhaustive_minimum(scenario: Scenario, w: CostWeights) -> tuple[float, list[np.ndarray]]:
    """Minimum cost over all ``n!`` orders and the orders attaining it."""
    import itertools

    inst = _Instance(scenario, w)
    perms = np.array(list(itertools.permutations(range(scenario.n))), dtype=np.int64)
    starts, _, waits = inst.decode(perms)
    costs = inst.costs(starts, waits)
    m = float(costs.min())
    return m, [perms[i] for i in np.flatnonzero(costs == m)]


# --------------------------------------------------------------------------
# registry hand-off


def emit_triplet(
    prompt_id: str,
    w: CostWeights,
    result: GaResult,
    *,
    prompt_text: str = "",
    user_id: str = "anonymous",
    domain: str = "uav-takeoff-scheduling",
    timestamp: float = 0.0,
):
    from .registry import Triplet

    return Triplet(
        prompt_id=prompt_id,
        prompt_text=prompt_text or prompt_id,
        fitness=float(result.cost),
        solution_summary={
            "metrics": result.metrics.as_dict(),
            "schedule_digest": result.schedule.digest(),
            "cost_weights": w.as_dict(),
        },
        timestamp=timestamp,
        user_id=user_id,
        domain=domain,
    )
