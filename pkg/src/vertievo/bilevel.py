"""Outer GA over inner-objective weight vectors.

Genomes are :class:`~vertievo.convex.WeightVector` points. New genomes come
from a Dirichlet-Multinomial draw (symmetric, or centred on a parent) followed
by the eta-safe map ``alpha = eta * e4 + (1 - eta) * raw``, which keeps every
genome on the simplex with at least ``eta`` on the strongly convex singleton.

Fitness is the mean wait at the inner minimizer, averaged with equal weights
over the validation cases; lower is better. The test cases sit behind
:class:`SealedCases` and are opened only by :func:`final_report`.
"""
from __future__ import annotations

import functools
import math
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .convex import (
    FLOOR_INDEX,
    N_WEIGHTS,
    InfeasibleError,
    NonConvergenceError,
    RelaxConfig,
    RelaxedInstance,
    WeightVector,
    atoms,
    relax_scenario,
    solve_inner,
)
from .metrics import tail_95
from .scenario import Scenario

log = logging.getLogger(__name__)

TIE_TOL = 1e-9


class SplitError(ValueError):
    pass


class SealedError(RuntimeError):
    """Test-split data requested before the final report."""


# --------------------------------------------------------------------------
# genome operators


def eta_safe_project(raw: Sequence[float] | np.ndarray, eta: float) -> WeightVector:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (N_WEIGHTS,):
        raise ValueError(f"raw weights must have {N_WEIGHTS} entries")
    if np.any(raw < -1e-9) or abs(raw.sum() - 1.0) > 1e-9:
        raise ValueError("raw weights are not on the simplex")
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    alpha = (1.0 - eta) * np.clip(raw, 0.0, None)
    alpha[FLOOR_INDEX] += eta
    # push the rounding residue onto the largest entry until the exact sum is 1
    top = int(np.argmax(alpha))
    for _ in range(4):
        residue = 1.0 - math.fsum(alpha)
        if residue == 0.0:
            break
        alpha[top] += residue
    return WeightVector(alpha, eta)


def dirichlet_concentration(parent: WeightVector | None, kappa: float) -> np.ndarray:
    if parent is None:
        return np.full(N_WEIGHTS, kappa / N_WEIGHTS)
    return kappa * parent.alpha


def sample_counts(
    concentration: np.ndarray, m_samp: int, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Multinomial counts under a Dirichlet draw; zero concentration pins a zero.

    The Dirichlet draw is normalized Gamma variates, so a coordinate with
    zero concentration is exactly zero (numpy's ``dirichlet`` rejects that).
    """
    if m_samp < 1:
        raise ValueError("m_samp must be >= 1")
    if np.any(concentration < 0) or not np.any(concentration > 0):
        raise ValueError("concentration must be nonnegative and not all zero")
    shape = (N_WEIGHTS,) if size is None else (size, N_WEIGHTS)
    g = rng.standard_gamma(np.broadcast_to(concentration, shape))
    tot = g.sum(axis=-1, keepdims=True)
    # all-zero gamma draws (tiny concentrations underflow) fall back to the mean
    p = np.where(tot > 0, g / np.where(tot > 0, tot, 1.0), concentration / concentration.sum())
    return rng.multinomial(m_samp, p)


def sample_weights(
    parent: WeightVector | None, kappa: float, m_samp: int, eta: float, rng: np.random.Generator
) -> WeightVector:
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    counts = sample_counts(dirichlet_concentration(parent, kappa), m_samp, rng)
    return eta_safe_project(counts / m_samp, eta)


def counts_to_fractions(counts: np.ndarray, m_samp: int) -> list[Fraction]:
    return [Fraction(int(c), m_samp) for c in counts]


def crossover_weights(
    a: WeightVector, b: WeightVector, rng: np.random.Generator, lam: float | None = None
) -> WeightVector:
    lam = float(rng.uniform()) if lam is None else lam
    mix = lam * a.alpha + (1.0 - lam) * b.alpha
    # undo the floor so the projection re-applies it exactly once
    eta = a.eta
    raw = mix.copy()
    raw[FLOOR_INDEX] -= eta
    raw /= 1.0 - eta
    raw = np.clip(raw, 0.0, None)
    return eta_safe_project(raw / raw.sum(), eta)


# --------------------------------------------------------------------------
# parameters and data


@dataclass(frozen=True)
class OuterGaParams:
    pop_size: int = 60
    generations: int = 80
    tournament_size: int = 3
    crossover_prob: float = 0.8
    mutation_prob: float = 0.2
    kappa: float = 4.0
    m_samp: int = 32
    elite: int = 1
    eta: float = 0.05
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.pop_size < 2 or self.generations < 0 or self.tournament_size < 1:
            raise ValueError("pop_size >= 2, generations >= 0, tournament_size >= 1 required")
        if not (0 <= self.crossover_prob <= 1 and 0 <= self.mutation_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.kappa <= 0 or self.m_samp < 1 or not 0 < self.eta < 1:
            raise ValueError("kappa > 0, m_samp >= 1 and 0 < eta < 1 required")
        if not 0 <= self.elite < self.pop_size:
            raise ValueError("elite must lie in [0, pop_size)")
        for msg in self.advisories():
            warnings.warn(msg, stacklevel=3)

    def advisories(self) -> list[str]:
        checks = [
            (self.pop_size in (40, 60, 80), "pop_size outside {40, 60, 80}"),
            (60 <= self.generations <= 120, "generations outside [60, 120]"),
            (self.tournament_size in (2, 3), "tournament_size outside {2, 3}"),
            (0.7 <= self.crossover_prob <= 0.9, "crossover_prob outside [0.7, 0.9]"),
            (0.1 <= self.mutation_prob <= 0.3, "mutation_prob outside [0.1, 0.3]"),
            (1 <= self.kappa <= 10, "kappa outside [1, 10]"),
            (self.m_samp in (16, 32, 64), "m_samp outside {16, 32, 64}"),
            (self.elite in (1, 2), "elite outside {1, 2}"),
        ]
        return [m for ok, m in checks if not ok]

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Case:
    """One relaxed scenario with its per-request (class, weather) labels."""

    name: str
    instance: RelaxedInstance

    @property
    def labels(self) -> tuple[tuple[int, str], ...]:
        return self.instance.labels


class SealedCases:
    """Test cases that refuse iteration until :meth:`_unseal` is called."""

    def __init__(self, cases: Sequence[Case]):
        self.__cases = tuple(cases)
        self.opened = False

    def __len__(self) -> int:
        return len(self.__cases)

    def __iter__(self):
        raise SealedError("test split is sealed until the final report")

    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.__cases)

    def _unseal(self) -> tuple[Case, ...]:
        self.opened = True
        return self.__cases


@dataclass
class DataSplit:
    train: tuple[Case, ...]
    validation: tuple[Case, ...]
    test: SealedCases

    def __post_init__(self) -> None:
        names = [c.name for c in self.train] + [c.name for c in self.validation] + list(self.test.names())
        if len(set(names)) != len(names):
            raise SplitError("splits must be disjoint")
        if not self.validation:
            raise SplitError("validation split is empty")
        if not len(self.test):
            raise SplitError("test split is empty")

    @staticmethod
    def stratum_key(sc: Scenario) -> tuple:
        """Dominant (class mix, weather) signature used to stratify scenarios."""
        classes = tuple(sorted({r.class_id for r in sc.requests}))
        weather = tuple(sorted({w.label for w in sc.weather})) or ("clear",)
        return classes, weather

    @classmethod
    def stratified(
        cls,
        scenarios: Sequence[tuple[str, Scenario]],
        seed: int = 0,
        config: RelaxConfig = RelaxConfig(),
        fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
    ) -> "DataSplit":
        """Split scenarios stratum by stratum, then relax them.

        Each stratum's scenarios are shuffled and dealt round-robin into
        (validation, test, train) first, so with three or more per stratum
        every split sees every stratum. ``wait_scale`` is calibrated on the
        train cases only.
        """
        if len(scenarios) < 3:
            raise SplitError("at least 3 scenarios are needed for a train/validation/test split")
        rng = np.random.default_rng(seed)
        groups: dict[tuple, list[tuple[str, Scenario]]] = {}
        for name, sc in sorted(scenarios, key=lambda p: p[0]):
            groups.setdefault(cls.stratum_key(sc), []).append((name, sc))
        parts: dict[str, list[tuple[str, Scenario]]] = {"validation": [], "test": [], "train": []}
        cum = np.cumsum(fractions)
        for key in sorted(groups, key=repr):
            members = groups[key]
            order = rng.permutation(len(members))
            for pos, idx in enumerate(order):
                if pos < 3:
                    target = ("validation", "test", "train")[pos]
                else:
                    u = (pos + 0.5) / len(members)
                    target = ("validation", "test", "train")[int(np.searchsorted(cum, u))]
                parts[target].append(members[idx])
        calib = parts["train"]
        if not calib:
            calib = parts["validation"]
            log.warning("train split empty; calibrating on validation scenarios")
        config = calibrate(calib, config)
        relaxed = {k: _relax_all(v, config) for k, v in parts.items()}
        return cls(tuple(relaxed["train"]), tuple(relaxed["validation"]), SealedCases(relaxed["test"]))


def calibrate(train: Sequence[tuple[str, Scenario]], config: RelaxConfig) -> RelaxConfig:
    """Set ``wait_scale`` to the median least-flow mean wait of the train set."""
    from dataclasses import replace

    means = []
    for _, sc in train:
        inst = relax_scenario(sc, config)
        try:
            means.append(float(inst.feasible_start().mean()))
        except InfeasibleError:
            continue
    if not means:
        return config
    return replace(config, wait_scale=max(1.0, float(np.median(means))))


def _relax_all(items: Iterable[tuple[str, Scenario]], config: RelaxConfig) -> list[Case]:
    out = []
    for name, sc in items:
        inst = relax_scenario(sc, config)
        try:
            inst.feasible_start()
        except InfeasibleError as exc:
            log.warning("excluding scenario %s: %s", name, exc)
            continue
        out.append(Case(name, inst))
    return out


# --------------------------------------------------------------------------
# fitness


@dataclass(frozen=True)
class Fitness:
    """Lexicographic fitness: mean wait, then std, then tail, then pad penalty."""

    mean_wait: float
    std_wait: float
    tail: float
    penalty: float

    def key(self) -> tuple[float, float, float, float]:
        return (self.mean_wait, self.std_wait, self.tail, self.penalty)


def compare_fitness(a: Fitness, b: Fitness, tol: float = TIE_TOL) -> int:
    for x, y in zip(a.key(), b.key()):
        if abs(x - y) > tol:
            return -1 if x < y else 1
    return 0


@dataclass(frozen=True)
class CaseResult:
    z: np.ndarray
    F: float
    atoms: np.ndarray


def solve_case(alpha: WeightVector, case: Case) -> CaseResult | None:
    try:
        sol = solve_inner(alpha, case.instance)
    except (InfeasibleError, NonConvergenceError) as exc:
        log.warning("inner solve failed on %s: %s", case.name, exc)
        return None
    return CaseResult(sol.z, sol.F, atoms(sol.z, case.instance))


def _case_fitness(res: CaseResult) -> tuple[float, float, float, float]:
    z = res.z
    return float(z.mean()), float(z.std()), tail_95(z), float(res.atoms[3])


def evaluate(alpha: WeightVector, cases: Sequence[Case]) -> Fitness:
    rows = []
    for case in cases:
        res = solve_case(alpha, case)
        if res is not None:
            rows.append(_case_fitness(res))
    if not rows:
        raise InfeasibleError("inner problem failed on every scenario of the split")
    m = np.mean(np.array(rows), axis=0)
    return Fitness(*map(float, m))


def _evaluate_packed(alpha: np.ndarray, eta: float, cases: Sequence[Case]) -> Fitness:
    return evaluate(WeightVector(alpha, eta), cases)


# --------------------------------------------------------------------------
# outer GA


@dataclass
class OuterTrace:
    best: list[float] = field(default_factory=list)
    mean: list[float] = field(default_factory=list)
    best_genome: list[dict[str, float]] = field(default_factory=list)


@dataclass
class OuterResult:
    best: WeightVector
    fitness: Fitness
    trace: OuterTrace
    initial_population: tuple[WeightVector, ...]
    evaluations: int


def _tournament(fits: Sequence[Fitness], size: int, rng: np.random.Generator) -> int:
    picks = rng.integers(0, len(fits), size=size)
    win = int(picks[0])
    for p in picks[1:].tolist():
        c = compare_fitness(fits[p], fits[win])
        if c < 0 or (c == 0 and p < win):
            win = p
    return win


def _rank(fits: Sequence[Fitness]) -> list[int]:
    def cmp(i: int, j: int) -> int:
        return compare_fitness(fits[i], fits[j]) or (i > j) - (i < j)

    return sorted(range(len(fits)), key=functools.cmp_to_key(cmp))


class _Evaluator:
    def __init__(self, cases: Sequence[Case], workers: int):
        self.cases = tuple(cases)
        self.workers = workers
        self.cache: dict[WeightVector, Fitness] = {}
        self.calls = 0

    def __call__(self, genomes: Sequence[WeightVector]) -> list[Fitness]:
        todo = [g for g in dict.fromkeys(genomes) if g not in self.cache]
        self.calls += len(todo)
        if self.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(self.workers) as ex:
                futs = [ex.submit(_evaluate_packed, g.alpha, g.eta, self.cases) for g in todo]
                results = [f.result() for f in futs]
        else:
            results = [evaluate(g, self.cases) for g in todo]
        self.cache.update(zip(todo, results))
        return [self.cache[g] for g in genomes]


def evolve_weights(
    split: DataSplit,
    p: OuterGaParams = OuterGaParams(),
    on_generation: Callable[[int, OuterTrace], None] | None = None,
) -> tuple[OuterResult, "BilevelReport"]:
    """Evolve the weight vector on validation fitness, then report on test."""
    result = _evolve(split.validation, p, on_generation)
    return result, final_report(result, split, p)


def _genome_rng(seed: int, gen: int, idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, gen, idx]))


def _evolve(
    validation: Sequence[Case], p: OuterGaParams, on_generation: Callable[[int, OuterTrace], None] | None
) -> OuterResult:
    evaluate_all = _Evaluator(validation, p.workers)
    pop = [sample_weights(None, p.kappa, p.m_samp, p.eta, _genome_rng(p.seed, 0, k)) for k in range(p.pop_size)]
    initial = tuple(pop)
    fits = evaluate_all(pop)
    trace = OuterTrace()

    def record(gen: int) -> tuple[WeightVector, Fitness]:
        order = _rank(fits)
        b = order[0]
        trace.best.append(fits[b].mean_wait)
        trace.mean.append(float(np.mean([f.mean_wait for f in fits])))
        trace.best_genome.append(pop[b].as_dict())
        if on_generation is not None:
            on_generation(gen, trace)
        return pop[b], fits[b]

    best, best_fit = record(0)
    for gen in range(1, p.generations + 1):
        order = _rank(fits)
        nxt = [pop[i] for i in order[: p.elite]]
        for k in range(p.elite, p.pop_size):
            # one stream per child slot: parents, crossover and mutation all draw from it
            rng = _genome_rng(p.seed, gen, k)
            a = pop[_tournament(fits, p.tournament_size, rng)]
            b = pop[_tournament(fits, p.tournament_size, rng)]
            child = crossover_weights(a, b, rng) if rng.uniform() < p.crossover_prob else a
            if rng.uniform() < p.mutation_prob:
                child = sample_weights(child, p.kappa, p.m_samp, p.eta, rng)
            nxt.append(child)
        pop = nxt
        fits = evaluate_all(pop)
        best, best_fit = record(gen)
    return OuterResult(best, best_fit, trace, initial, evaluate_all.calls)


# --------------------------------------------------------------------------
# report


PANEL_METRICS = ("mean_wait", "std_wait", "tail_95", "throughput_per_hour")


@dataclass
class BilevelReport:
    best_alpha: dict[str, float]
    eta: float
    validation_fitness: dict[str, float]
    trace: dict[str, list]
    test_mean_wait: float
    panels: list[dict]
    params: dict
    excluded: list[str]
    initial_test_mean_waits: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def condition_panels(results: Sequence[tuple[Case, CaseResult]]) -> list[dict]:
    """Per (class, weather) stratum statistics pooled over the given cases.

    Throughput counts requests whose relaxed take-off ``release + z`` falls
    inside the horizon, per hour of horizon.
    """
    pooled: dict[tuple[int, str], list[tuple[float, bool]]] = {}
    hours = 0.0
    for case, res in results:
        inst = case.instance
        hours += inst.horizon / 3600.0
        for i, lab in enumerate(case.labels):
            done = inst.release[i] + res.z[i] <= inst.horizon
            pooled.setdefault((int(lab[0]), str(lab[1])), []).append((float(res.z[i]), bool(done)))
    panels = []
    for (cid, weather), rows in sorted(pooled.items()):
        z = np.array([r[0] for r in rows])
        panels.append(
            {
                "class_id": cid,
                "weather": weather,
                "n": int(z.size),
                "mean_wait": float(z.mean()),
                "std_wait": float(z.std()),
                "tail_95": tail_95(z),
                "throughput_per_hour": sum(r[1] for r in rows) / hours if hours else 0.0,
            }
        )
    return panels


def final_report(result: OuterResult, split: DataSplit, p: OuterGaParams, with_baseline: bool = True) -> BilevelReport:
    """The only place the test split is opened."""
    test = split.test._unseal()
    solved, excluded = [], []
    for case in test:
        res = solve_case(result.best, case)
        if res is None:
            excluded.append(case.name)
        else:
            solved.append((case, res))
    if not solved:
        raise InfeasibleError("inner problem failed on every test scenario")
    baseline = []
    if with_baseline:
        baseline = [evaluate(g, [c for c, _ in solved]).mean_wait for g in result.initial_population]
    return BilevelReport(
        best_alpha=result.best.as_dict(),
        eta=result.best.eta,
        validation_fitness=asdict(result.fitness),
        trace={"best": result.trace.best, "mean": result.trace.mean},
        test_mean_wait=float(np.mean([r.z.mean() for _, r in solved])),
        panels=condition_panels(solved),
        params=p.as_dict(),
        excluded=excluded,
        initial_test_mean_waits=baseline,
    )


__all__ = [
    "BilevelReport",
    "Case",
    "DataSplit",
    "Fitness",
    "OuterGaParams",
    "OuterResult",
    "SealedCases",
    "SealedError",
    "SplitError",
    "calibrate",
    "compare_fitness",
    "condition_panels",
    "counts_to_fractions",
    "crossover_weights",
    "eta_safe_project",
    "evaluate",
    "evolve_weights",
    "final_report",
    "sample_counts",
    "sample_weights",
]
