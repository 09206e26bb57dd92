"""Token-level GA over prompts with keyword constraints and diversity admission.

A prompt is an ordered tuple of lowercase tokens. Candidates are scored by

    f(p) = sum_k w_k M_k(p) - lam_tok * len(p) - lam_div * Psi(p) - lam_exp * Xi(p)

where ``M_k`` come from a worker evaluator, ``Psi`` is the hinge sum of
embedding similarities above ``delta`` against the rest of the population and
``Xi`` is the fraction of tokens that are in neither keyword set. A new
generation only admits candidates whose cosine to every admitted member is
strictly below ``delta``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

EMBED_DIM = 256
_TOKEN = re.compile(r"[a-z0-9_@.'-]+")


class EvaluationError(RuntimeError):
    def __init__(self, prompt_id: str, message: str):
        self.prompt_id = prompt_id
        super().__init__(f"{message} (prompt {prompt_id})")


def normalize_tokens(tokens: Iterable[str]) -> tuple[str, ...]:
    out = tuple(t.strip().lower() for t in tokens)
    return tuple(t for t in out if t)


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        toks = normalize_tokens(self.tokens)
        if not toks:
            raise ValueError("a prompt needs at least one token")
        if any(any(c.isspace() for c in t) for t in toks):
            raise ValueError("tokens must not contain whitespace")
        object.__setattr__(self, "tokens", toks)

    @classmethod
    def from_text(cls, text: str) -> "Prompt":
        return cls(tuple(_TOKEN.findall(text.lower())))

    @property
    def id(self) -> str:
        return hashlib.blake2b(" ".join(self.tokens).encode(), digest_size=8).hexdigest()

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class KeywordSets:
    ku: frozenset[str] = frozenset()
    ki: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "ku", frozenset(self.ku))
        object.__setattr__(self, "ki", frozenset(self.ki))
        if self.ku & self.ki:
            raise ValueError(f"KU and KI overlap: {sorted(self.ku & self.ki)}")


@dataclass(frozen=True)
class PromptFitnessParams:
    metric_weights: Mapping[str, float] = field(default_factory=lambda: {"accuracy": 0.7, "precision": 0.3})
    lambda_tok: float = 0.002
    lambda_div: float = 0.05
    lambda_exp: float = 0.05
    delta: float = 0.65

    def __post_init__(self) -> None:
        w = dict(self.metric_weights)
        object.__setattr__(self, "metric_weights", w)
        if not w or any(v < 0 for v in w.values()) or abs(sum(w.values()) - 1.0) > 1e-12:
            raise ValueError("metric weights must be nonnegative and sum to 1")
        if min(self.lambda_tok, self.lambda_div, self.lambda_exp) < 0:
            raise ValueError("regularization weights must be >= 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


class WorkerEvaluator(Protocol):
    def evaluate(self, prompt: Prompt, task: object) -> dict[str, float]: ...


# --------------------------------------------------------------------------
# embedding


def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")


def token_slot(token: str, dim: int = EMBED_DIM) -> tuple[int, float]:
    """Index and sign a token contributes to the hashed embedding."""
    h = _token_hash(token)
    return h % dim, (1.0 if (h >> 63) & 1 == 0 else -1.0)


def token_counts(prompt: Prompt, dim: int = EMBED_DIM) -> np.ndarray:
    """Signed hashed counts; integer valued, so dot products are exact."""
    v = np.zeros(dim)
    for t in prompt.tokens:
        i, s = token_slot(t, dim)
        v[i] += s
    if not v.any():
        # tokens cancelled exactly; fall back to the slot of the whole text
        i, s = token_slot(prompt.text, dim)
        v[i] = s
    return v


def embed(prompt: Prompt, dim: int = EMBED_DIM) -> np.ndarray:
    v = token_counts(prompt, dim)
    return v / np.sqrt(v @ v)


class EmbeddingBank:
    """Cache of count vectors keyed by prompt id.

    Cosine is ``a.b / sqrt(|a|^2 |b|^2)`` on the integer counts, which makes a
    prompt's similarity to an identical prompt exactly 1.
    """

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        self.entries: dict[str, tuple[np.ndarray, float]] = {}

    def _entry(self, prompt: Prompt) -> tuple[np.ndarray, float]:
        e = self.entries.get(prompt.id)
        if e is None:
            v = token_counts(prompt, self.dim)
            e = self.entries[prompt.id] = (v, float(v @ v))
        return e

    def vector(self, prompt: Prompt) -> np.ndarray:
        v, sq = self._entry(prompt)
        return v / math.sqrt(sq)

    def __len__(self) -> int:
        return len(self.entries)

    def similarity(self, a: Prompt, b: Prompt) -> float:
        (u, su), (v, sv) = self._entry(a), self._entry(b)
        return float(u @ v) / math.sqrt(su * sv)


def diversity_penalty(p: Prompt, pop: Sequence[Prompt], delta: float, bank: EmbeddingBank) -> float:
    """Hinge sum over population members other than ``p`` itself (by identity)."""
    return float(sum(max(0.0, bank.similarity(p, q) - delta) for q in pop if q is not p))


def untraceable_fraction(p: Prompt, kw: KeywordSets) -> float:
    known = kw.ku | kw.ki
    return sum(t not in known for t in p.tokens) / len(p.tokens)


def prompt_fitness(
    p: Prompt,
    task: object,
    pop: Sequence[Prompt],
    params: PromptFitnessParams,
    worker: WorkerEvaluator,
    kw: KeywordSets,
    bank: EmbeddingBank | None = None,
    metrics: Mapping[str, float] | None = None,
) -> float:
    bank = bank or EmbeddingBank()
    if metrics is None:
        metrics = _call_worker(worker, p, task)
    score = sum(w * float(metrics[k]) for k, w in params.metric_weights.items())
    return (
        score
        - params.lambda_tok * len(p)
        - params.lambda_div * diversity_penalty(p, pop, params.delta, bank)
        - params.lambda_exp * untraceable_fraction(p, kw)
    )


def _call_worker(worker: WorkerEvaluator, p: Prompt, task: object) -> dict[str, float]:
    try:
        m = worker.evaluate(p, task)
    except Exception as exc:  # noqa: BLE001 - re-raised with the prompt id attached
        raise EvaluationError(p.id, f"worker failed: {exc}") from exc
    if any(not (0.0 <= float(v) <= 1.0) for v in m.values()):
        raise EvaluationError(p.id, f"worker returned metrics outside [0, 1]: {m}")
    return dict(m)


# --------------------------------------------------------------------------
# mock worker


@dataclass(frozen=True)
class MockTask:
    """Planted-keyword task: the worker rewards planted tokens, punishes distractors."""

    planted: frozenset[str]
    distractors: frozenset[str] = frozenset()
    vocabulary: tuple[str, ...] = ()
    noise_seed: int = 0
    noise_floor: float = 0.05
    distractor_penalty: float = 0.05
    name: str = "planted-keywords"

    def __post_init__(self) -> None:
        object.__setattr__(self, "planted", frozenset(normalize_tokens(self.planted)))
        object.__setattr__(self, "distractors", frozenset(normalize_tokens(self.distractors)))
        if not self.planted:
            raise ValueError("planted keyword set must be nonempty")
        vocab = normalize_tokens(self.vocabulary) or tuple(sorted(self.planted | self.distractors))
        object.__setattr__(self, "vocabulary", tuple(dict.fromkeys(vocab)))

    @classmethod
    def from_dict(cls, d: Mapping) -> "MockTask":
        return cls(
            planted=frozenset(d["planted"]),
            distractors=frozenset(d.get("distractors", ())),
            vocabulary=tuple(d.get("vocabulary", ())),
            noise_seed=int(d.get("noise_seed", 0)),
            noise_floor=float(d.get("noise_floor", 0.05)),
            distractor_penalty=float(d.get("distractor_penalty", 0.05)),
            name=str(d.get("name", "planted-keywords")),
        )

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "planted": sorted(self.planted),
            "distractors": sorted(self.distractors),
            "vocabulary": list(self.vocabulary),
            "noise_seed": self.noise_seed,
            "noise_floor": self.noise_floor,
            "distractor_penalty": self.distractor_penalty,
        }


class MockWorker:
    """Deterministic stand-in for a model executing prompts.

    ``accuracy = clip(s + noise - penalty * #distractor tokens)`` with
    ``s = 1 - (1 - f)^2`` and ``f`` the covered fraction of planted tokens;
    the noise term ``noise_floor * h * (1 - s)`` uses a per-(seed, prompt)
    hash ``h`` in [0, 1) and vanishes at full coverage. ``precision`` is the
    planted share of the prompt's distinct tokens.
    """

    def __init__(self, task: MockTask):
        self.task = task
        self.calls = 0

    def _noise(self, p: Prompt) -> float:
        h = hashlib.blake2b(f"{self.task.noise_seed}:{p.text}".encode(), digest_size=8).digest()
        return int.from_bytes(h, "little") / 2.0**64

    def evaluate(self, prompt: Prompt, task: object = None) -> dict[str, float]:
        self.calls += 1
        t = self.task
        distinct = set(prompt.tokens)
        f = len(distinct & t.planted) / len(t.planted)
        s = 1.0 - (1.0 - f) ** 2
        n_bad = sum(tok in t.distractors for tok in prompt.tokens)
        acc = s + t.noise_floor * self._noise(prompt) * (1.0 - s) - t.distractor_penalty * n_bad
        prec = len(distinct & t.planted) / len(distinct)
        return {"accuracy": min(1.0, max(0.0, acc)), "precision": prec}


def mock_worker(task: MockTask) -> MockWorker:
    return MockWorker(task)


class ExternalWorker:
    """Adapter point for a real model endpoint; not shipped."""

    def __init__(self, endpoint: str):
        self.endpoint = endpoint

    def evaluate(self, prompt: Prompt, task: object) -> dict[str, float]:
        raise NotImplementedError("external workers are not bundled; implement evaluate() for your endpoint")


# --------------------------------------------------------------------------
# keyword statistics


def quartile_keywords(
    ranked: Sequence[Prompt], threshold: float = 1.0
) -> KeywordSets:
    """KU/KI from add-one log-odds of document frequency, top vs bottom quartile.

    ``ranked`` is best first. A token with log-odds >= ``threshold`` joins KU,
    <= ``-threshold`` joins KI.
    """
    n = len(ranked)
    if n < 2:
        return KeywordSets()
    q = max(1, math.ceil(n / 4))
    top, bottom = ranked[:q], ranked[-q:]
    vocab = sorted({t for p in top for t in p.tokens} | {t for p in bottom for t in p.tokens})
    ku, ki = set(), set()
    for tok in vocab:
        a = sum(tok in p.tokens for p in top)
        b = sum(tok in p.tokens for p in bottom)
        lo = math.log((a + 1) / (len(top) - a + 1)) - math.log((b + 1) / (len(bottom) - b + 1))
        if lo >= threshold:
            ku.add(tok)
        elif lo <= -threshold:
            ki.add(tok)
    return KeywordSets(frozenset(ku), frozenset(ki))


# --------------------------------------------------------------------------
# operators


def segment_crossover(a: Prompt, b: Prompt, rng: np.random.Generator) -> Prompt:
    """Head segment of ``a`` joined to a tail segment of ``b``."""
    i = int(rng.integers(1, len(a) + 1))
    j = int(rng.integers(0, len(b)))
    return Prompt(a.tokens[:i] + b.tokens[j:])


def keyword_mutation(
    p: Prompt, kw: KeywordSets, vocabulary: Sequence[str], rng: np.random.Generator, max_len: int = 24
) -> Prompt:
    """Insert a KU token, delete a KI token, or replace a non-KU token.

    Never inserts a KI token and never removes a KU token.
    """
    toks = list(p.tokens)
    allowed = [t for t in vocabulary if t not in kw.ki]
    ku = sorted(kw.ku)
    op = int(rng.integers(0, 3))
    if op == 1:
        bad = [i for i, t in enumerate(toks) if t in kw.ki]
        if bad and len(toks) > 1:
            del toks[bad[int(rng.integers(0, len(bad)))]]
            return Prompt(tuple(toks))
        op = 0
    if op == 0 and len(toks) < max_len:
        pool = ku if ku and rng.uniform() < 0.5 else allowed
        if pool:
            toks.insert(int(rng.integers(0, len(toks) + 1)), pool[int(rng.integers(0, len(pool)))])
            return Prompt(tuple(toks))
    free = [i for i, t in enumerate(toks) if t not in kw.ku]
    if free and allowed:
        toks[free[int(rng.integers(0, len(free)))]] = allowed[int(rng.integers(0, len(allowed)))]
    return Prompt(tuple(toks))


# --------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class PromptGaParams:
    generations: int = 40
    pop_size: int = 16
    crossover_prob: float = 0.7
    mutation_prob: float = 0.6
    elite: int = 2
    tournament_size: int = 3
    seed: int = 0
    max_len: int = 24
    keyword_threshold: float = 1.0

    def __post_init__(self) -> None:
        if self.generations < 0 or self.pop_size < 2 or self.tournament_size < 1:
            raise ValueError("generations >= 0, pop_size >= 2, tournament_size >= 1 required")
        if not 0 <= self.elite < self.pop_size:
            raise ValueError("elite must lie in [0, pop_size)")


@dataclass
class PromptTraceRow:
    generation: int
    best: float
    mean: float
    ku_size: int
    ki_size: int


@dataclass
class PromptEvolutionResult:
    best: Prompt
    best_fitness: float
    population: tuple[Prompt, ...]
    fitness: tuple[float, ...]
    keywords: KeywordSets
    trace: list[PromptTraceRow]
    warnings: list[str] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["generation,best,mean,ku_size,ki_size"]
        lines += [f"{r.generation},{r.best:.10g},{r.mean:.10g},{r.ku_size},{r.ki_size}" for r in self.trace]
        return "\n".join(lines) + "\n"


def admissible(candidate: Prompt, accepted: Sequence[Prompt], delta: float, bank: EmbeddingBank) -> bool:
    return all(bank.similarity(candidate, q) < delta for q in accepted)


class _Scorer:
    def __init__(self, task, params: PromptFitnessParams, worker: WorkerEvaluator, bank: EmbeddingBank):
        self.task, self.params, self.worker, self.bank = task, params, worker, bank
        self.metric_cache: dict[str, dict[str, float]] = {}

    def __call__(self, pop: Sequence[Prompt], kw: KeywordSets) -> list[float]:
        out = []
        for p in pop:
            m = self.metric_cache.get(p.id)
            if m is None:
                m = self.metric_cache[p.id] = _call_worker(self.worker, p, self.task)
            out.append(prompt_fitness(p, self.task, pop, self.params, self.worker, kw, self.bank, m))
        return out


def _rank(fit: Sequence[float]) -> list[int]:
    return sorted(range(len(fit)), key=lambda i: (-fit[i], i))


def evolve_prompts(
    task,
    seed_pop: Sequence[Prompt],
    params: PromptFitnessParams,
    ga: PromptGaParams,
    worker: WorkerEvaluator,
    vocabulary: Sequence[str] = (),
) -> PromptEvolutionResult:
    if not seed_pop:
        raise ValueError("seed population is empty")
    rng = np.random.default_rng(ga.seed)
    bank = EmbeddingBank()
    score = _Scorer(task, params, worker, bank)
    vocab = tuple(
        dict.fromkeys(list(vocabulary) + list(getattr(task, "vocabulary", ())) + [t for p in seed_pop for t in p.tokens])
    )
    notes: list[str] = []

    pop: list[Prompt] = []
    for p in seed_pop:
        if admissible(p, pop, params.delta, bank):
            pop.append(p)
        if len(pop) == ga.pop_size:
            break
    kw = KeywordSets()
    attempts = 0
    while len(pop) < ga.pop_size and attempts < 100 * ga.pop_size:
        attempts += 1
        c = keyword_mutation(pop[int(rng.integers(0, len(pop)))], kw, vocab, rng, ga.max_len)
        if admissible(c, pop, params.delta, bank):
            pop.append(c)

    fit = score(pop, kw)
    order = _rank(fit)
    kw = quartile_keywords([pop[i] for i in order], ga.keyword_threshold)
    best, best_fit = pop[order[0]], fit[order[0]]
    trace = [PromptTraceRow(0, best_fit, float(np.mean(fit)), len(kw.ku), len(kw.ki))]

    for gen in range(1, ga.generations + 1):
        order = _rank(fit)
        nxt = [pop[i] for i in order[: ga.elite]]
        attempts = 0
        while len(nxt) < ga.pop_size and attempts < 100 * ga.pop_size:
            attempts += 1
            a = pop[_tournament(fit, ga.tournament_size, rng)]
            if rng.uniform() < ga.crossover_prob:
                b = pop[_tournament(fit, ga.tournament_size, rng)]
                child = segment_crossover(a, b, rng)
                if len(child) > ga.max_len:
                    child = Prompt(child.tokens[: ga.max_len])
            else:
                child = a
            if rng.uniform() < ga.mutation_prob or child in nxt:
                child = keyword_mutation(child, kw, vocab, rng, ga.max_len)
            if admissible(child, nxt, params.delta, bank):
                nxt.append(child)
        if len(nxt) < ga.pop_size:
            msg = f"generation {gen}: admission stalled at {len(nxt)}/{ga.pop_size}; keeping best parent"
            log.warning(msg)
            notes.append(msg)
            if pop[order[0]] not in nxt and admissible(pop[order[0]], nxt, params.delta, bank):
                nxt.append(pop[order[0]])
        pop = nxt
        fit = score(pop, kw)
        order = _rank(fit)
        kw = quartile_keywords([pop[i] for i in order], ga.keyword_threshold)
        if fit[order[0]] > best_fit:
            best, best_fit = pop[order[0]], fit[order[0]]
        trace.append(PromptTraceRow(gen, best_fit, float(np.mean(fit)), len(kw.ku), len(kw.ki)))

    return PromptEvolutionResult(best, best_fit, tuple(pop), tuple(fit), kw, trace, notes)


def _tournament(fit: Sequence[float], size: int, rng: np.random.Generator) -> int:
    picks = rng.integers(0, len(fit), size=size).tolist()
    return min(picks, key=lambda i: (-fit[i], i))


def load_task(text: str) -> tuple[MockTask, list[Prompt]]:
    """Parse a task document: the mock task fields plus ``seed_prompts``."""
    d = json.loads(text)
    task = MockTask.from_dict(d)
    seeds = [Prompt.from_text(s) for s in d.get("seed_prompts", [])]
    return task, seeds


__all__ = [
    "EMBED_DIM",
    "EmbeddingBank",
    "EvaluationError",
    "ExternalWorker",
    "KeywordSets",
    "MockTask",
    "MockWorker",
    "Prompt",
    "PromptEvolutionResult",
    "PromptFitnessParams",
    "PromptGaParams",
    "WorkerEvaluator",
    "admissible",
    "diversity_penalty",
    "embed",
    "evolve_prompts",
    "keyword_mutation",
    "load_task",
    "mock_worker",
    "prompt_fitness",
    "quartile_keywords",
    "segment_crossover",
    "token_counts",
    "token_slot",
    "untraceable_fraction",
]
