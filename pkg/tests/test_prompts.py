import hashlib
import itertools

import numpy as np
import pytest

from vertievo.prompts import (
    EMBED_DIM,
    EmbeddingBank,
    EvaluationError,
    ExternalWorker,
    KeywordSets,
    MockTask,
    Prompt,
    PromptFitnessParams,
    PromptGaParams,
    diversity_penalty,
    embed,
    evolve_prompts,
    keyword_mutation,
    load_task,
    mock_worker,
    prompt_fitness,
    quartile_keywords,
    segment_crossover,
)

from oracles import DISTRACTORS, PLANTED, VOCAB, seed_prompts

TASK = MockTask(planted=PLANTED, distractors=DISTRACTORS, vocabulary=VOCAB)
NEUTRAL = [v for v in VOCAB if v not in PLANTED and v not in DISTRACTORS]


def slot(token):
    h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")
    return h % 256, 1 - 2 * (h >> 63)


def test_embedding_identity_and_norm():
    a, b = Prompt.from_text("fair queue for drones"), Prompt.from_text("Fair  QUEUE for drones")
    assert np.array_equal(embed(a), embed(b))
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = Prompt(tuple(rng.choice(VOCAB, int(rng.integers(1, 10)))))
        assert np.linalg.norm(embed(p)) == pytest.approx(1.0, abs=1e-12)
    assert embed(a).shape == (EMBED_DIM,)


def test_single_token_cosine_oracle():
    words = VOCAB + tuple(f"w{i}" for i in range(60))
    for s, t in itertools.combinations(words, 2):
        (i, si), (j, sj) = slot(s), slot(t)
        expect = si * sj if i == j else 0
        assert float(embed(Prompt((s,))) @ embed(Prompt((t,)))) == expect


def test_cancelling_tokens_fall_back():
    # find two tokens on the same slot with opposite signs
    seen = {}
    for k in range(5000):
        i, s = slot(f"t{k}")
        if (i, -s) in seen:
            p = Prompt((seen[(i, -s)], f"t{k}"))
            assert np.linalg.norm(embed(p)) == 1.0
            return
        seen[(i, s)] = f"t{k}"
    pytest.skip("no cancelling pair found")


def test_fitness_reduces_to_weighted_metrics():
    worker = mock_worker(TASK)
    params = PromptFitnessParams(lambda_tok=0.0, lambda_div=0.0, lambda_exp=0.0)
    p = Prompt(("alpha", "queue", "spam"))
    m = worker.evaluate(p)
    f = prompt_fitness(p, TASK, [p], params, worker, KeywordSets())
    assert f == pytest.approx(0.7 * m["accuracy"] + 0.3 * m["precision"], abs=1e-15)


def test_twin_diversity_penalty():
    bank = EmbeddingBank()
    p = Prompt(("fair", "queue"))
    twin = Prompt(("fair", "queue"))
    assert diversity_penalty(p, [p, twin], 0.5, bank) >= 0.5
    assert diversity_penalty(p, [p], 0.5, bank) == 0.0


def test_adding_planted_keyword_helps():
    rng = np.random.default_rng(1)
    worker = mock_worker(TASK)
    params = PromptFitnessParams()
    for _ in range(20):
        toks = list(rng.choice(NEUTRAL, int(rng.integers(2, 6))))
        have = set(rng.choice(sorted(PLANTED), int(rng.integers(0, 3)), replace=False))
        p = Prompt(tuple(toks + sorted(have)))
        add = sorted(PLANTED - have)[0]
        q = Prompt(p.tokens + (add,))
        kw = KeywordSets()
        assert prompt_fitness(q, TASK, [q], params, worker, kw) > prompt_fitness(p, TASK, [p], params, worker, kw)


def test_mock_worker_levels():
    w = mock_worker(TASK)
    assert w.evaluate(Prompt(("gamma", "alpha", "beta")))["accuracy"] == 1.0
    for k in range(20):
        t = MockTask(planted=PLANTED, distractors=DISTRACTORS, vocabulary=VOCAB, noise_seed=k)
        assert mock_worker(t).evaluate(Prompt(("fair", "queue", f"x{k}")))["accuracy"] <= t.noise_floor


def test_mock_worker_monotone_in_coverage():
    rng = np.random.default_rng(2)
    w = mock_worker(TASK)
    rows = []
    for _ in range(50):
        planted = list(rng.choice(sorted(PLANTED), int(rng.integers(0, 4)), replace=False))
        p = Prompt(tuple(planted) + tuple(rng.choice(NEUTRAL, int(rng.integers(1, 5)))))
        rows.append((len(set(planted)), w.evaluate(p)["accuracy"]))
    for (c1, a1), (c2, a2) in itertools.product(rows, rows):
        if c1 < c2:
            assert a1 < a2


def test_worker_failures():
    class Broken:
        def evaluate(self, prompt, task):
            raise OSError("connection reset")

    class OutOfRange:
        def evaluate(self, prompt, task):
            return {"accuracy": 1.5, "precision": 0.0}

    p = Prompt(("fair",))
    for worker in (Broken(), OutOfRange(), ExternalWorker("http://localhost")):
        with pytest.raises(EvaluationError) as err:
            prompt_fitness(p, TASK, [p], PromptFitnessParams(), worker, KeywordSets())
        assert err.value.prompt_id == p.id
    with pytest.raises(NotImplementedError):
        ExternalWorker("x").evaluate(p, TASK)


def test_keyword_sets_disjoint():
    with pytest.raises(ValueError):
        KeywordSets(frozenset({"a"}), frozenset({"a", "b"}))


def test_quartile_keywords():
    good = [Prompt(("alpha", "fair", f"g{i}")) for i in range(4)]
    mid = [Prompt(("fair", f"m{i}")) for i in range(8)]
    bad = [Prompt(("spam", "fair", f"b{i}")) for i in range(4)]
    kw = quartile_keywords(good + mid + bad)
    # 4/4 in the top quartile vs 0/4: log(5) - log(1/5) > 1
    assert kw.ku == {"alpha"} and kw.ki == {"spam"}
    assert quartile_keywords(good[:1]) == KeywordSets()


def test_mutation_respects_keywords():
    rng = np.random.default_rng(3)
    kw = KeywordSets(frozenset({"alpha", "beta"}), frozenset({"spam", "joke"}))
    for _ in range(3000):
        p = Prompt(tuple(rng.choice(VOCAB, int(rng.integers(1, 8)))))
        m = keyword_mutation(p, kw, VOCAB, rng, max_len=10)
        for t in kw.ku:
            assert m.tokens.count(t) >= p.tokens.count(t)
        for t in kw.ki:
            assert m.tokens.count(t) <= p.tokens.count(t)
        assert len(m) <= max(10, len(p))


def test_crossover_is_nonempty():
    rng = np.random.default_rng(4)
    for _ in range(500):
        a = Prompt(tuple(rng.choice(VOCAB, int(rng.integers(1, 6)))))
        b = Prompt(tuple(rng.choice(VOCAB, int(rng.integers(1, 6)))))
        c = segment_crossover(a, b, rng)
        assert c.tokens[0] == a.tokens[0] and len(c) >= 1


def test_zero_generations_returns_best_seed():
    seeds = seed_prompts(0)
    r = evolve_prompts(TASK, seeds, PromptFitnessParams(), PromptGaParams(generations=0), mock_worker(TASK))
    assert r.best in seeds
    assert r.best_fitness == max(r.fitness) and len(r.trace) == 1


def test_final_population_admission_and_keywords():
    params = PromptFitnessParams()
    for seed in range(3):
        r = evolve_prompts(TASK, seed_prompts(seed), params, PromptGaParams(seed=seed, generations=15), mock_worker(TASK))
        bank = EmbeddingBank()
        for a, b in itertools.combinations(r.population, 2):
            assert bank.similarity(a, b) < params.delta
            assert float(embed(a) @ embed(b)) < params.delta + 1e-12
        assert not (r.keywords.ku & r.keywords.ki)
        assert all(b >= a for a, b in zip([t.best for t in r.trace], [t.best for t in r.trace][1:]))


def test_deterministic():
    ga = PromptGaParams(seed=5, generations=10)
    a = evolve_prompts(TASK, seed_prompts(5), PromptFitnessParams(), ga, mock_worker(TASK))
    b = evolve_prompts(TASK, seed_prompts(5), PromptFitnessParams(), ga, mock_worker(TASK))
    assert a.population == b.population and a.trace_csv() == b.trace_csv()


def test_load_task():
    task, seeds = load_task('{"planted": ["Alpha", "beta"], "seed_prompts": ["fair queue", "route fast"]}')
    assert task.planted == {"alpha", "beta"} and [s.text for s in seeds] == ["fair queue", "route fast"]
    assert MockTask.from_dict(task.as_dict()) == task


def test_parameter_validation():
    with pytest.raises(ValueError):
        PromptFitnessParams(metric_weights={"accuracy": 0.5})
    with pytest.raises(ValueError):
        PromptFitnessParams(delta=1.0)
    with pytest.raises(ValueError):
        Prompt(())
    with pytest.raises(ValueError):
        evolve_prompts(TASK, [], PromptFitnessParams(), PromptGaParams(), mock_worker(TASK))
