"""Independent reference implementations used by the test suite.

None of these import the package's kernels or scheduler code; they work from
the documented rules directly so a shared bug cannot hide.
"""
from __future__ import annotations

import bisect
import itertools
import math
from decimal import Decimal, getcontext

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from vertievo.convex import RelaxedInstance
from vertievo.scenario import ClassSpec, GenerationSpec, UavRequest, WeatherRegime, assemble


# --------------------------------------------------------------------------
# scenarios


def random_spec(rng: np.random.Generator, horizon: int = 900, n_classes: int = 3, weather: bool = True) -> GenerationSpec:
    classes = tuple(
        ClassSpec(
            c + 1,
            rate=float(rng.uniform(0.005, 0.04)),
            pad_count=int(rng.integers(1, 4)),
            separation=int(rng.integers(0, 20)),
            service_demand=int(rng.choice([20, 30, 45, 75])),
            base_weight=float(rng.uniform(0.3, 1.0)),
        )
        for c in range(n_classes)
    )
    regimes = ()
    if weather:
        a = int(rng.integers(0, horizon // 2))
        regimes = (WeatherRegime(a, a + horizon // 3, float(rng.uniform(1, 3)), float(rng.uniform(1, 2)), "storm"),)
    return GenerationSpec(horizon=horizon, classes=classes, seed=int(rng.integers(1 << 30)), weather=regimes, bin_width=60)


def tiny_scenario(rng: np.random.Generator, n: int, span: int = 120):
    """Hand-sized instance: explicit releases, shared pads, weather."""
    spec = random_spec(rng, horizon=240, n_classes=2)
    reqs = sorted(
        (int(rng.integers(0, span)), int(rng.integers(1, 3)), int(rng.choice([20, 30, 40]))) for _ in range(n)
    )
    return assemble(spec, [UavRequest(i, c, t, d) for i, (t, c, d) in enumerate(reqs)])


# --------------------------------------------------------------------------
# round robin


def rr_replay(scenario, quantum: int = 30) -> np.ndarray:
    """Event-clock replay of the round-robin rules, one class at a time.

    Classes own disjoint pads, so their queues never interact. The clock jumps
    to the next pad release or queue entry; at each instant new entries join
    the FIFO queue (arrivals before returning requests), then free pads are
    served in (free time, index) order.
    """
    prof = scenario.pad_weights
    waits = np.zeros(scenario.n, dtype=np.int64)
    for row, cid in enumerate(prof.class_ids):
        npads = scenario.pad_config(cid).pad_count
        free = [0] * npads
        pending = []  # sorted list of (time, kind, seq, idx, remaining)
        seq = 0
        members = [i for i, r in enumerate(scenario.requests) if r.class_id == cid]
        for i in members:
            r = scenario.requests[i]
            bisect.insort(pending, (r.release_time, 0, seq, i, r.service_demand))
            seq += 1
        queue: list[tuple[int, int]] = []
        left = len(members)
        t = 0
        while left:
            while pending and pending[0][0] <= t:
                _, _, _, i, rem = pending.pop(0)
                queue.append((i, rem))
            for pad in sorted((k for k in range(npads) if free[k] <= t), key=lambda k: (free[k], k)):
                if not queue:
                    break
                i, rem = queue.pop(0)
                g = min(quantum, rem)
                b = min(t // prof.bin_width, prof.n_bins - 1)
                free[pad] = t + g + int(prof.separations[row, b])
                if rem - quantum > 0:
                    bisect.insort(pending, (t + g, 1, seq, i, rem - quantum))
                    seq += 1
                else:
                    waits[i] = t - scenario.requests[i].release_time
                    left -= 1
            later = [f for f in free if f > t] + [p[0] for p in pending if p[0] > t]
            if not later:
                break
            t = min(later)
    return waits


# --------------------------------------------------------------------------
# list-scheduling decode and permutation brute force


def _pad_layout(scenario):
    prof = scenario.pad_weights
    cls = np.array([prof.class_ids.index(r.class_id) for r in scenario.requests])
    counts = [scenario.pad_config(c).pad_count for c in prof.class_ids]
    return prof, cls, counts


def timing_by_assignment(scenario, order) -> np.ndarray:
    """Starts under every pad assignment whose picks are earliest-free pads.

    Enumerates the full product of per-class pad choices, keeps assignments in
    which each request lands on a pad that frees no later than any other pad
    of its class, and checks they all yield one start vector.
    """
    prof, cls, counts = _pad_layout(scenario)
    rel = [r.release_time for r in scenario.requests]
    dem = [r.service_demand for r in scenario.requests]
    found = None
    for choice in itertools.product(*(range(counts[cls[i]]) for i in order)):
        free = [[0] * c for c in counts]
        starts = np.zeros(scenario.n, dtype=np.int64)
        ok = True
        for i, k in zip(order, choice):
            f = free[cls[i]]
            if f[k] != min(f):
                ok = False
                break
            s = max(rel[i], f[k])
            f[k] = s + dem[i] + int(prof.separations[cls[i], min(s // prof.bin_width, prof.n_bins - 1)])
            starts[i] = s
        if not ok:
            continue
        if found is None:
            found = starts
        elif not np.array_equal(found, starts):
            raise AssertionError("earliest-free assignments disagree")
    return found


def all_permutation_starts(scenario) -> tuple[np.ndarray, np.ndarray]:
    """(perms, starts) for all n! orders, decoded vectorised over permutations."""
    prof, cls, counts = _pad_layout(scenario)
    n = scenario.n
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    rel = np.array([r.release_time for r in scenario.requests])
    dem = np.array([r.service_demand for r in scenario.requests])
    P = perms.shape[0]
    free = [np.zeros((P, c), dtype=np.int64) for c in counts]
    starts = np.zeros((P, n), dtype=np.int64)
    rows = np.arange(P)
    for pos in range(n):
        idx = perms[:, pos]
        for c in range(len(counts)):
            sel = cls[idx] == c
            if not sel.any():
                continue
            f = free[c][sel]
            k = np.argmin(f, axis=1)
            s = np.maximum(rel[idx[sel]], f[np.arange(f.shape[0]), k])
            b = np.minimum(s // prof.bin_width, prof.n_bins - 1)
            f[np.arange(f.shape[0]), k] = s + dem[idx[sel]] + prof.separations[c, b]
            free[c][sel] = f
            starts[rows[sel], idx[sel]] = s
    return perms, starts


def cost_from_starts(scenario, starts: np.ndarray, w) -> np.ndarray:
    """Weighted cost for each row of start times, from the written definitions."""
    prof = scenario.pad_weights
    rel = np.array([r.release_time for r in scenario.requests])
    waits = (starts - rel).astype(np.float64)
    n = waits.shape[1]
    k = max(1, math.ceil(round(0.05 * n, 9)))
    avg = waits.mean(axis=1)
    std = waits.std(axis=1)
    tail = np.sort(waits, axis=1)[:, n - k:].mean(axis=1)
    if w.pad_weighting == "time":
        pen = prof.weights.copy()
    else:
        base = {c.class_id: c.base_weight for c in scenario.classes}
        pen = np.array([[base[c]] * prof.n_bins for c in prof.class_ids], dtype=np.float64)
    if 1 in prof.class_ids:
        pen[prof.class_ids.index(1)] *= w.class1_penalty_scale
    pen *= w.penalty_scale
    cls = np.array([prof.class_ids.index(r.class_id) for r in scenario.requests])
    bins = np.minimum(starts // prof.bin_width, prof.n_bins - 1)
    penalty = (pen[cls[None, :], bins] * waits).sum(axis=1)
    return w.alpha1 * avg + w.alpha2 * std + w.alpha3 * tail + penalty + w.max_delay_coeff * waits.max(axis=1)


# --------------------------------------------------------------------------
# tail risk and LSE


def ru_cvar(x: np.ndarray, beta: float = 0.95) -> float:
    """Rockafellar-Uryasev: min over nu of nu + E[(x - nu)+] / (1 - beta).

    The objective is piecewise linear with kinks at the samples, so the
    minimum sits at a sample; a bounded scalar search finds the bracket and
    the exact minimum is taken over the neighbouring samples.
    """
    x = np.asarray(x, dtype=np.float64)

    def f(nu):
        return nu + np.maximum(x - nu, 0.0).sum() / ((1.0 - beta) * x.size)

    res = scipy.optimize.minimize_scalar(f, bounds=(float(x.min()), float(x.max())), method="bounded", options={"xatol": 1e-12})
    xs = np.sort(x)
    j = int(np.searchsorted(xs, res.x))
    cand = xs[max(0, j - 3): j + 3]
    return float(min(f(c) for c in cand))


def lse_decimal(values, tau) -> float:
    getcontext().prec = 60
    t = Decimal(repr(float(tau)))
    return float(t * sum((Decimal(repr(float(v))) / t).exp() for v in values).ln())


# --------------------------------------------------------------------------
# planted toy for the outer loop


def planted_instance(k: int, seed: int) -> RelaxedInstance:
    """Blocks of two requests tied by ``z_a + 2 z_b >= h``.

    ``z_a`` is cheap on the pad (load 0.001) and ``z_b`` expensive (0.02), so
    mean-wait-heavy weights push waits onto ``z_b`` while dispersion- or
    tail-heavy weights spread them out. The mean-wait optimum therefore sits
    on weights concentrated on atom 1.
    """
    rng = np.random.default_rng(seed)
    n = 2 * k
    G = np.zeros((k, n))
    A = np.zeros((k, n))
    for b in range(k):
        G[b, 2 * b], G[b, 2 * b + 1] = 1.0, 2.0
        A[b, 2 * b], A[b, 2 * b + 1] = 0.001, 0.02
    return RelaxedInstance(
        release=np.zeros(n),
        load=sp.csr_array(A),
        base_load=np.full(k, 0.3),
        pad_bin_weights=rng.uniform(0.5, 1.5, k),
        flow_G=sp.csr_array(G),
        flow_h=rng.uniform(40, 80, k),
        cvar_width=0.06,
        labels=tuple((1 + i % 2, "clear") for i in range(n)),
    )


def random_instance(rng: np.random.Generator, n: int = 12, rows: int = 4, flow: bool = False) -> RelaxedInstance:
    A = np.where(rng.uniform(size=(rows, n)) < 0.5, rng.uniform(0.0005, 0.004, (rows, n)), 0.0)
    G = h = None
    if flow:
        m = n // 3
        Gd = np.zeros((m, n))
        for r in range(m):
            a, b = rng.choice(n, 2, replace=False)
            Gd[r, a], Gd[r, b] = 1.0, float(rng.uniform(0.5, 2.0))
        G, h = sp.csr_array(Gd), rng.uniform(5, 40, m)
    return RelaxedInstance(
        release=np.sort(rng.uniform(0, 600, n)),
        load=sp.csr_array(A),
        base_load=rng.uniform(0.05, 0.4, rows),
        pad_bin_weights=rng.uniform(0.2, 2.0, rows),
        cvar_width=float(rng.uniform(0.05, 0.5)),
        flow_G=G,
        flow_h=h,
    )


# --------------------------------------------------------------------------
# prompts


VOCAB = (
    "alpha", "beta", "gamma", "schedule", "pads", "wait", "queue", "drone", "class", "fair",
    "fast", "route", "storm", "limit", "delta_v", "spam", "verbose", "joke", "emoji", "filler",
)
PLANTED = frozenset({"alpha", "beta", "gamma"})
DISTRACTORS = frozenset({"spam", "verbose", "joke", "emoji"})


def seed_prompts(seed: int, count: int = 16):
    from vertievo.prompts import Prompt

    rng = np.random.default_rng(1000 + seed)
    neutral = [v for v in VOCAB if v not in PLANTED]
    return [Prompt(tuple(rng.choice(neutral, int(rng.integers(3, 7))))) for _ in range(count)]
