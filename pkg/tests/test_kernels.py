import os
import subprocess
import sys

import numpy as np
import pytest

from vertievo import kernels
from vertievo.ga import penalty_matrix, variant_weights
from vertievo.scenario import generate_scenario

from oracles import random_spec

compiled = kernels.compiled()
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def _workload(seed, rows=8):
    rng = np.random.default_rng(seed)
    sc = generate_scenario(random_spec(rng))
    a = sc.arrays()
    orders = np.ascontiguousarray(np.array([rng.permutation(sc.n) for _ in range(rows)], dtype=np.int64).reshape(rows, sc.n))
    pen = np.ascontiguousarray(penalty_matrix(sc, variant_weights("v3")))
    return rng, sc, a, orders, pen


@needs_ext
@pytest.mark.parametrize("seed", range(6))
def test_backends_agree(seed):
    rng, sc, a, orders, pen = _workload(seed)
    if sc.n < 2:
        pytest.skip("empty draw")
    args = (orders, a.release, a.demand, a.class_index, a.pad_offset, a.separations, a.bin_width)
    s_py, p_py = kernels.python.decode_batch(*args)
    s_cy, p_cy = compiled.decode_batch(*args)
    assert np.array_equal(s_py, s_cy) and np.array_equal(p_py, p_cy)
    waits = np.ascontiguousarray(s_py - a.release)
    for k in (1, 3, sc.n):
        assert np.array_equal(kernels.python.wait_moments(waits, k, 120), compiled.wait_moments(waits, k, 120))
    assert np.array_equal(
        kernels.python.penalty_sums(s_py, waits, a.class_index, pen, a.bin_width),
        compiled.penalty_sums(s_py, waits, a.class_index, pen, a.bin_width),
    )
    for _ in range(20):
        lo, hi = sorted(rng.choice(sc.n + 1, 2, replace=False).tolist())
        assert np.array_equal(
            kernels.python.order_crossover(orders[0], orders[1], lo, hi), compiled.order_crossover(orders[0], orders[1], lo, hi)
        )


@needs_ext
def test_tail_selection_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        n = int(rng.integers(1, 40))
        w = rng.integers(0, int(rng.integers(1, 6)), (2, n)).astype(np.int64)
        k = int(rng.integers(1, n + 1))
        assert np.array_equal(compiled.wait_moments(w, k, 2), kernels.python.wait_moments(w, k, 2))


def test_crossover_semantics():
    a = np.array([0, 1, 2, 3, 4, 5], dtype=np.int64)
    b = np.array([5, 3, 1, 0, 4, 2], dtype=np.int64)
    # keep a[2:4] = [2, 3]; fill from b starting after the cut: 4, 2(x), 5, 3(x), 1, 0
    assert kernels.python.order_crossover(a, b, 2, 4).tolist() == [1, 0, 2, 3, 4, 5]
    if compiled is not None:
        assert compiled.order_crossover(a, b, 2, 4).tolist() == [1, 0, 2, 3, 4, 5]


def test_fallback_selected_by_environment():
    code = "from vertievo import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, VERTIEVO_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    env.pop("VERTIEVO_PURE_PYTHON")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == ("cython" if compiled is not None else "python")
