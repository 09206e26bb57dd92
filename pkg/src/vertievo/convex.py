"""Strongly convex relaxed scheduling objective and its barrier Newton solver.

The decision variable ``z`` is the continuous wait vector. Four convex atoms
are built on it:

* ``g1`` mean wait,
* ``g2`` smoothed centred dispersion ``sqrt(|Pz|^2 + eps^2) / sqrt(n)``,
* ``g3`` softplus-smoothed CVaR_0.95 (Rockafellar-Uryasev form, the
  threshold eliminated by an inner scalar solve),
* ``g4`` pad-load penalty ``sum_r w_r * phi(u_r)`` with ``u = A z + b`` and
  ``phi(u) = u^2 / (1 - u)``,

and every nonempty subset ``S`` of them is aggregated by ``LSE_tau``. The
objective is ``F(z; alpha) = sum_S alpha_S H_S(z)`` over the 15 subsets.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.special
import scipy.sparse as sp

from .scenario import Scenario

SUBSETS: tuple[tuple[int, ...], ...] = tuple(
    s for r in range(1, 5) for s in itertools.combinations(range(4), r)
)
SUBSET_NAMES = tuple("{" + ",".join(str(i + 1) for i in s) + "}" for s in SUBSETS)
N_WEIGHTS = len(SUBSETS)
FLOOR_INDEX = SUBSETS.index((3,))  # the strongly convex atom's singleton
PHI_CURVATURE = 2.0  # min of phi'' on [0, 1)


class DomainError(ValueError):
    """Point outside the objective's domain (negative wait or saturated pad)."""


class InfeasibleError(RuntimeError):
    pass


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightVector:
    alpha: np.ndarray
    eta: float

    def __post_init__(self) -> None:
        a = np.asarray(self.alpha, dtype=np.float64)
        object.__setattr__(self, "alpha", a)
        if a.shape != (N_WEIGHTS,):
            raise ValueError(f"alpha must have {N_WEIGHTS} entries")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if np.any(a < 0):
            raise ValueError("alpha must be nonnegative")
        if abs(a.sum() - 1.0) > 1e-12:
            raise ValueError(f"alpha must sum to 1 (got {a.sum()!r})")
        if a[FLOOR_INDEX] < self.eta - 1e-15:
            raise ValueError("alpha on {4} is below the floor eta")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightVector):
            return NotImplemented
        return self.eta == other.eta and np.array_equal(self.alpha, other.alpha)

    def __hash__(self) -> int:
        return hash((self.eta, self.alpha.tobytes()))

    def mass_on(self, atom: int) -> float:
        """Total weight of subsets containing ``atom`` (1-based)."""
        return float(sum(a for a, s in zip(self.alpha, SUBSETS) if atom - 1 in s))

    def as_dict(self) -> dict[str, float]:
        return {name: float(a) for name, a in zip(SUBSET_NAMES, self.alpha)}


def pure_weights(subset_weights: dict[str, float], eta: float) -> WeightVector:
    """Build a weight vector from ``{"{1}": 0.9, "{4}": 0.1}``-style mass."""
    a = np.zeros(N_WEIGHTS)
    for name, v in subset_weights.items():
        a[SUBSET_NAMES.index(name)] = v
    return WeightVector(a, eta)


@dataclass(frozen=True)
class RelaxedInstance:
    """Relaxed scheduling instance over continuous waits ``z``.

    ``load`` (rows x n, nonnegative) and ``base_load`` give per-(pad class,
    time bin) utilizations ``u = load @ z + base_load``. Optional flow
    constraints ``flow_G @ z >= flow_h`` encode pad capacity (a request cannot
    start before the request ``pad_count`` places ahead of it in its class
    has cleared).
    """

    release: np.ndarray
    load: sp.csr_array
    base_load: np.ndarray
    pad_bin_weights: np.ndarray
    u_max: float = 0.95
    tau: float = 1.0
    smooth_eps: float = 1e-6
    cvar_width: float = 0.06
    beta: float = 0.95
    flow_G: sp.csr_array | None = None
    flow_h: np.ndarray | None = None
    labels: tuple[tuple[int, str], ...] = ()
    horizon: float = 3600.0
    wait_scale: float = 60.0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.u_max <= 1:
            raise ValueError("u_max must lie in (0, 1]")
        if self.load.shape != (self.base_load.shape[0], self.n):
            raise ValueError("load map shape mismatch")
        if self.load.nnz and self.load.data.min() < 0:
            raise ValueError("load map coefficients must be nonnegative")
        if np.any(self.base_load < 0) or np.any(self.base_load >= self.u_max):
            raise ValueError("base loads must lie in [0, u_max)")
        if self.pad_bin_weights.shape != self.base_load.shape or np.any(self.pad_bin_weights < 0):
            raise ValueError("pad_bin_weights must be nonnegative, one per load row")
        if self.smooth_eps <= 0 or self.cvar_width <= 0:
            raise ValueError("smoothing parameters must be positive")

    @property
    def n(self) -> int:
        return int(self.release.shape[0])

    @cached_property
    def A(self) -> np.ndarray:
        return self.load.toarray()

    @cached_property
    def G(self) -> np.ndarray | None:
        return None if self.flow_G is None else self.flow_G.toarray()

    @property
    def n_constraints(self) -> int:
        return 0 if self.flow_G is None else int(self.flow_G.shape[0])

    @property
    def u_guard(self) -> float:
        return self.u_max * (1.0 - 1e-9)

    def utilization(self, z: np.ndarray) -> np.ndarray:
        return self.A @ z + self.base_load

    def strictly_feasible(self, z: np.ndarray) -> bool:
        if np.any(z <= 0) or np.any(self.utilization(z) >= self.u_guard):
            return False
        if self.G is not None and np.any(self.G @ z - self.flow_h <= 0):
            return False
        return True

    def feasible_start(self) -> np.ndarray:
        """A strictly feasible point: least flow-feasible waits plus slack."""
        n = self.n
        z = np.zeros(n)
        if self.flow_G is not None and self.flow_G.shape[0]:
            if not _is_forward_difference(self.flow_G):
                return self._phase_one()
            z = _least_flow_point(self.flow_G, self.flow_h, n)
        slack = 1e-3 * max(self.wait_scale, 1.0)
        # strictly increasing slack along index keeps every difference row slack
        z = z + slack * (1.0 + np.arange(n) / max(n, 1))
        if not self.strictly_feasible(z):
            raise InfeasibleError("no strictly feasible starting point (pad load at the flow-feasible waits exceeds u_max)")
        return z

    def _phase_one(self) -> np.ndarray:
        """Maximize the smallest slack by LP (general flow rows)."""
        n, m = self.n, self.n_constraints
        rows = self.base_load.shape[0]
        c = np.zeros(n + 1)
        c[-1] = -1.0
        # -G z + s <= -h ;  -z + s <= 0 ;  A z + s <= u_max - b
        A_ub = np.block([
            [-self.G, np.ones((m, 1))],
            [-np.eye(n), np.ones((n, 1))],
            [self.A, np.ones((rows, 1))],
        ])
        b_ub = np.concatenate([-self.flow_h, np.zeros(n), self.u_guard - self.base_load])
        bounds = [(0, None)] * n + [(None, 1.0)]
        res = scipy.optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
        if res.status != 0 or res.x[-1] <= 0:
            raise InfeasibleError("no strictly feasible starting point")
        z = res.x[:n]
        if not self.strictly_feasible(z):
            raise InfeasibleError("no strictly feasible starting point")
        return z

    def random_start(self, rng: np.random.Generator, spread: float | None = None) -> np.ndarray:
        """A random strictly feasible point.

        The perturbation is nondecreasing along the index, so difference rows
        ``z_i - z_j`` with ``j < i`` stay slack; it is halved until the pad
        loads fit.
        """
        base = self.feasible_start()
        spread = self.wait_scale if spread is None else spread
        if self.flow_G is not None and not _is_forward_difference(self.flow_G):
            # rows with nonnegative coefficients only loosen as z grows
            bump = rng.uniform(0.0, spread, self.n)
        else:
            bump = np.cumsum(rng.uniform(0.0, 2.0 * spread / max(self.n, 1), self.n))
            bump += rng.uniform(0.0, spread)
        for _ in range(60):
            z = base + bump
            if self.strictly_feasible(z):
                return z
            bump *= 0.5
        return base


def _is_forward_difference(G: sp.csr_array) -> bool:
    G = G.tocsr()
    for r in range(G.shape[0]):
        lo, hi = G.indptr[r], G.indptr[r + 1]
        cols, vals = G.indices[lo:hi], G.data[lo:hi]
        if sorted(vals.tolist()) != [-1.0, 1.0] or cols[vals > 0][0] <= cols[vals < 0][0]:
            return False
    return True


def _least_flow_point(G: sp.csr_array, h: np.ndarray, n: int) -> np.ndarray:
    """Componentwise least ``z >= 0`` with ``z_i - z_j >= h`` for difference rows.

    Rows must have the form ``+1 at i, -1 at j`` with ``j < i`` (a forward
    recursion, like Lindley's).
    """
    z = np.zeros(n)
    G = G.tocsr()
    rows_by_target: dict[int, list[tuple[int, float]]] = {}
    for r in range(G.shape[0]):
        lo, hi = G.indptr[r], G.indptr[r + 1]
        cols, vals = G.indices[lo:hi], G.data[lo:hi]
        i = int(cols[vals > 0][0])
        j = int(cols[vals < 0][0])
        rows_by_target.setdefault(i, []).append((j, float(h[r])))
    for i in range(n):
        for j, hr in rows_by_target.get(i, ()):
            z[i] = max(z[i], z[j] + hr)
    return z


# --------------------------------------------------------------------------
# atoms


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


_sigmoid = scipy.special.expit


def cvar_threshold(z: np.ndarray, width: float, beta: float = 0.95) -> float:
    """Root in ``nu`` of ``sum_i sigmoid((z_i - nu)/width) = (1 - beta) n``."""
    n = z.shape[0]
    k = (1.0 - beta) * n
    lo, hi = float(z.min()) - 60.0 * width, float(z.max()) + 60.0 * width

    def f(nu: float) -> tuple[float, float]:
        sig = _sigmoid((z - nu) / width)
        return float(sig.sum()) - k, -float((sig * (1.0 - sig)).sum()) / width

    nu = float(np.partition(z, n - max(1, int(math.ceil(k))))[n - max(1, int(math.ceil(k)))])
    for _ in range(200):
        val, der = f(nu)
        if val > 0:
            lo = nu
        else:
            hi = nu
        if abs(val) <= 1e-13 * k or hi - lo <= 4e-16 * max(1.0, abs(nu)):
            break
        step = nu - val / der if der < 0 else None
        if step is not None and lo < step < hi:
            if abs(step - nu) <= 1e-15 * max(1.0, abs(nu)):
                return step
            nu = step
        else:
            nu = 0.5 * (lo + hi)
    return nu


def smoothed_cvar(z: np.ndarray, width: float, beta: float = 0.95) -> float:
    nu = cvar_threshold(z, width, beta)
    c = 1.0 / ((1.0 - beta) * z.shape[0])
    return nu + c * width * float(_softplus((z - nu) / width).sum())


@dataclass
class AtomDerivatives:
    values: np.ndarray  # (4,)
    grads: np.ndarray  # (4, n)
    hessians: np.ndarray  # (4, n, n)
    utilization: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _check_domain(z: np.ndarray, inst: RelaxedInstance) -> np.ndarray:
    if z.shape != (inst.n,):
        raise ValueError(f"z must have shape ({inst.n},)")
    if np.any(z < 0):
        raise DomainError("waits must be nonnegative")
    u = inst.utilization(z)
    if np.any(u >= inst.u_guard):
        raise DomainError("pad utilization at or above u_max (barrier blow-up)")
    return u


def atoms(z: np.ndarray, inst: RelaxedInstance) -> np.ndarray:
    """Values ``(g1, g2, g3, g4)`` at ``z``."""
    z = np.asarray(z, dtype=np.float64)
    u = _check_domain(z, inst)
    n = inst.n
    r = z - z.mean()
    g2 = math.sqrt(float(r @ r) + inst.smooth_eps**2) / math.sqrt(n)
    g4 = float(inst.pad_bin_weights @ (u * u / (1.0 - u)))
    return np.array([z.mean(), g2, smoothed_cvar(z, inst.cvar_width, inst.beta), g4])


def atom_derivatives(z: np.ndarray, inst: RelaxedInstance) -> AtomDerivatives:
    z = np.asarray(z, dtype=np.float64)
    u = _check_domain(z, inst)
    n = inst.n
    vals = np.empty(4)
    grads = np.empty((4, n))
    hess = np.zeros((4, n, n))

    vals[0] = z.mean()
    grads[0] = 1.0 / n

    r = z - z.mean()
    s = math.sqrt(float(r @ r) + inst.smooth_eps**2)
    rn = math.sqrt(n)
    vals[1] = s / rn
    grads[1] = r / (s * rn)
    P = np.eye(n) - 1.0 / n
    hess[1] = (P / s - np.outer(r, r) / s**3) / rn

    width, beta = inst.cvar_width, inst.beta
    nu = cvar_threshold(z, width, beta)
    c = 1.0 / ((1.0 - beta) * n)
    x = (z - nu) / width
    sig = _sigmoid(x)
    dsig = sig * (1.0 - sig) / width
    vals[2] = nu + c * width * float(_softplus(x).sum())
    grads[2] = c * sig
    hess[2] = c * np.diag(dsig)
    tot = float(dsig.sum())
    if tot > 0:
        hess[2] -= c * np.outer(dsig, dsig) / tot

    w = inst.pad_bin_weights
    one_m = 1.0 - u
    vals[3] = float(w @ (u * u / one_m))
    dphi = 1.0 / one_m**2 - 1.0
    d2phi = 2.0 / one_m**3
    A = inst.A
    grads[3] = A.T @ (w * dphi)
    hess[3] = (A.T * (w * d2phi)) @ A
    return AtomDerivatives(vals, grads, hess, u)


# --------------------------------------------------------------------------
# aggregation


def lse_aggregate(values: Sequence[float] | np.ndarray, tau: float) -> float:
    """``tau * log(sum(exp(v / tau)))`` with a max shift."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("LSE of an empty subset")
    if tau <= 0:
        raise ValueError("tau must be positive")
    m = float(v.max())
    return m + tau * math.log(float(np.exp((v - m) / tau).sum()))


def _lse_weights(v: np.ndarray, tau: float) -> np.ndarray:
    e = np.exp((v - v.max()) / tau)
    return e / e.sum()


_MEMBERS = np.array([[i in S for i in range(4)] for S in SUBSETS])


def _subset_lse(values: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """All 15 ``H_S`` values and their softmax weights (15 x 4, zero off-subset)."""
    v = np.where(_MEMBERS, values[None, :], -np.inf)
    m = v.max(axis=1, keepdims=True)
    e = np.exp((v - m) / tau)
    tot = e.sum(axis=1, keepdims=True)
    return m[:, 0] + tau * np.log(tot[:, 0]), e / tot


def objective(
    z: np.ndarray, alpha: WeightVector, inst: RelaxedInstance, derivatives: bool = True
) -> tuple[float, np.ndarray | None, np.ndarray | None]:
    """``F(z; alpha)`` with exact gradient and Hessian (chain rule over LSE).

    Every ``H_S`` is a function of the four atoms, so the Hessian collapses
    to ``sum_i c_i H_i + J^T M J`` with ``J`` the 4 x n atom Jacobian and
    ``M`` the alpha-weighted sum of the subsets' softmax covariances.
    """
    a = alpha.alpha
    if not derivatives:
        H, _ = _subset_lse(atoms(z, inst), inst.tau)
        return float(a @ H), None, None
    d = atom_derivatives(z, inst)
    H, pi = _subset_lse(d.values, inst.tau)
    c = a @ pi
    J = d.grads
    M = (np.diag(c) - (pi.T * a) @ pi) / inst.tau
    hess = np.tensordot(c, d.hessians, axes=1) + J.T @ M @ J
    return float(a @ H), c @ J, 0.5 * (hess + hess.T)


# --------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class InnerSolution:
    z: np.ndarray
    F: float
    iterations: int
    barrier_stages: int
    history: tuple[float, ...]  # merit value after every Newton step


def _barrier(z: np.ndarray, inst: RelaxedInstance, derivatives: bool = True):
    u = inst.utilization(z)
    su = inst.u_max - u
    val = -float(np.log(z).sum()) - float(np.log(su).sum())
    G = inst.G
    if G is not None:
        sg = G @ z - inst.flow_h
        val -= float(np.log(sg).sum())
    if not derivatives:
        return val, None, None
    A = inst.A
    grad = -1.0 / z + A.T @ (1.0 / su)
    hess = np.diag(1.0 / z**2) + (A.T / su**2) @ A
    if G is not None:
        grad -= G.T @ (1.0 / sg)
        hess += (G.T / sg**2) @ G
    return val, grad, hess


def _newton_direction(g: np.ndarray, H: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H / np.outer(d, d)
    try:
        c = scipy.linalg.cho_factor(Hs, check_finite=False)
        return -scipy.linalg.cho_solve(c, g / d, check_finite=False) / d
    except np.linalg.LinAlgError:
        return -np.linalg.lstsq(Hs, g / d, rcond=None)[0] / d


def solve_inner(
    alpha: WeightVector,
    inst: RelaxedInstance,
    z0: np.ndarray | None = None,
    *,
    tol: float = 1e-8,
    gap_tol: float = 1e-9,
    t0: float = 100.0,
    mu: float = 20.0,
    max_iter: int = 500,
) -> InnerSolution:
    """Damped Newton on ``F + barrier / t`` with Armijo backtracking.

    Each centring stops when the Newton decrement drops below ``tol``;
    ``t`` grows by ``mu`` until ``(#barrier terms) / t < gap_tol``.
    """
    z = inst.feasible_start() if z0 is None else np.asarray(z0, dtype=np.float64).copy()
    if not inst.strictly_feasible(z):
        raise InfeasibleError("starting point is not strictly feasible")
    m_b = inst.n + inst.n_constraints + inst.base_load.shape[0]
    t = t0
    iters = 0
    stages = 0
    history: list[float] = []

    def merit(x: np.ndarray, t: float) -> float:
        return objective(x, alpha, inst, derivatives=False)[0] + _barrier(x, inst, False)[0] / t

    while True:
        stages += 1
        phi = merit(z, t)
        while True:
            _, gF, HF = objective(z, alpha, inst)
            _, gB, HB = _barrier(z, inst)
            g = gF + gB / t
            H = HF + HB / t
            dz = _newton_direction(g, H)
            lam2 = float(-g @ dz)
            if lam2 < 0:  # numerical loss of definiteness; fall back to the gradient
                dz, lam2 = -g, float(g @ g)
            if math.sqrt(lam2) < tol:
                break
            if iters >= max_iter:
                raise NonConvergenceError(f"Newton iteration cap {max_iter} reached (decrement {math.sqrt(lam2):.3e})")
            step = 1.0
            while not inst.strictly_feasible(z + step * dz):
                step *= 0.5
                if step < 1e-20:
                    break
            new = merit(z + step * dz, t) if step >= 1e-20 else phi
            while new > phi - 0.25 * step * lam2 and step >= 1e-20:
                step *= 0.5
                new = merit(z + step * dz, t)
            iters += 1
            if step < 1e-20 or new >= phi:
                # no further decrease representable at this t
                break
            z = z + step * dz
            phi = new
            history.append(phi)
        if m_b / t < gap_tol:
            break
        t *= mu
    F = objective(z, alpha, inst, derivatives=False)[0]
    return InnerSolution(z, F, iters, stages, tuple(history))


# --------------------------------------------------------------------------
# instance construction


@dataclass(frozen=True)
class RelaxConfig:
    u_max: float = 0.95
    tau: float = 1.0
    smooth_eps: float = 1e-6
    wait_scale: float = 60.0
    cvar_rel_width: float = 1e-3
    holding: float = 0.05
    headroom: float = 0.5
    flow_constraints: bool = True


def relax_scenario(scenario: Scenario, cfg: RelaxConfig = RelaxConfig()) -> RelaxedInstance:
    """Continuous relaxation of a vertiport scenario.

    Load rows are the (class, time bin) cells that receive releases. A bin's
    nominal utilization ``rho = demand / (pads * bin_width)`` is mapped to
    the base load ``u_max * rho / (1 + rho)``; each second a request waits
    adds ``holding / (pads * bin_width)`` to its release cell, shrunk where
    needed so the least flow-feasible waits use at most ``headroom`` of the
    remaining capacity.
    """
    arr = scenario.arrays()
    n = scenario.n
    if n == 0:
        raise ValueError("cannot relax an empty scenario")
    bw = arr.bin_width
    pads = np.diff(arr.pad_offset)
    cell = arr.class_index * arr.weights.shape[1] + arr.release // bw
    cells, row_of = np.unique(cell, return_inverse=True)
    rows = cells.shape[0]
    cls = cells // arr.weights.shape[1]
    bins = cells % arr.weights.shape[1]
    cap = pads[cls] * bw
    rho = np.bincount(row_of, weights=arr.demand, minlength=rows) / cap
    base = cfg.u_max * rho / (1.0 + rho)
    coef = cfg.holding / cap[row_of]

    G = h = None
    if cfg.flow_constraints:
        G, h = _flow_rows(scenario)
    load = sp.csr_array((coef, (row_of, np.arange(n))), shape=(rows, n))
    probe = RelaxedInstance(
        release=arr.release.astype(np.float64),
        load=load,
        base_load=base,
        pad_bin_weights=arr.weights[cls, bins],
        u_max=cfg.u_max,
        flow_G=G,
        flow_h=h,
    )
    z_least = _least_flow_point(G, h, n) if G is not None and G.shape[0] else np.zeros(n)
    z_least = z_least + cfg.wait_scale * 1e-2
    used = load @ z_least
    room = cfg.headroom * (cfg.u_max - base)
    shrink = np.where(used > room, room / np.maximum(used, 1e-300), 1.0)
    load = sp.csr_array((coef * shrink[row_of], (row_of, np.arange(n))), shape=(rows, n))
    return RelaxedInstance(
        release=probe.release,
        load=load,
        base_load=base,
        pad_bin_weights=probe.pad_bin_weights,
        u_max=cfg.u_max,
        tau=cfg.tau,
        smooth_eps=cfg.smooth_eps,
        cvar_width=cfg.cvar_rel_width * cfg.wait_scale,
        flow_G=G,
        flow_h=h,
        labels=scenario.condition_labels,
        horizon=float(scenario.horizon),
        wait_scale=cfg.wait_scale,
    )


def _flow_rows(scenario: Scenario) -> tuple[sp.csr_array, np.ndarray]:
    """``z_i - z_j >= demand_j + sep - (r_i - r_j)`` for ``j`` the request
    ``pad_count`` places ahead of ``i`` in its class's release order."""
    arr = scenario.arrays()
    pads = np.diff(arr.pad_offset)
    last_bin = arr.separations.shape[1] - 1
    ri, ci, vals, h = [], [], [], []
    row = 0
    for c in range(pads.shape[0]):
        members = np.flatnonzero(arr.class_index == c)
        members = members[np.lexsort((members, arr.release[members]))]
        k = int(pads[c])
        for pos in range(k, members.shape[0]):
            i, j = int(members[pos]), int(members[pos - k])
            sep = int(arr.separations[c, min(arr.release[j] // arr.bin_width, last_bin)])
            rhs = float(arr.demand[j] + sep - (arr.release[i] - arr.release[j]))
            ri += [row, row]
            ci += [i, j]
            vals += [1.0, -1.0]
            h.append(rhs)
            row += 1
    G = sp.csr_array((vals, (ri, ci)), shape=(row, scenario.n))
    return G, np.array(h)
