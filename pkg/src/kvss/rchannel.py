"""Finite-space lab for the r-channel lower bound on proxy fidelity.

A labeled decode law mixes n modes with disjoint high-mass basins; an
r-channel proxy routes the n mode labels onto r shared channel distributions.
The lab computes labeled TV exactly, evaluates the closed-form floor
1 - eps - sum of the r largest weights, and searches for the best proxy by
exhaustive routing enumeration with per-channel exact optimization.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.optimize import linprog

MAX_Q = 16
MAX_N = 4


class SizeError(Exception):
    """Instance outside the brute-force regime."""


@dataclass(frozen=True)
class LabeledLaw:
    w: np.ndarray  # mode weights on the simplex
    nu: np.ndarray  # [n, Q] per-mode distributions
    basins: tuple  # disjoint index tuples, one per mode

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        nu = np.asarray(self.nu, dtype=np.float64)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "nu", nu)
        if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
            raise ValueError("mode weights must be on the simplex")
        if nu.shape[0] != w.shape[0]:
            raise ValueError("one distribution per mode required")
        if np.abs(nu.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("each mode law must sum to 1 +- 1e-9")
        flat = [i for b in self.basins for i in b]
        if len(flat) != len(set(flat)):
            raise ValueError("basins must be pairwise disjoint")

    @property
    def n(self):
        return int(self.w.shape[0])

    @property
    def Q(self):
        return int(self.nu.shape[1])

    @property
    def eps(self):
        """Measured separation slack: max_m (1 - nu_m(R_m))."""
        return float(max(1.0 - self.nu[m, list(self.basins[m])].sum()
                         for m in range(self.n)))


@dataclass(frozen=True)
class RChannelProxy:
    routing: tuple  # sigma: mode -> channel
    channels: np.ndarray  # [r, Q]

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        object.__setattr__(self, "channels", ch)
        if np.abs(ch.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("each channel must sum to 1 +- 1e-9")
        if any(not 0 <= s < ch.shape[0] for s in self.routing):
            raise ValueError("routing must map into the channel set")


def _tv(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def labeled_tv(law: LabeledLaw, proxy: RChannelProxy) -> float:
    """TV between the labeled joints: disjoint labels give sum_m w_m tv(nu_m, eta_sigma(m))."""
    if proxy.channels.shape[1] != law.Q:
        raise ValueError("law and proxy disagree on Q")
    return float(sum(law.w[m] * _tv(law.nu[m], proxy.channels[proxy.routing[m]])
                     for m in range(law.n)))


def tv_floor(w, eps, r) -> float:
    """1 - eps - (sum of the r largest weights), clamped at 0."""
    w = np.sort(np.asarray(w, dtype=np.float64))[::-1]
    if r > w.shape[0]:
        raise ValueError(f"r={r} exceeds mode count {w.shape[0]}")
    return max(0.0, float(1.0 - eps - w[:r].sum()))


def _optimal_channel_lp(nus, weights):
    """Channel minimizing sum_m weights[m] * tv(nus[m], eta) over the simplex.

    LP with auxiliary variables t_{m,q} >= |nu_m(q) - eta(q)|; exact.
    """
    m, Q = nus.shape
    # variables: eta (Q) then t (m*Q)
    n_var = Q + m * Q
    c = np.zeros(n_var)
    for j in range(m):
        c[Q + j * Q:Q + (j + 1) * Q] = 0.5 * weights[j]
    A_ub, b_ub = [], []
    for j in range(m):
        for q in range(Q):
            row = np.zeros(n_var)
            row[q] = 1.0
            row[Q + j * Q + q] = -1.0
            A_ub.append(row)
            b_ub.append(nus[j, q])  # eta - t <= nu
            row = np.zeros(n_var)
            row[q] = -1.0
            row[Q + j * Q + q] = -1.0
            A_ub.append(row)
            b_ub.append(-nus[j, q])  # -eta - t <= -nu
    A_eq = np.zeros((1, n_var))
    A_eq[0, :Q] = 1.0
    res = linprog(c, A_ub=np.asarray(A_ub), b_ub=np.asarray(b_ub),
                  A_eq=A_eq, b_eq=[1.0], bounds=[(0, None)] * n_var,
                  method="highs")
    if not res.success:
        raise RuntimeError(f"channel optimization failed: {res.message}")
    eta = np.clip(res.x[:Q], 0.0, None)
    eta /= eta.sum()
    return eta, float(res.fun)


def _simplex_grid(Q, resolution):
    """All grid points on the Q-simplex with the given resolution."""
    steps = int(round(1.0 / resolution))
    out = []

    def rec(prefix, left):
        if len(prefix) == Q - 1:
            out.append(prefix + [left])
            return
        for v in range(left + 1):
            rec(prefix + [v], left - v)

    rec([], steps)
    return np.asarray(out, dtype=np.float64) / steps


def _optimal_channel_grid(nus, weights, resolution):
    grid = _simplex_grid(nus.shape[1], resolution)
    costs = 0.5 * np.einsum("m,gmq->g", weights,
                            np.abs(grid[:, None, :] - nus[None, :, :]))
    best = int(np.argmin(costs))
    return grid[best], float(costs[best])


def _routings(n, r):
    """All maps [n] -> [r], canonicalized so channel labels are used in order."""
    seen = set()
    for sigma in product(range(r), repeat=n):
        relabel = {}
        canon = []
        for s in sigma:
            if s not in relabel:
                relabel[s] = len(relabel)
            canon.append(relabel[s])
        if len(relabel) <= r:
            seen.add(tuple(canon))
    return sorted(seen)


def best_proxy_tv(law: LabeledLaw, r, grid_resolution=0.02, method="lp"):
    """Exhaustive search for the best r-channel proxy; returns (min TV, witness).

    Enumerate routings; for each, the objective separates per channel and the
    per-channel optimum is solved exactly (LP) or by simplex grid enumeration
    (method="grid", only feasible for small Q).
    """
    if law.Q > MAX_Q or law.n > MAX_N:
        raise SizeError(f"brute force limited to Q<={MAX_Q}, n<={MAX_N}")
    if not 1 <= r <= law.n:
        raise ValueError(f"r must be in [1, n={law.n}], got {r}")
    best = None
    for sigma in _routings(law.n, r):
        used = sorted(set(sigma))
        channels = np.zeros((r, law.Q))
        channels[:, 0] = 1.0  # unused channels get an arbitrary valid law
        total = 0.0
        for j in used:
            members = [m for m in range(law.n) if sigma[m] == j]
            nus = law.nu[members]
            weights = law.w[members]
            if method == "lp":
                eta, cost = _optimal_channel_lp(nus, weights)
            elif method == "grid":
                eta, cost = _optimal_channel_grid(nus, weights, grid_resolution)
            else:
                raise ValueError(f"unknown method {method!r}")
            channels[j] = eta
            total += cost
        if best is None or total < best[0] - 1e-15:
            best = (total, RChannelProxy(routing=tuple(sigma), channels=channels))
    return best


def lipschitz_task_gap(L, tv_terms) -> float:
    """Task-metric bound L * (model gap + contamination + estimation)."""
    terms = [float(t) for t in tv_terms]
    if L < 0 or any(t < 0 for t in terms):
        raise ValueError("Lipschitz constant and TV terms must be nonnegative")
    return float(L) * sum(terms)


def random_separated_law(n, Q, eps=0.0, weights=None, seed=0) -> LabeledLaw:
    """Random law with disjoint basins and measured slack exactly eps."""
    if n * 2 > Q:
        raise ValueError(f"need Q >= 2n for nontrivial basins, got n={n}, Q={Q}")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    if weights is None:
        weights = rng.dirichlet(np.ones(n))
    bw = Q // n
    basins = tuple(tuple(range(m * bw, (m + 1) * bw)) for m in range(n))
    nu = np.zeros((n, Q))
    for m in range(n):
        inside = rng.dirichlet(np.ones(bw))
        nu[m, list(basins[m])] = (1.0 - eps) * inside
        if eps > 0:
            out = np.setdiff1d(np.arange(Q), np.asarray(basins[m]))
            nu[m, out] = eps * rng.dirichlet(np.ones(out.size))
    return LabeledLaw(w=np.asarray(weights), nu=nu, basins=basins)


def sweep_rows(n_values=(2, 3, 4), r_values=None, eps_values=(0.0, 0.1),
               instances=3, Q=12, seed=0):
    """Long-format sweep rows: (n, eps, r, instance, floor, min_tv)."""
    rows = []
    for n in n_values:
        for eps in eps_values:
            for inst in range(instances):
                law = random_separated_law(n, Q, eps=eps,
                                           seed=seed + 1000 * n + inst)
                for r in (r_values or range(1, n + 1)):
                    if r > n:
                        continue
                    floor = tv_floor(law.w, law.eps, r)
                    achieved, _ = best_proxy_tv(law, r)
                    rows.append({"n": n, "eps": law.eps, "r": int(r),
                                 "instance": inst, "floor": floor,
                                 "min_tv": achieved})
    return rows
