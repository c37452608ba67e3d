"""Stage I access-support scoring and its formal toolkit.

Scorers estimate, per key position i, the mass that future decode queries
will put on i, from the observable prefill attention alone.  The toolkit
side holds the exact ordered-substitution decomposition of the scoring
error, total-variation proxy gaps, the projection residual, and the
closed-form exposure-bias calculators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contract import SelectorContract, ContractError, contract_fingerprint

STAGE_TAGS = ("stage1", "stage2_block_broadcast", "combined")


@dataclass(frozen=True)
class ScoreVector:
    values: np.ndarray  # one real per token index; +inf allowed as reserved sentinel
    stage_tag: str = "stage1"
    contract_fingerprint: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if self.stage_tag not in STAGE_TAGS:
            raise ValueError(f"unknown stage_tag {self.stage_tag!r}")
        if np.isnan(v).any() or np.isneginf(v).any():
            raise ValueError("scores must be finite (+inf reserved-tail sentinel only)")

    def __len__(self):
        return int(self.values.shape[0])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# kvss-score tag={self.stage_tag} "
                    f"fingerprint={self.contract_fingerprint}\n")
            f.write("index,score\n")
            for i, v in enumerate(self.values):
                f.write(f"{i},{format(v, '.17g')}\n")

    @classmethod
    def from_csv(cls, path):
        tag, fp = "stage1", ""
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line.startswith("#"):
                    for tok in line[1:].split():
                        if tok.startswith("tag="):
                            tag = tok[4:]
                        elif tok.startswith("fingerprint="):
                            fp = tok[12:]
                elif line and not line.startswith("index"):
                    _, v = line.split(",")
                    rows.append(float(v))
        return cls(values=np.asarray(rows), stage_tag=tag, contract_fingerprint=fp)

    def to_binary(self, path):
        with open(path, "wb") as f:
            f.write(f"# kvss-score tag={self.stage_tag} "
                    f"fingerprint={self.contract_fingerprint}\n".encode())
            f.write(self.values.astype("<f8").tobytes())

    @classmethod
    def from_binary(cls, path):
        with open(path, "rb") as f:
            header = f.readline().decode().strip()
            data = np.frombuffer(f.read(), dtype="<f8")
        tag, fp = "stage1", ""
        for tok in header[1:].split():
            if tok.startswith("tag="):
                tag = tok[4:]
            elif tok.startswith("fingerprint="):
                fp = tok[12:]
        return cls(values=data.copy(), stage_tag=tag, contract_fingerprint=fp)


@dataclass(frozen=True)
class ProxyBank:
    """Weighted query set standing in for unseen decode queries."""

    queries: np.ndarray  # sorted union of tail and anchor indices
    weights: np.ndarray  # r_u, normalized over queries
    tail: tuple = ()
    anchors: tuple = ()
    groups: tuple = ()  # partition of positions into M groups (index tuples)
    tau_q: float = float("inf")

    def __post_init__(self):
        q = np.asarray(self.queries, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "queries", q)
        object.__setattr__(self, "weights", w)
        if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
            raise ValueError("proxy weights must be nonnegative and sum to 1")
        if not self.groups:
            object.__setattr__(self, "groups", (tuple(range(q.size)),))
        seen = sorted(i for g in self.groups for i in g)
        if seen != list(range(q.size)):
            raise ValueError("groups must partition the query positions")

    @property
    def n_groups(self):
        return len(self.groups)


def build_proxy_bank(T, tail_width, anchors=(), tau_q=float("inf"), groups=None):
    """Recency-weighted tail stratum plus optional anchor queries.

    r~_u = exp(-(T-1-u)/tau_q) on the tail (the last query gets weight 1),
    1 on anchors, then normalized.
    """
    if tail_width < 1:
        raise ValueError(f"tail_width must be >= 1, got {tail_width}")
    anchors = tuple(sorted(int(a) for a in anchors))
    if any(a < 0 or a >= T for a in anchors):
        raise ValueError("anchor index out of range [0, T)")
    tail = tuple(range(T - tail_width, T))
    queries, raw = [], []
    for a in anchors:
        if a not in tail:
            queries.append(a)
            raw.append(1.0)
    for u in tail:
        queries.append(u)
        raw.append(1.0 if u in anchors else float(np.exp(-(T - 1 - u) / tau_q)))
    order = np.argsort(queries, kind="stable")
    queries = np.asarray(queries, dtype=np.int64)[order]
    raw = np.asarray(raw, dtype=np.float64)[order]
    w = raw / raw.sum()
    g = None
    if groups is not None:
        pos_of = {int(q): p for p, q in enumerate(queries)}
        g = tuple(tuple(pos_of[int(u)] for u in grp) for grp in groups)
    return ProxyBank(queries=queries, weights=w, tail=tail, anchors=anchors,
                     groups=g if g is not None else (), tau_q=tau_q)


def _pooled_attention(capture, contract):
    """sum_l beta_l * (head-summed A_l) -> [T, T] pooled matrix."""
    lw = contract.layer_weight_map()
    for l in lw:
        if not 0 <= l < capture.L:
            raise ContractError(f"layer {l} outside capture with L={capture.L}")
    pooled = np.zeros((capture.T, capture.T))
    for l, beta in lw.items():
        pooled += beta * capture.attention[l].sum(axis=0, dtype=np.float64)
    return pooled


def score_cumulative(capture, contract) -> ScoreVector:
    """s_i = sum_l beta_l sum_h sum_{u >= i} A_{l,h}[u, i]."""
    pooled = _pooled_attention(capture, contract)
    return ScoreVector(values=pooled.sum(axis=0),
                       contract_fingerprint=contract_fingerprint(contract))


def observer_count(T):
    """N_i = T - i: causal queries that can see position i (self included)."""
    return np.arange(T, 0, -1, dtype=np.float64)


def score_count_debiased(capture, contract) -> ScoreVector:
    """Cumulative score divided by the observer count N_i = T - i."""
    cum = score_cumulative(capture, contract)
    return ScoreVector(values=cum.values / observer_count(capture.T),
                       contract_fingerprint=cum.contract_fingerprint)


def pool_scores(values, kernel):
    """Edge-clamped mean pooling along the key axis with an odd kernel."""
    if kernel == 1:
        return np.asarray(values, dtype=np.float64)
    half = kernel // 2
    T = len(values)
    out = np.empty(T)
    for i in range(T):
        lo, hi = max(0, i - half), min(T, i + half + 1)
        out[i] = np.sum(values[lo:hi]) / kernel
    return out


def score_obs_window(capture, contract) -> ScoreVector:
    """Observation-window scorer: last-W-query mass, kernel-pooled.

    Reserved-tail indices are given a +inf sentinel so downstream top-k
    always keeps them.
    """
    W = contract.observation_window
    if W < 1 or W > capture.T:
        raise ContractError(f"observation_window must be in [1, T], got {W}")
    pooled = _pooled_attention(capture, contract)
    s = pooled[capture.T - W:, :].sum(axis=0)
    s = pool_scores(s, contract.pooling_kernel)
    if contract.reserved_tail > 0:
        s[capture.T - contract.reserved_tail:] = np.inf
    return ScoreVector(values=s, contract_fingerprint=contract_fingerprint(contract))


def score_decode_proximal(capture, contract, bank: ProxyBank) -> ScoreVector:
    """s_i = sum_u r_u sum_l beta_l sum_h A_{l,h}[u, i]."""
    if bank.queries.size and bank.queries.max() >= capture.T:
        raise ValueError("proxy bank query index outside capture")
    pooled = _pooled_attention(capture, contract)
    s = bank.weights @ pooled[bank.queries, :]
    return ScoreVector(values=s, contract_fingerprint=contract_fingerprint(contract))


@dataclass(frozen=True)
class AccessEstimatorSpec:
    """One access estimator: query law, exposure correction, attention pooling.

    All estimators share a zero-extended query domain so decompositions can
    substitute one component at a time.
    """

    domain: np.ndarray  # query indices (the zero-extended shared domain)
    query_law: np.ndarray  # q over the domain, sums to 1
    pooling: np.ndarray  # beta[l, h, u] per-(layer, head, query) weights
    exposure: object = None  # callable (i, domain) -> d(i, u) array; None = 1

    def __post_init__(self):
        object.__setattr__(self, "domain", np.asarray(self.domain, dtype=np.int64))
        object.__setattr__(self, "query_law", np.asarray(self.query_law, dtype=np.float64))
        object.__setattr__(self, "pooling", np.asarray(self.pooling, dtype=np.float64))
        if abs(self.query_law.sum() - 1.0) > 1e-9:
            raise ValueError("query law must sum to 1 +- 1e-9")

    def exposure_at(self, i):
        if self.exposure is None:
            return np.ones(self.domain.size)
        return np.asarray(self.exposure(i, self.domain), dtype=np.float64)

    def pooled_access(self, capture, i):
        """f(u, i) = sum_{l,h} beta_{l,h}(u) A_{l,h}[u, i] over the domain."""
        A = capture.attention[:, :, self.domain, i].astype(np.float64)  # [L, H, U]
        return np.einsum("lhu,lhu->u", self.pooling, A)

    def evaluate(self, capture, i):
        """u_acc(i) = sum_u q(u) d(i, u) f(u, i)."""
        return float(np.sum(self.query_law * self.exposure_at(i)
                            * self.pooled_access(capture, i)))


def decompose_access_error(est: AccessEstimatorSpec, ref: AccessEstimatorSpec,
                           capture, i):
    """Exact ordered-substitution split of u_acc_est(i) - u_acc_ref(i).

    delta_phase substitutes the query law, delta_exp the exposure correction,
    xi_acc the pooled access; the three telescope exactly to the total.
    """
    if not np.array_equal(est.domain, ref.domain):
        raise ValueError("estimators must share the zero-extended query domain")
    q_hat, q_ref = est.query_law, ref.query_law
    d_hat, d_ref = est.exposure_at(i), ref.exposure_at(i)
    f_hat, f_ref = est.pooled_access(capture, i), ref.pooled_access(capture, i)
    delta_phase = float(np.sum((q_hat - q_ref) * d_ref * f_ref))
    delta_exp = float(np.sum(q_hat * (d_hat - d_ref) * f_ref))
    xi_acc = float(np.sum(q_hat * d_hat * (f_hat - f_ref)))
    return delta_phase, delta_exp, xi_acc


def stage2_error_expansion(est, ref, value_est, value_ref, capture, i):
    """Split of Delta_est(i) - Delta_ref(i) for Delta = u_acc * u_val.

    Returns (u_val_ref * access error, u_acc_ref * xi_val, second-order R2);
    the three sum exactly to the product difference.
    """
    terms = decompose_access_error(est, ref, capture, i)
    access_err = sum(terms)
    xi_val = value_est - value_ref
    u_acc_ref = ref.evaluate(capture, i)
    linear_access = value_ref * access_err
    linear_value = u_acc_ref * xi_val
    r2 = access_err * xi_val
    return linear_access, linear_value, r2


def tv(p, q) -> float:
    """Total variation distance (1/2) * sum |p - q| between finite laws."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("inputs must sum to 1 +- 1e-9")
    return float(0.5 * np.abs(p - q).sum())


@dataclass(frozen=True)
class GapReport:
    tv_tail_proxy: float
    tv_star_tail: float | None = None
    tv_star_proxy: float | None = None
    triangle_ok: bool | None = None


def tail_k_proxy_gap(p_T, proxy, p_star=None) -> GapReport:
    """TV gaps among true tail law, proxy law, and optional decode law."""
    gap = tv(p_T, proxy)
    if p_star is None:
        return GapReport(tv_tail_proxy=gap)
    a = tv(p_star, p_T)
    b = tv(p_star, proxy)
    return GapReport(tv_tail_proxy=gap, tv_star_tail=a, tv_star_proxy=b,
                     triangle_ok=bool(b <= a + gap + 1e-12))


def projection_residual(kept, p_T) -> float:
    """eta_proj = 1 - p_T(kept); 1 when the kept set misses all mass."""
    p = np.asarray(p_T, dtype=np.float64)
    idx = np.asarray(getattr(kept, "indices", kept), dtype=np.int64)
    return float(1.0 - p[idx].sum())


def harmonic_cumulative_expectation(T, i) -> float:
    """H_T - H_{i-1} for 1-indexed position i."""
    if not 1 <= i <= T:
        raise ValueError(f"need 1 <= i <= T, got i={i}, T={T}")
    return float(np.sum(1.0 / np.arange(i, T + 1)))


def effective_count(N, lam, beta_pos=None):
    """(N_eff, r(N)) with N_eff = (1 - e^{-lam N}) / (1 - e^{-lam}).

    beta_pos is accepted for signature compatibility with weighted variants;
    it cancels in the ratio and is unused here.
    """
    if lam <= 0 or N < 1:
        raise ValueError(f"need lam > 0 and N >= 1, got lam={lam}, N={N}")
    n_eff = float((1.0 - np.exp(-lam * N)) / (1.0 - np.exp(-lam)))
    return n_eff, n_eff / N


def mse_optimal_count(S, sigma_A, c=1.0):
    """Integer minimizer of MSE(N) = (1 - 1/N)^2 S^2 + c sigma^2 / N.

    Finite branch when 2 S^2 > c sigma^2: integer neighbor of the continuous
    minimizer 2S^2 / (2S^2 - c sigma^2); otherwise the infinity sentinel
    (MSE keeps decreasing in N).
    """
    if sigma_A <= 0:
        raise ValueError(f"sigma_A must be > 0, got {sigma_A}")
    denom = 2.0 * S * S - c * sigma_A * sigma_A
    if denom <= 0:
        return float("inf")
    n_star = 2.0 * S * S / denom

    def mse(N):
        return (1.0 - 1.0 / N) ** 2 * S * S + c * sigma_A * sigma_A / N

    lo = max(1, int(np.floor(n_star)))
    hi = lo + 1
    return lo if mse(lo) <= mse(hi) else hi


def correlated_variance_factor(rho, N) -> float:
    """Gamma(N) = 1 + 2 sum_{k<N} (1 - k/N) rho_k for lag correlations rho."""
    rho = np.asarray(rho, dtype=np.float64)
    if (np.abs(rho) > 1.0).any():
        raise ValueError("lag correlations must satisfy |rho_k| <= 1")
    ks = np.arange(1, min(len(rho) + 1, N))
    if ks.size == 0:
        return 1.0
    return float(1.0 + 2.0 * np.sum((1.0 - ks / N) * rho[: ks.size]))


def participation_ratio(mass) -> float:
    """r_eff = (sum m_h)^2 / sum m_h^2, the effective active-head count."""
    m = np.asarray(mass, dtype=np.float64)
    if (m < 0).any():
        raise ValueError("head masses must be nonnegative")
    denom = float(np.sum(m * m))
    if denom == 0.0:
        raise ValueError("participation ratio undefined for all-zero mass")
    return float(np.sum(m) ** 2 / denom)


def angular_threshold(n, d_h) -> float:
    """delta_{0.5} = log(n - 1) / sqrt(d_h)."""
    if n < 2:
        raise ValueError(f"need n >= 2 candidates, got {n}")
    return float(np.log(n - 1) / np.sqrt(d_h))


def rope_lambda_eff(weights, theta, d_h) -> float:
    """lambda_eff^2 = sum_j a_j omega_j^2 / sum_j a_j, omega_j = theta^{-2(j-1)/d_h}."""
    a = np.asarray(weights, dtype=np.float64)
    if (a < 0).any() or a.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    j = np.arange(1, len(a) + 1)
    omega = theta ** (-2.0 * (j - 1) / d_h)
    return float(np.sum(a * omega * omega) / a.sum())
