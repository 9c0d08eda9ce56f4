"""Clustering-error quantities and the audits of the clustering-error bounds.

The central object is the majority labeling: each predicted cluster is
relabeled by its most probable ground-truth class, and the clustering error
is the probability mass of vertices whose majority label disagrees with the
truth.  The audits check the population bound (inter-class mass over the
spectral gap), the empirical bound with its linear-programming dual, and the
supporting identities and counter-example formulas.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import DomainError, NumericError, SizeLimitError
from .graph_core import PopulationGraph, laplacian, spectral_decompose
from .spectral_rkd import Prediction

VERDICT_SLACK = 1e-9
LP_AGREEMENT_TOL = 1e-9
RANK_TOL = 1e-10
LP_SIZE_CAP = 40
LP_ENUMERATION_CAP = 12


@dataclass(frozen=True)
class MajorityLabeling:
    """Majority relabeling of predicted clusters, with the minority set it induces."""

    label: np.ndarray
    minority_mask: np.ndarray
    minority_mass: float
    predicted: np.ndarray
    ties: tuple

    def cluster_of(self, k: int) -> np.ndarray:
        """Vertices whose majority label is k (the k-th majority cluster)."""
        return np.nonzero(self.label == k)[0]


@dataclass(frozen=True)
class SkeletonReport:
    """Per-class representative vertices with their boundedness and margins."""

    skeleton: tuple
    beta: float
    gammas: tuple
    gamma: float
    rank_ok: bool
    applicable: bool
    reason: str


@dataclass(frozen=True)
class AuditReport:
    mu: float
    alpha: float
    lambdas: tuple
    beta: float
    gamma: float
    bound_thm1: float | None
    bound_thm4: float | None
    lp_primal: float | None
    lp_dual: float | None
    verdicts: dict
    skipped: tuple = ()

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "alpha": self.alpha,
            "lambdas": list(self.lambdas),
            "beta": self.beta,
            "gamma": self.gamma,
            "bound_thm1": self.bound_thm1,
            "bound_thm4": self.bound_thm4,
            "lp_primal": self.lp_primal,
            "lp_dual": self.lp_dual,
            "verdicts": dict(self.verdicts),
            "skipped": list(self.skipped),
        }


def majority_label(f: Prediction, g: PopulationGraph, predicted: np.ndarray | None = None) -> MajorityLabeling:
    """Relabel each predicted cluster by its heaviest ground-truth class.

    Conditional class weights are degree-proportional; ties go to the smallest
    class index and are recorded.  `predicted` overrides the deterministic
    argmax (used by the stochastic tie-breaking mode).
    """
    if predicted is None:
        predicted = f.hard_labels()
    predicted = np.asarray(predicted, dtype=int)
    if predicted.shape != (g.size,):
        raise DomainError("predicted labels misaligned with the vertex set")
    deg = g.degrees()
    label = np.empty(g.size, dtype=int)
    ties = []
    for cluster in np.unique(predicted):
        members = predicted == cluster
        masses = np.zeros(g.num_classes)
        np.add.at(masses, g.labels[members], deg[members])
        top = masses.max()
        winners = np.nonzero(masses >= top)[0]
        if len(winners) > 1:
            ties.append(int(cluster))
        label[members] = winners[0]
    minority = label != g.labels
    return MajorityLabeling(
        label=label,
        minority_mask=minority,
        minority_mass=float(deg[minority].sum()),
        predicted=predicted,
        ties=tuple(ties),
    )


def label_boundary_mass(g: PopulationGraph) -> float:
    """sum_k y_k^T L y_k for the degree-scaled one-hot truth; equals the
    inter-class weight fraction exactly."""
    lap = laplacian(g)
    sd = np.sqrt(g.degrees())
    total = 0.0
    for k in range(g.num_classes):
        yk = sd * (g.labels == k)
        total += float(yk @ lap @ yk)
    return total


def halves_condition(maj: MajorityLabeling, g: PopulationGraph) -> bool:
    """P(M(f) intersect X_k) <= P(X_k)/2 for every class k."""
    deg = g.degrees()
    for k in range(g.num_classes):
        cls = g.labels == k
        if deg[cls & maj.minority_mask].sum() > deg[cls].sum() / 2 + 1e-15:
            return False
    return True


def skeleton_and_margin(
    f: Prediction, g: PopulationGraph, maj: MajorityLabeling | None = None
) -> SkeletonReport:
    """Skeleton s_k = argmax of f(.)_k over non-minority vertices, with the
    spectral bound beta and per-class margins against minority competitors.

    Not-applicable (never an exception) when the minority halves condition
    fails, a skeleton entry predicts the wrong class, the skeleton matrix is
    rank-deficient, or the margin is non-positive.
    """
    if maj is None:
        maj = majority_label(f, g)
    K = f.num_classes
    empty = SkeletonReport(
        skeleton=(), beta=math.nan, gammas=(), gamma=math.nan,
        rank_ok=False, applicable=False, reason="",
    )
    if not halves_condition(maj, g):
        return _with_reason(empty, "minority mass exceeds half of some class")
    candidates = np.nonzero(~maj.minority_mask)[0]
    if len(candidates) == 0:
        return _with_reason(empty, "no non-minority vertices")
    skeleton = []
    for k in range(K):
        col = f.scores[candidates, k]
        skeleton.append(int(candidates[int(np.argmax(col))]))
    predicted = maj.predicted
    if any(predicted[s] != k for k, s in enumerate(skeleton)):
        bad = [k for k, s in enumerate(skeleton) if predicted[s] != k]
        return _with_reason(empty, f"skeleton vertex predicts the wrong class for k={bad}")
    fs = f.scores[skeleton, :]
    svals = np.linalg.svd(fs, compute_uv=False)
    rank_ok = bool(svals[-1] > RANK_TOL)
    beta = float(svals[0])
    gammas = []
    for k in range(K):
        competitors = maj.minority_mask & (predicted != k)
        if competitors.any():
            gammas.append(float(f.scores[skeleton[k], k] - f.scores[competitors, k].max()))
        else:
            gammas.append(math.inf)
    gamma = min(gammas)
    if not rank_ok:
        return SkeletonReport(tuple(skeleton), beta, tuple(gammas), gamma, False, False,
                              "skeleton matrix rank-deficient")
    if not gamma > 0:
        return SkeletonReport(tuple(skeleton), beta, tuple(gammas), gamma, True, False,
                              f"non-positive margin {gamma}")
    return SkeletonReport(tuple(skeleton), beta, tuple(gammas), gamma, True, True, "")


def _with_reason(report: SkeletonReport, reason: str) -> SkeletonReport:
    return SkeletonReport(report.skeleton, report.beta, report.gammas, report.gamma,
                          report.rank_ok, False, reason)


def margin_prefactor(beta: float, gamma: float) -> float:
    """max(beta^2 / gamma^2, 1); the infinite-margin case collapses to 1."""
    if math.isinf(gamma):
        return 1.0
    return max(beta**2 / gamma**2, 1.0)


def inter_class_fraction(g: PopulationGraph) -> float:
    from .graph_core import inter_class_fraction as _alpha

    return _alpha(g)


def theorem1_check(f_family, g: PopulationGraph) -> AuditReport:
    """Audit mu(family) <= 2 max(beta^2/gamma^2, 1) alpha / lambda_{K+1}.

    Members that violate the skeleton/margin preconditions are skipped with a
    marker and excluded from mu, beta, gamma.
    """
    if not f_family:
        raise DomainError("empty prediction family")
    dec = spectral_decompose(g)
    alpha = inter_class_fraction(g)
    K = f_family[0].num_classes
    mu = 0.0
    beta = 0.0
    gamma = math.inf
    skipped = []
    audited = 0
    for idx, f in enumerate(f_family):
        maj = majority_label(f, g)
        skel = skeleton_and_margin(f, g, maj)
        if not skel.applicable:
            skipped.append((idx, skel.reason))
            continue
        audited += 1
        mu = max(mu, maj.minority_mass)
        beta = max(beta, skel.beta)
        gamma = min(gamma, skel.gamma)
    verdicts = {}
    bound = None
    if K >= g.size:
        verdicts["thm1"] = "bound-undefined: K+1 exceeds |X|"
    else:
        lam_next = float(dec.eigenvalues[K])
        if lam_next <= 1e-12:
            verdicts["thm1"] = "bound-undefined: lambda_{K+1} ~ 0"
        elif audited == 0:
            verdicts["thm1"] = "not-applicable: every member skipped"
        else:
            bound = 2.0 * margin_prefactor(beta, gamma) * alpha / lam_next
            verdicts["thm1"] = "pass" if mu <= bound + VERDICT_SLACK else "fail"
    return AuditReport(
        mu=mu, alpha=alpha, lambdas=tuple(float(x) for x in dec.eigenvalues),
        beta=beta, gamma=gamma, bound_thm1=bound, bound_thm4=None,
        lp_primal=None, lp_dual=None, verdicts=verdicts, skipped=tuple(skipped),
    )


def _second_term(lambdas, K: int, K0: int, Delta: float) -> float:
    """(1 + (K - K0) C_{K0}) Delta / ((1-l_{K0})^2 - (1-l_{K+1})^2), computed in
    the product form that stays finite as Delta -> 0."""
    l_k0 = lambdas[K0 - 1]
    l_k = lambdas[K - 1]
    l_next = lambdas[K]
    denom = (1.0 - l_k0) ** 2 - (1.0 - l_next) ** 2
    numer = Delta + (K - K0) * ((1.0 - l_k0) ** 2 - (1.0 - l_k) ** 2)
    return numer / denom


def theorem4_check(f_emp: Prediction, g: PopulationGraph, Delta: float, K0: int) -> AuditReport:
    """Audit the empirical-minimizer clustering bound at a measured loss gap Delta."""
    dec = spectral_decompose(g)
    lam = dec.eigenvalues
    alpha = inter_class_fraction(g)
    K = f_emp.num_classes
    maj = majority_label(f_emp, g)
    skel = skeleton_and_margin(f_emp, g, maj)
    verdicts = {}
    bound = None
    lp_primal = lp_dual = None
    base = dict(
        mu=maj.minority_mass, alpha=alpha, lambdas=tuple(float(x) for x in lam),
        beta=skel.beta, gamma=skel.gamma, bound_thm1=None,
    )
    if K >= g.size:
        verdicts["thm4"] = "bound-undefined: K+1 exceeds |X|"
    elif not 1 <= K0 <= K:
        verdicts["thm4"] = f"bound-undefined: K0={K0} outside [1, K]"
    elif Delta < 0:
        verdicts["thm4"] = "bound-undefined: negative Delta"
    elif not Delta < (1.0 - lam[K - 1]) ** 2:
        verdicts["thm4"] = f"bound-undefined: Delta={Delta!r} >= (1 - lambda_K)^2"
    elif not lam[K0 - 1] < lam[K]:
        verdicts["thm4"] = f"bound-undefined: lambda_K0={lam[K0-1]!r} >= lambda_K+1={lam[K]!r}"
    elif lam[K] <= 1e-12:
        verdicts["thm4"] = "bound-undefined: lambda_{K+1} ~ 0"
    elif not skel.applicable:
        verdicts["thm4"] = f"not-applicable: {skel.reason}"
    else:
        lp_primal, lp_dual = lp_bound_oracle(lam, K, K0, Delta)
        bound = 2.0 * margin_prefactor(skel.beta, skel.gamma) * (
            alpha / lam[K] + _second_term(lam, K, K0, Delta)
        )
        verdicts["thm4"] = "pass" if maj.minority_mass <= bound + VERDICT_SLACK else "fail"
    return AuditReport(
        bound_thm4=bound, lp_primal=lp_primal, lp_dual=lp_dual,
        verdicts=verdicts, skipped=(), **base,
    )


# ---------------------------------------------------------------------------
# the subspace-leakage linear program of the empirical bound


def _lp_data(lambdas, K: int, Delta: float):
    lam = np.asarray(lambdas, dtype=float)
    n = len(lam)
    if n > LP_SIZE_CAP:
        raise SizeLimitError(f"{n} eigenvalues exceed the LP cap {LP_SIZE_CAP}")
    if not 1 <= K < n:
        raise DomainError(f"need 1 <= K < {n}")
    if np.any(np.diff(lam) < -1e-12):
        raise DomainError("eigenvalues must be ascending")
    costs = (1.0 - lam) ** 2
    budget = float(costs[K:].sum()) + Delta
    if not Delta < costs[K - 1]:
        raise DomainError(f"Delta={Delta!r} must be below (1 - lambda_K)^2 = {costs[K-1]!r}")
    return costs, budget, n


def lp_primal_simplex(lambdas, K: int, Delta: float) -> float:
    """Library simplex solve of max sum_{i<=K} xi_i under the leakage constraints."""
    costs, budget, n = _lp_data(lambdas, K, Delta)
    c = np.zeros(n)
    c[:K] = -1.0
    res = linprog(
        c,
        A_ub=costs[None, :],
        b_ub=[budget],
        A_eq=np.ones((1, n)),
        b_eq=[float(n - K)],
        bounds=[(0.0, 1.0)] * n,
        method="highs",
    )
    if not res.success:
        raise NumericError(f"internal error: primal LP reported infeasible ({res.message})")
    return float(-res.fun)


def lp_primal_greedy(lambdas, K: int, Delta: float) -> float:
    """Independent exact solve via the convex piecewise-linear cost profile.

    For head mass t, the cheapest way to satisfy both sum constraints fills the
    cheapest head coordinates with t and the cheapest tail coordinates with
    n - K - t; the optimum is the largest t whose minimal cost fits the budget.
    """
    costs, budget, n = _lp_data(lambdas, K, Delta)
    head = np.sort(costs[:K])
    tail = np.sort(costs[K:])
    t_max = float(min(K, n - K))

    def fill_cost(sorted_costs: np.ndarray, amount: float) -> float:
        whole = int(math.floor(amount + 1e-15))
        whole = min(whole, len(sorted_costs))
        value = float(sorted_costs[:whole].sum())
        frac = amount - whole
        if frac > 1e-15 and whole < len(sorted_costs):
            value += frac * float(sorted_costs[whole])
        return value

    def g(t: float) -> float:
        return fill_cost(head, t) + fill_cost(tail, float(n - K) - t)

    if g(0.0) > budget + 1e-12:
        raise NumericError("internal error: primal LP infeasible at t = 0")
    if g(t_max) <= budget + 1e-15:
        return t_max
    lo = 0.0
    for t in range(1, int(t_max) + 1):
        if g(float(t)) <= budget + 1e-15:
            lo = float(t)
        else:
            g_lo, g_hi = g(lo), g(float(t))
            if g_hi <= g_lo + 1e-18:  # flat segment cannot cross the budget
                return lo
            return lo + (budget - g_lo) / (g_hi - g_lo) * (float(t) - lo)
    return lo


def lp_primal_enumerate(lambdas, K: int, Delta: float) -> float:
    """Brute basic-feasible-solution enumeration (test oracle, |lambdas| <= 12)."""
    costs, budget, n = _lp_data(lambdas, K, Delta)
    if n > LP_ENUMERATION_CAP:
        raise SizeLimitError(f"{n} variables exceed the enumeration cap {LP_ENUMERATION_CAP}")
    target = float(n - K)
    best = -math.inf
    tol = 1e-12

    def objective(xi):
        return float(np.sum(xi[:K]))

    for pattern in itertools.product((0.0, 1.0, None), repeat=n):
        free = [i for i, v in enumerate(pattern) if v is None]
        fixed_sum = sum(v for v in pattern if v is not None)
        fixed_cost = sum(costs[i] * v for i, v in enumerate(pattern) if v is not None)
        xi = np.array([0.0 if v is None else v for v in pattern])
        if len(free) == 0:
            if abs(fixed_sum - target) < tol and fixed_cost <= budget + tol:
                best = max(best, objective(xi))
        elif len(free) == 1:
            r = target - fixed_sum
            if tol < r < 1 - tol:
                xi[free[0]] = r
                if float(costs @ xi) <= budget + tol:
                    best = max(best, objective(xi))
        elif len(free) == 2:
            i, j = free
            r = target - fixed_sum
            det = costs[j] - costs[i]
            if abs(det) < tol:
                continue
            # cost constraint binding: xi_i + xi_j = r, c_i xi_i + c_j xi_j = budget - fixed_cost
            xj = (budget - fixed_cost - costs[i] * r) / det
            xi_i = r - xj
            if tol < xj < 1 - tol and tol < xi_i < 1 - tol:
                xi[i], xi[j] = xi_i, xj
                best = max(best, objective(xi))
    if best == -math.inf:
        raise NumericError("internal error: enumeration found no feasible vertex")
    return best


def lp_dual_value(lambdas, K: int, K0: int, Delta: float) -> float:
    """Closed-form feasible dual value (1 + (K - K0) C_{K0}) Delta / gap."""
    lam = np.asarray(lambdas, dtype=float)
    if not 1 <= K0 <= K:
        raise DomainError(f"need 1 <= K0 <= K, got K0={K0}")
    if not lam[K0 - 1] < lam[K]:
        raise DomainError("need lambda_{K0} < lambda_{K+1}")
    return _second_term(lam, K, K0, Delta)


def lp_bound_oracle(lambdas, K: int, K0: int, Delta: float):
    """Exact primal optimum (two agreeing solvers) and the closed-form dual.

    Raises if the solvers disagree beyond 1e-9 or weak duality fails.
    """
    simplex = lp_primal_simplex(lambdas, K, Delta)
    greedy = lp_primal_greedy(lambdas, K, Delta)
    if abs(simplex - greedy) > LP_AGREEMENT_TOL:
        raise NumericError(f"LP solvers disagree: simplex={simplex!r}, greedy={greedy!r}")
    dual = lp_dual_value(lambdas, K, K0, Delta)
    if simplex > dual + LP_AGREEMENT_TOL:
        raise NumericError(f"weak duality violated: primal={simplex!r} > dual={dual!r}")
    return simplex, dual


# ---------------------------------------------------------------------------
# supporting identity and counter-example formulas


def lemma_c1_check(f: Prediction, g: PopulationGraph):
    """Return (minority mass, 2 max(beta^2/gamma^2, 1) min_Z ||Y - F Z||_F^2).

    The right side is computed by least squares; rank-deficient F falls back to
    the pseudo-inverse and is recorded by the caller via the skeleton report.
    """
    maj = majority_label(f, g)
    skel = skeleton_and_margin(f, g, maj)
    if not skel.applicable:
        raise DomainError(f"margin preconditions not met: {skel.reason}")
    sd = np.sqrt(g.degrees())
    F = f.scores * sd[:, None]
    Y = (np.eye(g.num_classes)[g.labels]) * sd[:, None]
    Z, *_ = np.linalg.lstsq(F, Y, rcond=None)
    rhs = 2.0 * margin_prefactor(skel.beta, skel.gamma) * float(np.linalg.norm(Y - F @ Z) ** 2)
    lhs = maj.minority_mass
    if lhs > rhs + VERDICT_SLACK:
        raise NumericError(f"interpolation bound violated: {lhs!r} > {rhs!r}")
    return lhs, rhs


def example_c1_margin_check(beta: float, ce_loss: float) -> float:
    """Margin lower bound from the weak-supervision cross-entropy window.

    Defined for log(1 + exp(-sqrt(2) beta)) <= L < log(1 + exp(-beta)); equals
    sqrt(2) beta at the lower endpoint.
    """
    if beta <= 0:
        raise DomainError("beta must be positive")
    lo = math.log1p(math.exp(-math.sqrt(2.0) * beta))
    hi = math.log1p(math.exp(-beta))
    if not lo - 1e-12 <= ce_loss < hi:
        raise DomainError(f"cross-entropy {ce_loss!r} outside [{lo!r}, {hi!r})")
    gap = -math.log(math.expm1(ce_loss))
    radicand = max(2.0 * beta**2 - gap**2, 0.0)
    return gap - math.sqrt(radicand)
