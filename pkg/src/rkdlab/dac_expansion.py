"""Expansion-based augmentations, consistency error, and margin machinery.

Augmentation sets live inside ground-truth classes; two vertices are
neighbors when their augmentation sets overlap.  Expansion strength is the
worst-case per-class growth factor of neighborhoods over small subsets,
found exhaustively with bitmask enumeration at desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, InvalidAugmentationError, InvalidConfigError, NumericError
from .graph_core import PopulationGraph
from .spectral_rkd import Prediction, StudentModel

EXHAUSTIVE_SUBSET_CAP = 18
C_HAT_CAP = 1e18
MASS_TOL = 1e-12
VERDICT_SLACK = 1e-9


@dataclass(frozen=True)
class AugmentationMap:
    """Per-vertex augmentation sets A(x); conforming maps satisfy x in A(x),
    A(x) strictly larger than {x}, and A(x) inside x's ground-truth class."""

    sets: tuple
    conforming: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(frozenset(int(v) for v in s) for s in self.sets))

    @property
    def size(self) -> int:
        return len(self.sets)

    def validate(self, g: PopulationGraph) -> None:
        if self.size != g.size:
            raise InvalidAugmentationError(f"{self.size} augmentation sets for {g.size} vertices")
        for x, aset in enumerate(self.sets):
            if x not in aset:
                raise InvalidAugmentationError(f"vertex {x} missing from its own augmentation set")
            if self.conforming and aset == {x}:
                raise InvalidAugmentationError(f"augmentation set of vertex {x} is the bare singleton")
            if any(g.labels[v] != g.labels[x] for v in aset):
                raise InvalidAugmentationError(f"augmentation of vertex {x} crosses a class boundary")


def make_augmentation(sets, g: PopulationGraph, strict: bool = True) -> AugmentationMap:
    """Build and validate an augmentation map; strict=False admits singleton
    sets for counter-example fixtures and marks the map non-conforming."""
    aug = AugmentationMap(sets=tuple(sets), conforming=strict)
    aug.validate(g)
    return aug


def chain_augmentation(g: PopulationGraph) -> AugmentationMap:
    """A(x) = {x, next vertex in x's class} cyclically within each class."""
    sets = [None] * g.size
    for k in range(g.num_classes):
        members = [int(v) for v in g.class_members(k)]
        for i, v in enumerate(members):
            sets[v] = {v, members[(i + 1) % len(members)]}
    return AugmentationMap(sets=tuple(sets))


def load_augmentation(path, g: PopulationGraph, strict: bool = True) -> AugmentationMap:
    """Load {"sets": [[...vertex ids...], ...]} aligned to graph vertex order."""
    data = json.loads(Path(path).read_text())
    return make_augmentation(data["sets"], g, strict=strict)


def save_augmentation(aug: AugmentationMap, path) -> None:
    from .jsonio import dump_canonical

    dump_canonical({"sets": [sorted(s) for s in aug.sets]}, path)


@dataclass(frozen=True)
class NeighborhoodMap:
    """NB(x) = {x' : A(x) and A(x') overlap}; symmetric and reflexive."""

    members: tuple

    def of_set(self, subset) -> frozenset:
        out = set()
        for x in subset:
            out |= self.members[int(x)]
        return frozenset(out)


def neighborhoods(aug: AugmentationMap) -> NeighborhoodMap:
    n = aug.size
    members = []
    for x in range(n):
        ax = aug.sets[x]
        members.append(frozenset(x2 for x2 in range(n) if ax & aug.sets[x2]))
    return NeighborhoodMap(members=tuple(members))


@dataclass(frozen=True)
class ExpansionReport:
    c_hat: float
    checked_subsets: int
    exhaustive: bool


def _subset_tables(aug: AugmentationMap, g: PopulationGraph):
    """Bitmask tables: per-subset class masses and neighborhood masks."""
    n = g.size
    nb = neighborhoods(aug)
    nb_masks = np.array([sum(1 << v for v in nb.members[x]) for x in range(n)], dtype=np.int64)
    count = 1 << n
    codes = np.arange(count, dtype=np.int64)
    deg = g.degrees()
    bits = ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)
    class_mass = np.stack([bits @ (deg * (g.labels == k)) for k in range(g.num_classes)])
    nb_of = np.zeros(count, dtype=np.int64)
    for v in range(n):
        sel = bits[:, v]
        nb_of[sel] |= nb_masks[v]
    return class_mass, nb_of


def estimate_c_expansion(
    aug: AugmentationMap,
    g: PopulationGraph,
    sample_subsets: int = 20000,
    seed: int = 0,
) -> ExpansionReport:
    """Largest c for which every qualifying subset expands by factor c per class.

    Qualifying subsets hold at most half of each class's mass; subsets whose
    neighborhood already covers a class impose no constraint there.  Exhaustive
    up to 18 vertices, uniformly sampled (and flagged) beyond.
    """
    n = g.size
    if n <= EXHAUSTIVE_SUBSET_CAP:
        class_mass, nb_of = _subset_tables(aug, g)
        totals = class_mass[:, -1]  # mask with all bits set
        qualifying = np.all(class_mass <= totals[:, None] / 2 + MASS_TOL, axis=0)
        qualifying[0] = False
        c_hat = C_HAT_CAP
        idx = np.nonzero(qualifying)[0]
        for k in range(g.num_classes):
            s_mass = class_mass[k, idx]
            nb_mass = class_mass[k, nb_of[idx]]
            constrained = (s_mass > MASS_TOL) & (nb_mass < totals[k] - MASS_TOL)
            if constrained.any():
                c_hat = min(c_hat, float((nb_mass[constrained] / s_mass[constrained]).min()))
        return ExpansionReport(c_hat=c_hat, checked_subsets=int(len(idx)), exhaustive=True)

    rng = np.random.default_rng(seed)
    nb = neighborhoods(aug)
    deg = g.degrees()
    totals = g.class_masses()
    c_hat = C_HAT_CAP
    checked = 0
    for _ in range(sample_subsets):
        size = int(rng.integers(1, n))
        subset = rng.choice(n, size=size, replace=False)
        in_set = np.zeros(n, dtype=bool)
        in_set[subset] = True
        s_mass = np.array([deg[in_set & (g.labels == k)].sum() for k in range(g.num_classes)])
        if np.any(s_mass > totals / 2 + MASS_TOL):
            continue
        checked += 1
        nb_set = np.zeros(n, dtype=bool)
        nb_set[list(nb.of_set(subset))] = True
        for k in range(g.num_classes):
            nb_mass = float(deg[nb_set & (g.labels == k)].sum())
            if s_mass[k] > MASS_TOL and nb_mass < totals[k] - MASS_TOL:
                c_hat = min(c_hat, nb_mass / s_mass[k])
    return ExpansionReport(c_hat=c_hat, checked_subsets=checked, exhaustive=False)


def dac_error(f: Prediction, aug: AugmentationMap, g: PopulationGraph) -> float:
    """Mass of vertices whose augmentation set crosses a predicted boundary."""
    labels = f.hard_labels()
    deg = g.degrees()
    bad = np.array([any(labels[v] != labels[x] for v in aug.sets[x]) for x in range(g.size)])
    return float(deg[bad].sum())


def dac_error_family(f_family, aug: AugmentationMap, g: PopulationGraph) -> float:
    return max(dac_error(f, aug, g) for f in f_family)


def theorem5_check(f_family, aug: AugmentationMap, g: PopulationGraph):
    """Audit mu(family) <= max(2 / (c - 1), 2) nu(family) under c-expansion.

    Members whose minority set exceeds half of some class are skipped with a
    marker (the expansion argument only applies to qualifying minority sets).
    Returns (mu, bound, verdict_string).
    """
    from .clustering_audit import halves_condition, majority_label

    if not f_family:
        raise DomainError("empty prediction family")
    report = estimate_c_expansion(aug, g)
    if not report.exhaustive:
        return math.nan, math.nan, "not-applicable: expansion estimate not exhaustive"
    if report.c_hat <= 1.0:
        return math.nan, math.nan, f"bound-undefined: c_hat={report.c_hat!r} <= 1"
    mu = 0.0
    nu = 0.0
    audited = 0
    for f in f_family:
        maj = majority_label(f, g)
        if not halves_condition(maj, g):
            continue
        audited += 1
        mu = max(mu, maj.minority_mass)
        nu = max(nu, dac_error(f, aug, g))
    if audited == 0:
        return math.nan, math.nan, "not-applicable: every member skipped"
    bound = max(2.0 / (report.c_hat - 1.0), 2.0) * nu
    verdict = "pass" if mu <= bound + VERDICT_SLACK else "fail"
    return mu, bound, verdict


def constant_expansion_check(aug: AugmentationMap, g: PopulationGraph, q: float, xi: float) -> bool:
    """(q, xi)-constant expansion: every qualifying subset with mass >= q grows
    by more than min(P(S), xi)."""
    n = g.size
    if n > EXHAUSTIVE_SUBSET_CAP:
        raise DomainError(f"|X|={n} exceeds the exhaustive cap {EXHAUSTIVE_SUBSET_CAP}")
    class_mass, nb_of = _subset_tables(aug, g)
    totals = class_mass[:, -1]
    total_mass = class_mass.sum(axis=0)
    qualifying = np.all(class_mass <= totals[:, None] / 2 + MASS_TOL, axis=0)
    qualifying[0] = False
    qualifying &= total_mass >= q - MASS_TOL
    idx = np.nonzero(qualifying)[0]
    s_mass = total_mass[idx]
    nb_mass = total_mass[nb_of[idx]]
    return bool(np.all(nb_mass > np.minimum(s_mass, xi) + s_mass))


def expansion_implication_check(aug: AugmentationMap, g: PopulationGraph, xis=(0.05, 0.1, 0.2)) -> dict:
    """Probe that c-expansion at the measured c_hat implies
    (xi / (c_hat - 1), xi)-constant expansion for each probed xi."""
    report = estimate_c_expansion(aug, g)
    out = {"c_hat": report.c_hat, "probes": {}}
    if report.c_hat <= 1.0:
        out["applicable"] = False
        return out
    out["applicable"] = True
    # probe marginally inside the feasible region so that attained-infimum
    # equalities in c_hat do not flip a strict comparison
    c_eff = report.c_hat * (1.0 - 1e-9) if math.isfinite(report.c_hat) else C_HAT_CAP
    for xi in xis:
        q = xi / (c_eff - 1.0)
        out["probes"][xi] = constant_expansion_check(aug, g, q=q, xi=xi)
    return out


# ---------------------------------------------------------------------------
# all-layer and robust margins


@dataclass(frozen=True)
class PerturbationSolverConfig:
    restarts: int = 8
    steps: int = 200
    step_size: float = 0.05
    penalty_rounds: int = 4
    penalty_init: float = 1.0
    penalty_growth: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 4:
            raise InvalidConfigError("perturbation solver needs at least 4 restarts")


@dataclass(frozen=True)
class MarginResult:
    """value is the layerwise-perturbation norm; exact=False flags a descent
    upper bound whose certificate delta verifiably flips the argmax."""

    value: float
    exact: bool
    delta: tuple


def _uniquely_argmax(scores: np.ndarray, y: int) -> bool:
    return bool(np.all(np.delete(scores, y) < scores[y]))


def all_layer_margin(model: StudentModel, x, y: int, solver: PerturbationSolverConfig | None = None) -> MarginResult:
    """Minimum norm of layerwise perturbations that flip the prediction off y.

    Exact closed form for linear models; projected-descent upper bound with
    multiple restarts (plus an output-layer fallback) for 1-hidden-layer nets.
    """
    x = np.asarray(x, dtype=float)
    if model.architecture == "table":
        raise DomainError("all-layer margins are defined for parametric models only")
    scores = model.forward(x[None, :])[0]
    K = model.num_classes
    if not 0 <= y < K:
        raise DomainError(f"class {y} outside [0, {K})")
    if not _uniquely_argmax(scores, y):
        return MarginResult(value=0.0, exact=True, delta=(np.zeros(K),))
    if model.architecture == "linear":
        norm_x = float(np.linalg.norm(x))
        gaps = scores[y] - np.delete(scores, y)
        value = float(gaps.min()) / (math.sqrt(2.0) * norm_x)
        k_star = int(np.argmin(gaps))
        k_star = k_star if k_star < y else k_star + 1
        step = (float(gaps.min()) / 2.0 + 1e-12) / norm_x
        delta = np.zeros(K)
        delta[k_star] = step
        delta[y] = -step
        return MarginResult(value=value, exact=True, delta=(delta,))
    if solver is None:
        solver = PerturbationSolverConfig()
    return _mlp_margin_descent(model, x, y, solver)


def _mlp_perturbed_forward(model: StudentModel, x, d1, d2, d3):
    a1, a2 = model._unpack()
    n0 = float(np.linalg.norm(x))
    u1 = a1 @ x + d1 * n0
    n1 = float(np.linalg.norm(u1))
    u2 = np.tanh(u1) + d2 * n1
    n2 = float(np.linalg.norm(u2))
    u3 = a2 @ u2 + d3 * n2
    return u1, u2, u3, n0, n1, n2


def _mlp_flips(model: StudentModel, x, y: int, delta) -> bool:
    _, _, u3, *_ = _mlp_perturbed_forward(model, x, *delta)
    return bool(np.max(np.delete(u3, y)) > u3[y])


def _mlp_margin_descent(model: StudentModel, x, y: int, solver: PerturbationSolverConfig) -> MarginResult:
    a1, a2 = model._unpack()
    h = a1.shape[0]
    K = a2.shape[0]
    rng = np.random.default_rng(solver.seed)
    best_value = math.inf
    best_delta = None

    def certify(delta):
        """Scale delta just past the decision boundary; returns (norm, scaled) or None."""
        nonlocal best_value, best_delta
        lo, hi = 0.0, 1.0
        if not _mlp_flips(model, x, y, delta):
            grow = 1.0
            while grow < 1e6:
                grow *= 2.0
                if _mlp_flips(model, x, y, tuple(grow * d for d in delta)):
                    hi = grow
                    lo = grow / 2.0
                    break
            else:
                return
        for _ in range(60):
            mid = (lo + hi) / 2.0
            if _mlp_flips(model, x, y, tuple(mid * d for d in delta)):
                hi = mid
            else:
                lo = mid
        scaled = tuple(hi * d for d in delta)
        norm = math.sqrt(sum(float(np.sum(d**2)) for d in scaled))
        if norm < best_value:
            best_value = norm
            best_delta = scaled

    # output-layer-only fallback: exact attack on the last layer
    u1, u2, u3, n0, n1, n2 = _mlp_perturbed_forward(model, x, np.zeros(h), np.zeros(h), np.zeros(K))
    if n2 > 0:
        gaps = u3[y] - np.delete(u3, y)
        k_star = int(np.argmin(gaps))
        k_star = k_star if k_star < y else k_star + 1
        step = (float(gaps.min()) / 2.0 + 1e-12) / n2
        d3 = np.zeros(K)
        d3[k_star] = step
        d3[y] = -step
        certify((np.zeros(h), np.zeros(h), d3))

    for restart in range(solver.restarts):
        scale = 10.0 ** rng.uniform(-2, 0)
        d1 = scale * rng.standard_normal(h)
        d2 = scale * rng.standard_normal(h)
        d3 = scale * rng.standard_normal(K)
        rho = solver.penalty_init
        for _ in range(solver.penalty_rounds):
            for _ in range(solver.steps):
                u1, u2, u3, n0, n1, n2 = _mlp_perturbed_forward(model, x, d1, d2, d3)
                others = np.delete(u3, y)
                k_hat = int(np.argmax(others))
                k_hat = k_hat if k_hat < y else k_hat + 1
                gap = float(u3[y] - u3[k_hat])
                g1 = 2.0 * d1
                g2 = 2.0 * d2
                g3 = 2.0 * d3
                if gap > -1e-9:
                    gu3 = np.zeros(K)
                    gu3[y] = 1.0
                    gu3[k_hat] = -1.0
                    gu3 *= 2.0 * rho * max(gap + 1e-6, 0.0)
                    gu2 = a2.T @ gu3
                    if n2 > 0:
                        gu2 += float(d3 @ gu3) * (u2 / n2)
                    gu1 = (1.0 - np.tanh(u1) ** 2) * gu2
                    if n1 > 0:
                        gu1 += float(d2 @ gu2) * (u1 / n1)
                    g3 += n2 * gu3
                    g2 += n1 * gu2
                    g1 += n0 * gu1
                d1 -= solver.step_size * g1
                d2 -= solver.step_size * g2
                d3 -= solver.step_size * g3
            rho *= solver.penalty_growth
        certify((d1, d2, d3))

    if best_delta is None:
        raise NumericError("margin descent found no flipping perturbation")
    return MarginResult(value=best_value, exact=False, delta=best_delta)


def robust_margin(
    model: StudentModel,
    features: np.ndarray,
    vertex: int,
    aug: AugmentationMap,
    solver: PerturbationSolverConfig | None = None,
) -> MarginResult:
    """Worst all-layer margin over the augmentation set of a vertex, measured
    against the model's own prediction at that vertex."""
    features = np.asarray(features, dtype=float)
    y = int(np.argmax(model.forward(features[vertex][None, :])[0]))
    best = None
    for other in sorted(aug.sets[vertex]):
        res = all_layer_margin(model, features[other], y, solver)
        if best is None or res.value < best.value:
            best = res
    return best


def dac_class_membership(
    model: StudentModel,
    features: np.ndarray,
    points,
    aug: AugmentationMap,
    tau: float,
    solver: PerturbationSolverConfig | None = None,
) -> list:
    """Whether the robust margin clears tau at each given unlabeled point."""
    if tau <= 0:
        raise DomainError("tau must be positive")
    return [robust_margin(model, features, int(p), aug, solver).value >= tau for p in points]


def prop1_bound(weights_frobenius, d: int, tau: float, N: int, delta: float, p: int) -> float:
    """Two-term scale indicator for the consistency-error sample bound.

    Explicit constant 1 on each term, polylogarithmic factors dropped; this is
    a reported scale, never asserted as a true bound.
    """
    norms = [float(v) for v in weights_frobenius]
    if len(norms) != p:
        raise DomainError(f"expected {p} layer norms, got {len(norms)}")
    if d <= 0 or tau <= 0 or N < 1 or p < 1 or any(v <= 0 for v in norms):
        raise DomainError("all inputs must be positive")
    if not 0 < delta < 1:
        raise DomainError("delta must be in (0, 1)")
    term1 = sum(norms) * math.sqrt(d) / (tau * math.sqrt(N))
    term2 = math.sqrt((math.log(1.0 / delta) + p * math.log(N)) / N)
    return term1 + term2
