"""End-to-end semi-supervised runs: cross-entropy + consistency + relational loss.

A run builds a fixture graph, acquires a few labels, trains a student on the
combined objective, evaluates transductive accuracy on the unlabeled
vertices, and embeds the clustering-error audits in the result.  Identical
(config, seed) pairs produce byte-identical reports.
"""

from __future__ import annotations

import csv
import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import jsonio
from .clustering_audit import theorem1_check, theorem4_check
from .dac_expansion import (
    EXHAUSTIVE_SUBSET_CAP,
    AugmentationMap,
    chain_augmentation,
    load_augmentation,
    make_augmentation,
    theorem5_check,
)
from .errors import InvalidConfigError, TrainingDivergedError
from .graph_core import (
    PopulationGraph,
    build_sbm,
    build_two_blobs,
    lazy_graph,
    load_graph,
)
from .label_acquisition import (
    LabeledSet,
    cluster_wise_sample,
    iid_sample,
    save_labeled,
    stochastic_greedy,
    make_labeled,
    uniform_per_class_sample,
)
from .spectral_rkd import (
    Prediction,
    StudentModel,
    population_rkd_loss,
    spectral_decompose,
)
from .teacher_kernel import KernelSpec, kernel_matrix, spectral_teacher_embedding


@dataclass(frozen=True)
class ExperimentConfig:
    graph: dict
    kernel: dict
    student: dict
    loss: dict
    labels: dict
    optimizer: dict
    seed: int
    augmentation: dict = field(default_factory=lambda: {"kind": "chain"})
    tolerances: dict = field(default_factory=dict)
    out_dir: str | None = None

    def __post_init__(self):
        loss = self.loss
        if loss.get("lambda_dac", 0.0) < 0 or loss.get("lambda_rkd", 0.0) < 0:
            raise InvalidConfigError("loss weights must be nonnegative")
        tau = loss.get("tau_dac", 0.95)
        if not 0 < tau <= 1:
            raise InvalidConfigError(f"tau_dac={tau} outside (0, 1]")
        if loss.get("temperature", 1.0) <= 0:
            raise InvalidConfigError("temperature must be positive")
        for section in (self.graph, self.augmentation):
            path = section.get("path")
            if path is not None and not Path(path).exists():
                raise InvalidConfigError(f"referenced file does not exist: {path}")

    def to_dict(self) -> dict:
        return {
            "graph": self.graph,
            "augmentation": self.augmentation,
            "kernel": self.kernel,
            "student": self.student,
            "loss": self.loss,
            "labels": self.labels,
            "optimizer": self.optimizer,
            "seed": self.seed,
            "tolerances": self.tolerances,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(
            graph=data["graph"],
            kernel=data["kernel"],
            student=data["student"],
            loss=data["loss"],
            labels=data["labels"],
            optimizer=data["optimizer"],
            seed=int(data["seed"]),
            augmentation=data.get("augmentation", {"kind": "chain"}),
            tolerances=data.get("tolerances", {}),
            out_dir=data.get("out_dir"),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(jsonio.load(path))

    def save(self, path) -> None:
        jsonio.dump_canonical(self.to_dict(), path)

    def config_hash(self) -> str:
        return hashlib.sha256(jsonio.dumps_canonical(self.to_dict()).encode()).hexdigest()


@dataclass
class RunResult:
    config_hash: str
    accuracy: float
    losses: list
    audits: dict
    labeled: LabeledSet
    model: StudentModel
    wall_clock: float

    def report_dict(self) -> dict:
        """Everything except wall-clock, which goes to a separate timing file so
        repeated runs stay byte-identical."""
        return {
            "config_hash": self.config_hash,
            "accuracy": self.accuracy,
            "final_losses": dict(self.losses[-1]) if self.losses else {},
            "iterations": len(self.losses),
            "audits": self.audits,
            "labeled_vertices": [int(v) for v in self.labeled.vertices()],
        }


# ---------------------------------------------------------------------------
# fixture builders


def build_graph_fixture(cfg: ExperimentConfig):
    """Returns (graph, points-or-None) from the config's graph section."""
    spec = dict(cfg.graph)
    kind = spec.pop("kind")
    if kind == "sbm":
        lazy = spec.pop("lazy", True)
        g = build_sbm(**spec)
        return (lazy_graph(g) if lazy else g), None
    if kind == "two_blobs":
        return build_two_blobs(**spec)
    if kind == "file":
        return load_graph(spec["path"]), None
    raise InvalidConfigError(f"unknown graph kind {kind!r}")


def build_augmentation_fixture(cfg: ExperimentConfig, g: PopulationGraph, points) -> AugmentationMap:
    spec = dict(cfg.augmentation)
    kind = spec.pop("kind", "chain")
    if kind == "chain":
        return chain_augmentation(g)
    if kind == "split_chain":
        # disjoint sub-chains per class: weak augmentations whose neighborhoods
        # never connect the parts, so expansion fails across them
        parts = int(spec.get("parts", 2))
        sets = [None] * g.size
        for k in range(g.num_classes):
            members = [int(v) for v in g.class_members(k)]
            chunk = max(2, -(-len(members) // parts))
            for start in range(0, len(members), chunk):
                piece = members[start : start + chunk]
                if len(piece) == 1:
                    sets[piece[0]] = {piece[0], members[start - 1]}
                    continue
                for i, v in enumerate(piece):
                    sets[v] = {v, piece[(i + 1) % len(piece)]}
        return AugmentationMap(sets=tuple(sets))
    if kind == "knn":
        k = int(spec.get("k", 2))
        if points is None:
            raise InvalidConfigError("knn augmentation needs point coordinates")
        sets = []
        for x in range(g.size):
            same = np.nonzero(g.labels == g.labels[x])[0]
            order = same[np.argsort(np.linalg.norm(points[same] - points[x], axis=1))]
            sets.append(set(order[: k + 1].tolist()) | {x})
        return make_augmentation(sets, g)
    if kind == "file":
        return load_augmentation(spec["path"], g)
    raise InvalidConfigError(f"unknown augmentation kind {kind!r}")


def build_kernel_fixture(cfg: ExperimentConfig, g: PopulationGraph, points) -> KernelSpec:
    spec = dict(cfg.kernel)
    kind = spec.pop("kind")
    if kind == "graph_revealing":
        return KernelSpec.graph_revealing()
    if kind == "shifted_cosine":
        emb = spectral_teacher_embedding(
            g, dim=int(spec.get("dim", g.num_classes)),
            noise=float(spec.get("noise", 0.0)), seed=int(spec.get("seed", 0)),
        )
        return KernelSpec.shifted_cosine(emb)
    if kind == "rbf":
        from .teacher_kernel import TeacherEmbedding

        if points is None:
            raise InvalidConfigError("rbf kernel needs point coordinates")
        return KernelSpec.rbf(TeacherEmbedding.from_arrays(points), float(spec["bandwidth"]))
    raise InvalidConfigError(f"unknown kernel kind {kind!r}")


def acquire_labels(cfg: ExperimentConfig, g: PopulationGraph, kernel, seed: int) -> LabeledSet:
    spec = dict(cfg.labels)
    strategy = spec.get("strategy", "uniform_per_class")
    if strategy == "uniform_per_class":
        return uniform_per_class_sample(g, int(spec["n_per_class"]), seed)
    if strategy == "iid":
        labeled, _ = iid_sample(g, int(spec["budget"]), seed, require_coverage=bool(spec.get("require_coverage", True)))
        return labeled
    if strategy == "coreset_greedy":
        chosen = stochastic_greedy(kernel, g, int(spec["budget"]), float(spec.get("epsilon", 0.1)), seed)
        return make_labeled(g, chosen, "coreset_greedy", seed)
    if strategy == "cluster_wise":
        f = spectral_clustering_prediction(g, seed)
        return cluster_wise_sample(f, g, float(spec.get("delta", 0.1)), seed)
    raise InvalidConfigError(f"unknown label strategy {strategy!r}")


def spectral_clustering_prediction(g: PopulationGraph, seed: int) -> Prediction:
    """One-hot prediction from k-means on the scaled leading eigenvectors.

    The standard rounding step for spectral embeddings; deterministic per seed.
    """
    from scipy.cluster.vq import kmeans2

    K = g.num_classes
    dec = spectral_decompose(g)
    scale = np.sqrt(np.clip(1.0 - dec.eigenvalues[:K], 0.0, None))
    rows = dec.eigenvectors[:, :K] * scale[None, :] / np.sqrt(g.degrees())[:, None]
    _, assignment = kmeans2(rows, K, seed=seed, minit="++")
    return Prediction(scores=np.eye(K)[assignment].astype(float))


# ---------------------------------------------------------------------------
# the combined objective


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class CombinedLossReport:
    total: float
    cross_entropy: float
    dac: float
    rkd: float
    confident_count: int


def combined_loss(
    model: StudentModel,
    features: np.ndarray | None,
    labeled: LabeledSet,
    weak_strong_pairs,
    rkd_pairs,
    kmat: np.ndarray,
    loss_cfg: dict,
) -> CombinedLossReport:
    """CE + lambda_dac * consistency + lambda_rkd * pairwise relational loss.

    weak_strong_pairs: (x_weak, x_strong) vertex pairs for the unlabeled set.
    Low-confidence weak views (below tau_dac at temperature T) are discarded;
    an empty confident set makes the consistency term 0.
    """
    scores = model.forward(features)
    lam_dac = float(loss_cfg.get("lambda_dac", 1.0))
    lam_rkd = float(loss_cfg.get("lambda_rkd", 0.0))
    tau = float(loss_cfg.get("tau_dac", 0.95))
    temp = float(loss_cfg.get("temperature", 1.0))

    verts = labeled.vertices()
    probs = _softmax(scores[verts])
    ce = float(-np.log(np.maximum(probs[np.arange(len(verts)), labeled.classes()], 1e-300)).mean()) if len(verts) else 0.0

    dac = 0.0
    kept = 0
    if weak_strong_pairs is not None and len(weak_strong_pairs) and lam_dac > 0:
        ws = np.asarray(weak_strong_pairs, dtype=int)
        weak_probs = _softmax(scores[ws[:, 0]] / temp)
        confident = weak_probs.max(axis=1) >= tau
        kept = int(confident.sum())
        if kept:
            pseudo = np.argmax(scores[ws[confident, 0]], axis=1)
            strong_probs = _softmax(scores[ws[confident, 1]])
            dac = float(-np.log(np.maximum(strong_probs[np.arange(kept), pseudo], 1e-300)).mean())

    rkd = 0.0
    if rkd_pairs is not None and len(rkd_pairs) and lam_rkd > 0:
        pr = np.asarray(rkd_pairs, dtype=int)
        inner = np.sum(scores[pr[:, 0]] * scores[pr[:, 1]], axis=1)
        rkd = float(np.mean((inner - kmat[pr[:, 0], pr[:, 1]]) ** 2))

    total = ce + lam_dac * dac + lam_rkd * rkd
    return CombinedLossReport(total=total, cross_entropy=ce, dac=dac, rkd=rkd, confident_count=kept)


def _combined_grad(model, features, labeled, weak_strong, rkd_pairs, kmat, loss_cfg):
    """Analytic gradient of the combined objective in score space, then through
    the model parameters; pseudo-labels are treated as constants."""
    scores = model.forward(features)
    gscores = np.zeros_like(scores)
    lam_dac = float(loss_cfg.get("lambda_dac", 1.0))
    lam_rkd = float(loss_cfg.get("lambda_rkd", 0.0))
    tau = float(loss_cfg.get("tau_dac", 0.95))
    temp = float(loss_cfg.get("temperature", 1.0))

    verts = labeled.vertices()
    if len(verts):
        probs = _softmax(scores[verts])
        onehot = np.eye(scores.shape[1])[labeled.classes()]
        np.add.at(gscores, verts, (probs - onehot) / len(verts))

    if weak_strong is not None and len(weak_strong) and lam_dac > 0:
        ws = np.asarray(weak_strong, dtype=int)
        weak_probs = _softmax(scores[ws[:, 0]] / temp)
        confident = weak_probs.max(axis=1) >= tau
        kept = int(confident.sum())
        if kept:
            pseudo = np.argmax(scores[ws[confident, 0]], axis=1)
            strong = ws[confident, 1]
            sprobs = _softmax(scores[strong])
            sonehot = np.eye(scores.shape[1])[pseudo]
            np.add.at(gscores, strong, lam_dac * (sprobs - sonehot) / kept)

    if rkd_pairs is not None and len(rkd_pairs) and lam_rkd > 0:
        pr = np.asarray(rkd_pairs, dtype=int)
        a, b = pr[:, 0], pr[:, 1]
        inner = np.sum(scores[a] * scores[b], axis=1)
        coef = (2.0 * lam_rkd / len(pr)) * (inner - kmat[a, b])
        np.add.at(gscores, a, coef[:, None] * scores[b])
        np.add.at(gscores, b, coef[:, None] * scores[a])

    if model.architecture == "table":
        return gscores.ravel()
    x = np.asarray(features, dtype=float)
    if model.architecture == "linear":
        return (gscores.T @ x).ravel()
    a1, a2 = model._unpack()
    hidden = np.tanh(x @ a1.T)
    ga2 = gscores.T @ hidden
    gpre = (gscores @ a2) * (1.0 - hidden**2)
    ga1 = gpre.T @ x
    return np.concatenate([ga1.ravel(), ga2.ravel()])


def _strong_views(aug: AugmentationMap, unlabeled: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Weak view = the vertex itself; strong view = a uniformly drawn other member."""
    pairs = np.empty((len(unlabeled), 2), dtype=int)
    for i, x in enumerate(unlabeled):
        others = sorted(aug.sets[int(x)] - {int(x)})
        pairs[i, 0] = x
        pairs[i, 1] = others[rng.integers(len(others))] if others else x
    return pairs


def run_experiment(cfg: ExperimentConfig, seed: int | None = None) -> RunResult:
    """Train on the combined objective, evaluate transductively, audit, persist."""
    t0 = time.perf_counter()
    seed = cfg.seed if seed is None else seed
    g, points = build_graph_fixture(cfg)
    aug = build_augmentation_fixture(cfg, g, points)
    kernel = build_kernel_fixture(cfg, g, points)
    kmat = kernel_matrix(kernel, g)
    labeled = acquire_labels(cfg, g, kernel, seed)

    opt = dict(cfg.optimizer)
    arch = cfg.student.get("arch", "table")
    if arch == "table":
        widths = (g.size, g.num_classes)
        features = None
    elif arch == "linear":
        features = points
        widths = (features.shape[1], g.num_classes)
    else:
        features = points
        widths = (features.shape[1], int(cfg.student.get("hidden", 8)), g.num_classes)
    if arch != "table" and features is None:
        raise InvalidConfigError(f"{arch} student needs point coordinates from the graph fixture")
    model = StudentModel.initialize(arch, widths, seed=seed, scale=float(cfg.student.get("init_scale", 0.1)))

    rng = np.random.default_rng((seed, 1))
    unlabeled = np.setdiff1d(np.arange(g.size), labeled.vertices())
    recycle = bool(opt.get("recycle_labeled", True))
    pool = np.arange(g.size) if recycle else unlabeled
    pool_weights = g.degrees()[pool] / g.degrees()[pool].sum()
    num_pairs = int(opt.get("rkd_pairs", max(2, g.size)))
    step_size = float(opt.get("step_size", 0.5))
    momentum = float(opt.get("momentum", 0.9))
    iterations = int(opt.get("iterations", 500))

    losses = []
    velocity = np.zeros_like(model.parameters)
    for step in range(iterations):
        ws = _strong_views(aug, pool, rng)
        pr = pool[rng.choice(len(pool), size=2 * num_pairs, p=pool_weights)].reshape(num_pairs, 2)
        report = combined_loss(model, features, labeled, ws, pr, kmat, cfg.loss)
        if not math.isfinite(report.total) or report.total > 1e6:
            raise TrainingDivergedError(f"combined loss {report.total!r} at step {step}",
                                        trace=[r["total"] for r in losses])
        losses.append({
            "total": report.total, "cross_entropy": report.cross_entropy,
            "dac": report.dac, "rkd": report.rkd, "confident": report.confident_count,
        })
        grad = _combined_grad(model, features, labeled, ws, pr, kmat, cfg.loss)
        velocity = momentum * velocity - step_size * grad
        model.parameters = model.parameters + velocity

    pred = model.prediction(features)
    correct = pred.hard_labels()[unlabeled] == g.labels[unlabeled]
    accuracy = float(np.mean(correct)) if len(unlabeled) else math.nan

    audits = _audit_bundle(pred, g, aug)
    result = RunResult(
        config_hash=cfg.config_hash(),
        accuracy=accuracy,
        losses=losses,
        audits=audits,
        labeled=labeled,
        model=model,
        wall_clock=time.perf_counter() - t0,
    )
    if cfg.out_dir:
        persist_run(cfg, result, seed)
    return result


def _audit_bundle(pred: Prediction, g: PopulationGraph, aug: AugmentationMap) -> dict:
    """Theorem verdicts (or explicit markers) for the trained snapshot."""
    K = g.num_classes
    thm1 = theorem1_check([pred], g)
    dec = spectral_decompose(g)
    delta = population_rkd_loss(pred, g) - dec.residual_weights(K)
    thm4 = theorem4_check(pred, g, Delta=max(delta, 0.0), K0=K)
    bundle = {
        "thm1": {"verdict": thm1.verdicts["thm1"], "mu": thm1.mu, "bound": thm1.bound_thm1},
        "thm4": {
            "verdict": thm4.verdicts["thm4"], "mu": thm4.mu, "bound": thm4.bound_thm4,
            "delta": float(delta), "lp_primal": thm4.lp_primal, "lp_dual": thm4.lp_dual,
        },
    }
    if g.size <= EXHAUSTIVE_SUBSET_CAP:
        mu5, bound5, verdict5 = theorem5_check([pred], aug, g)
        bundle["thm5"] = {"verdict": verdict5, "mu": mu5, "bound": bound5}
    else:
        bundle["thm5"] = {"verdict": "not-applicable: graph above the exhaustive cap"}
    return bundle


def persist_run(cfg: ExperimentConfig, result: RunResult, seed: int) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jsonio.dump_canonical(result.report_dict(), out / "run_result.json")
    jsonio.dump_canonical(result.audits, out / "audit_report.json")
    jsonio.dump_canonical({"wall_clock_seconds": result.wall_clock}, out / "timing.json")
    cfg.save(out / "config.json")
    save_labeled(result.labeled, out / "labels.csv")
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", "cross_entropy", "dac", "rkd", "confident"])
        for i, row in enumerate(result.losses):
            writer.writerow([
                i, format(row["total"], ".17g"), format(row["cross_entropy"], ".17g"),
                format(row["dac"], ".17g"), format(row["rkd"], ".17g"), row["confident"],
            ])


def run_sweep(cfg: ExperimentConfig, seeds, max_workers: int = 4) -> list:
    """Fan out independent (config, seed) runs; results ordered by seed position."""
    def one(seed):
        sub = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": int(seed), "out_dir": (
            str(Path(cfg.out_dir) / f"seed_{seed}") if cfg.out_dir else None
        )})
        return run_experiment(sub)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, seeds))
