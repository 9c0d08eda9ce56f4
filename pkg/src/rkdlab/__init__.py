"""Desk-scale workbench: spectral views of relational distillation, clustering
-error audits, augmentation expansion, and cluster-aware label acquisition."""

from .graph_core import (
    PopulationGraph,
    SpectralDecomposition,
    build_from_kernel,
    build_sbm,
    build_two_blobs,
    conductance,
    inter_class_fraction,
    lazy_graph,
    load_graph,
    normalized_adjacency,
    save_graph,
    sparsest_k_partition,
    spectral_decompose,
)
from .spectral_rkd import (
    OptimizerConfig,
    Prediction,
    RkdLossReport,
    StudentModel,
    dnn_rademacher_bound,
    empirical_rkd_loss,
    estimate_rademacher,
    exact_population_minimizer,
    population_rkd_loss,
    theorem2_gap_bound,
    train_student,
)
from .teacher_kernel import KernelSpec, TeacherEmbedding, kernel_matrix, verify_graph_revealing_identity

__all__ = [name for name in dir() if not name.startswith("_")]
