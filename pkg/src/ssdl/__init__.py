"""Structured sparse coding and dictionary learning.

Sparse decomposition of signals under group-structured penalties
(hierarchies, topographic grids, interval patterns), proximal and
splitting solvers for the resulting problems, and batch/online
dictionary learning on top of them.
"""

from .exceptions import (
    ConditioningError,
    DimensionError,
    FormatError,
    NumericError,
    StructureError,
)
from .groups import (
    GroupStructure,
    StructureClass,
    TreeSpec,
    build_grid_groups,
    build_sequence_groups,
    build_tree_groups,
    classify,
    penalty_value,
    singleton_groups,
    tree_order,
    load_structure,
    save_structure,
)
from .prox import (
    project_l1_ball,
    prox_group_l2,
    prox_group_linf,
    prox_l1,
    prox_separable,
    prox_tree,
)
from .solvers import (
    LassoProblem,
    SolveResult,
    SolverCache,
    SolverOptions,
    admm_solve,
    fista_solve,
    grad_f,
    ista_solve,
    lipschitz_estimate,
    objective,
    solve,
)
from .dictlearn import (
    CalibrationResult,
    Dictionary,
    TrainConfig,
    TrainReport,
    calibrate_lambda,
    dict_update_bcd,
    init_dictionary,
    load_checkpoint,
    project_dictionary,
    save_checkpoint,
    sgd_step,
    sparse_code_batch,
    train_alternating,
    train_online,
)
from .data import (
    GrayImage,
    PatchDataset,
    WhiteningTransform,
    apply_whitening,
    center_and_normalize,
    extract_patches,
    fit_whitening,
    load_matrix,
    load_whitening,
    read_pgm,
    render_mosaic,
    save_matrix,
    save_whitening,
    write_pgm,
)

__version__ = "0.1.0"

__all__ = [
    "ConditioningError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "StructureError",
    "GroupStructure",
    "StructureClass",
    "TreeSpec",
    "build_grid_groups",
    "build_sequence_groups",
    "build_tree_groups",
    "classify",
    "penalty_value",
    "singleton_groups",
    "tree_order",
    "load_structure",
    "save_structure",
    "project_l1_ball",
    "prox_group_l2",
    "prox_group_linf",
    "prox_l1",
    "prox_separable",
    "prox_tree",
    "LassoProblem",
    "SolveResult",
    "SolverCache",
    "SolverOptions",
    "admm_solve",
    "fista_solve",
    "grad_f",
    "ista_solve",
    "lipschitz_estimate",
    "objective",
    "solve",
    "CalibrationResult",
    "Dictionary",
    "TrainConfig",
    "TrainReport",
    "calibrate_lambda",
    "dict_update_bcd",
    "init_dictionary",
    "load_checkpoint",
    "project_dictionary",
    "save_checkpoint",
    "sgd_step",
    "sparse_code_batch",
    "train_alternating",
    "train_online",
    "GrayImage",
    "PatchDataset",
    "WhiteningTransform",
    "apply_whitening",
    "center_and_normalize",
    "extract_patches",
    "fit_whitening",
    "load_matrix",
    "load_whitening",
    "read_pgm",
    "render_mosaic",
    "save_matrix",
    "save_whitening",
    "write_pgm",
    "__version__",
]
