"""Keyed random-projection templates over image gradients, plus the
sign-constrained programs that recover near-anchor preimages from them.
"""

from .pipeline import (
    MAX_FEATURE,
    MAX_GRADIENT,
    SOBEL_X,
    SOBEL_Y,
    GrayImage,
    PipelineError,
    Template,
    VerifyDecision,
    binarize,
    convolve,
    enroll,
    hamming_distance,
    pad_image,
    project,
    sobel,
    verify,
)
from .prng import (
    SeedError,
    SplitMix64,
    derive_matrix,
    derive_seed,
    fnv1a64,
    gram_schmidt,
    matrix_digest,
)
from .pgm import PgmError, dumps_pgm, load_pgm, loads_pgm, save_pgm
from .problems import (
    AttackProblem,
    CenterResult,
    ProblemError,
    ProblemKind,
    SignConstraintSet,
    build_feature_phase,
    build_image_phase,
    build_merged,
    build_multi_auth,
    build_multi_collision,
    capacity,
    default_margin,
    hamming_center,
    independence_probability,
    problem_from_json,
    problem_to_json,
    sign_violations,
    template_mismatches,
)
from .solver import (
    ImageModel,
    MergedModel,
    SolveReport,
    SolverConfig,
    SolverError,
    SolveStatus,
    certify,
    conv_operators,
    report_to_json,
    solve,
    solve_qcqp,
    solve_qp,
)

__version__ = "0.1.0"

__all__ = [
    "MAX_FEATURE",
    "MAX_GRADIENT",
    "SOBEL_X",
    "SOBEL_Y",
    "GrayImage",
    "PipelineError",
    "Template",
    "VerifyDecision",
    "binarize",
    "convolve",
    "enroll",
    "hamming_distance",
    "pad_image",
    "project",
    "sobel",
    "verify",
    "SeedError",
    "SplitMix64",
    "derive_matrix",
    "derive_seed",
    "fnv1a64",
    "gram_schmidt",
    "matrix_digest",
    "PgmError",
    "dumps_pgm",
    "load_pgm",
    "loads_pgm",
    "save_pgm",
    "AttackProblem",
    "CenterResult",
    "ProblemError",
    "ProblemKind",
    "SignConstraintSet",
    "build_feature_phase",
    "build_image_phase",
    "build_merged",
    "build_multi_auth",
    "build_multi_collision",
    "capacity",
    "default_margin",
    "hamming_center",
    "independence_probability",
    "problem_from_json",
    "problem_to_json",
    "sign_violations",
    "template_mismatches",
    "ImageModel",
    "MergedModel",
    "SolveReport",
    "SolverConfig",
    "SolverError",
    "SolveStatus",
    "certify",
    "conv_operators",
    "report_to_json",
    "solve",
    "solve_qcqp",
    "solve_qp",
    "__version__",
]
