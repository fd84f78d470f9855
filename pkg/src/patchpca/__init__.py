"""Patch-based PCA neural operator for the 2D Poisson problem.

The package splits into stages that compose into end-to-end pipelines:
random coefficient fields and finite-difference solutions (field_data),
patch geometry and assembly (patching), truncated bases (pca), a small
dense/convolutional network engine (neuralnet), the five pipeline variants
(pipelines), quality metrics (metrics), timing studies (bench), and the
command-line front end (cli).
"""

from .errors import (
    ChecksumError,
    DataFormatError,
    InternalError,
    MagicError,
    NumericError,
    ParameterError,
    PatchPcaError,
    SolverError,
    TrainingError,
    TruncationError,
    VersionError,
)
from .field_data import (
    Dataset,
    GrfParams,
    SolverConfig,
    generate_dataset,
    load_dataset,
    sample_grf,
    save_dataset,
    solve_poisson,
    stencil_residual,
)
from .metrics import (
    MetricsReport,
    energy_spectrum,
    mae,
    mse,
    pdf_estimate,
    report_from_fields,
    seam_discontinuity,
    ssim,
)
from .neuralnet import Network, TrainConfig, make_cnn, make_mlp, train
from .patching import (
    PatchLayout,
    PatchSet,
    assemble_patches,
    extract_patches,
    hanning_window,
    make_layout,
)
from .pca import (
    PatchBasisBank,
    PcaBasis,
    decode_fields,
    encode_fields,
    field_side_matrix,
    fit_patch_bank,
    fit_pca,
    reconstruct_fields,
    reconstruction_mse,
)
from .pipelines import (
    PipelineModel,
    RefinerSpec,
    VariantSpec,
    evaluate,
    fit_pipeline,
    load_model,
    predict,
    predict_fields,
    save_model,
    split_indices,
)

__version__ = "0.1.0"
