"""Covariance-descriptor image classification on the SPD manifold.

The pipeline: per-pixel feature maps (handcrafted or encoder exports) ->
regularized covariance descriptors -> classifiers that respect the
log-Euclidean geometry of SPD matrices (nearest Riemannian mean,
tangent-space LDA, and an SPD network trained with a Stiefel-manifold
Adam).
"""

from .classifiers import (
    MdrmModel,
    TsldaModel,
    load_classic_checkpoint,
    mdrm_fit,
    mdrm_predict,
    save_classic_checkpoint,
    tslda_fit,
    tslda_predict,
)
from .descriptors import CovarianceDescriptor, batch_descriptors, covariance_descriptor
from .errors import (
    BatchError,
    DataError,
    NotSpdError,
    NumericalError,
    SpdClassError,
    UsageError,
)
from .features import (
    FeatureMap,
    GrayImage,
    PcaModel,
    WindowSpec,
    extract_windows,
    hc_feature_map,
    pca_fit,
    pca_transform,
    to_gray,
)
from .geometry import (
    SymEigen,
    as_spd,
    exp_map,
    karcher_mean_lem,
    lem_distance,
    log_map,
    mat_exp,
    mat_log,
    sym_eig,
    tangent_vectorize,
)
from .metrics import EvalReport, auc, balanced_accuracy, evaluate

__version__ = "0.1.0"
