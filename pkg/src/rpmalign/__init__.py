"""rpmalign: rigid point-cloud registration toolkit.

Soft-correspondence registration with learned hybrid features (annealed
Sinkhorn assignment + weighted SVD), classical ICP and soft-assign RPM
baselines, the evaluation metrics, and synthetic perturbation protocols.
"""

from .geom import (
    MetricsReport,
    PointCloud,
    RigidTransform,
    apply_transform,
    anisotropic_errors,
    compose,
    compute_metrics,
    estimate_normals,
    invert,
    isotropic_errors,
    modified_chamfer,
    rotation_angle_deg,
)
from .match import (
    AnnealParams,
    Correspondences,
    MatchMatrix,
    extract_correspondences,
    init_match_feature,
    init_match_spatial,
    procrustes_backward,
    sinkhorn,
    weighted_procrustes,
)
from .features import (
    FeatureConfig,
    ModelConfig,
    NeighborhoodSet,
    ParamNetConfig,
    assemble_inputs,
    extract_hybrid_features,
    init_model_params,
    ppf,
    predict_anneal_params,
    radius_neighbors,
)
from .pipeline import (
    IcpConfig,
    IterationRecord,
    LossReport,
    RegistrationResult,
    RpmSchedule,
    TrainConfig,
    classical_rpm,
    compute_losses,
    icp,
    rpmnet_register,
    train,
    training_loss,
)
from .data import (
    DatasetConfig,
    DatasetManifest,
    PairConfig,
    RegistrationPair,
    crop_halfspace,
    gen_primitive,
    generate_dataset,
    jitter,
    load_cloud,
    load_dataset,
    load_manifest,
    load_pair,
    make_pair,
    sample_transform,
    save_cloud,
    save_manifest,
    save_pair,
)

__version__ = "0.1.0"
