"""Differentially private ERM training lab with per-group excessive-risk accounting."""

from .datasets import (
    BatchPlan,
    ColumnSchema,
    GroupedDataset,
    fixed_batch,
    load_csv,
    poisson_batch,
    resample_ratio,
    standardize,
    synth_two_group,
)
from .models import (
    GradSet,
    Model,
    boundary_score,
    forward,
    hessian_trace,
    hvp,
    load_checkpoint,
    loss_mean,
    per_sample_grad,
    per_sample_hessian_trace,
    save_checkpoint,
)
from .privacy import (
    PrivacySpec,
    RdpAccountant,
    calibrate_sigma,
    classical_gaussian_sigma,
    clip,
    clip_rows,
    gaussian_mechanism_delta,
    output_pert_sensitivity,
    rdp_subsampled_gaussian,
    rdp_to_eps,
)
from .training import (
    DecompositionMode,
    TrainConfig,
    TrainResult,
    TrainTrace,
    dpsgd_step,
    sgd_step,
    train,
    train_output_pert,
)
from .risk import (
    DecompositionRow,
    RiskReport,
    check_clip_dominance,
    correlations,
    decompose_step,
    excess_risk_report,
    excessive_risk_mc,
    predict_noise_order,
    predict_output_pert_gap,
    sample_series,
)
from .mitigation import (
    MitigationConfig,
    mitigated_dpsgd_step,
    penalty_grad,
    penalty_value,
)

__version__ = "0.1.0"
