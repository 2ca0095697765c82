"""Specialty referral workup recommender.

A numpy library for predicting which diagnostic procedures a specialist will
order at a referral's first visit, from the patient's labs, diagnosis codes,
referring-physician orders, and the specialist's identity. Ships a stacking
ensemble of small dense networks, matrix-factorization and checklist
baselines, a micro-averaged evaluation harness with bootstrap intervals, and
a seeded synthetic cohort generator with a closed-form scoring oracle.
"""

__version__ = "0.1.0"

from .baselines import (
    Checklist,
    FactorModel,
    checklist_predict,
    load_checklist,
    pmf_factorize,
    pmf_fit,
    pmf_predict,
    save_checklist,
    svd_fit,
    svd_predict,
    truncated_svd,
)
from .cohort import (
    Cohort,
    PatientRecord,
    RawLabResult,
    Vocabularies,
    encode_lab,
    encode_lab_panel,
    encode_specialist,
    load_cohort,
    load_vocab,
    save_cohort,
    save_vocab,
    split_cohort,
    vocab_sha256,
)
from .errors import (
    EvaluationError,
    FormatError,
    ShapeError,
    TrainingError,
    UsageError,
)
from .metrics import (
    MetricsReport,
    PolicyRow,
    PredictionSet,
    auroc,
    bootstrap_ci,
    compute_report,
    example_report,
    format_example_report,
    policy_compare,
    precision_recall,
    top_k_mask,
)
from .models import (
    AggregateAnnModel,
    AutoencoderModel,
    DiagnosticModel,
    EnsembleModel,
    ModelBundle,
    load_bundle,
    predict,
    predict_batch,
    save_bundle,
    stacked_inputs,
    train_aggregate,
    train_base_models,
    train_ensemble,
)
from .nn import (
    DenseLayer,
    ForwardCache,
    Gradients,
    Mlp,
    TrainConfig,
    init_mlp,
    load_mlp,
    mse_loss,
    save_mlp,
    train_mlp,
)
from .synth import (
    GeneratorConfig,
    bayes_scores,
    bayes_scores_batch,
    build_tables,
    default_checklist,
    generate,
    order_probabilities,
)
