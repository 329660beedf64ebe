"""Survival prediction from bags of patch features.

Patches are gated by a learned importance filter, refined by self-attention
inside clusters of similar and nearby patches, pooled by gated attention and
mapped to a Gaussian mixture over a softplus-warped time axis.
"""

from .bag_data import (
    CohortRecord, PatchBag, SyntheticConfig, generate_synthetic_cohort, load_bag, load_cohort,
    load_manifest, write_bag, write_cohort, write_manifest,
)
from .errors import (
    ConfigError, DimensionError, DomainError, FormatError, NonFiniteError, OptimizerStateError,
    SCMILError, UndefinedMetricError, ValidationError,
)
from .metrics import EvalResult, brier, evaluate, ibs, kaplan_meier, tdc
from .pipeline import (
    SCMIL, RunConfig, compare_variants, cross_validate, load_model, make_folds, predict_curve,
    save_model, sweep_w1, train_fold,
)
from .register_mdn import RegisterMDN, SurvivalDistribution
from .scsa import GatedAttentionPool, MultiHeadSelfAttention, SparseContextAttention, cluster, kmeans
from .soft_filter import SoftFilter, apply_and_split

__version__ = "0.1.0"
