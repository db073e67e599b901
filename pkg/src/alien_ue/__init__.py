"""alien-ue: post-hoc uncertainty estimation over frozen embeddings.

Train an entropy-producing copy of a classifier head to predict model
errors, compare it against distance- and probe-based baselines, and
evaluate everything with a bootstrap metric suite.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .alien import (
    AlienHead,
    TrainConfig,
    alien_grad,
    alien_loss,
    fit_alien,
    grid_search,
    init_alien,
    score_alien,
)
from .bundle import (
    EmbeddingBundle,
    SynthConfig,
    TokenSequenceBundle,
    generate_synthetic,
    read_bundle,
    write_bundle,
)
from .core import entropy_grad, normalized_entropy, softmax, sr_score
from .ensemble import decompose, correlate_components
from .errors import (
    DegenerateDataError,
    MissingArtifactError,
    UncertaintyToolkitError,
    ValidationError,
)
from .metrics import bootstrap_eval, ece, risk_coverage, roc_auc, spearman

__version__ = "0.1.0"

__all__ = [
    "AlienHead",
    "DegenerateDataError",
    "EmbeddingBundle",
    "KERNEL_BACKEND",
    "MissingArtifactError",
    "SynthConfig",
    "TokenSequenceBundle",
    "TrainConfig",
    "UncertaintyToolkitError",
    "ValidationError",
    "alien_grad",
    "alien_loss",
    "bootstrap_eval",
    "correlate_components",
    "decompose",
    "ece",
    "entropy_grad",
    "fit_alien",
    "generate_synthetic",
    "grid_search",
    "init_alien",
    "normalized_entropy",
    "read_bundle",
    "risk_coverage",
    "roc_auc",
    "score_alien",
    "softmax",
    "spearman",
    "sr_score",
    "write_bundle",
]
