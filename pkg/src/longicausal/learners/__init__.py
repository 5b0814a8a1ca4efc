"""Self-contained regression and classification learners."""

from .base import (
    KINDS,
    PROB_CLAMP,
    FittedLearner,
    LearnerSpec,
    default_candidates,
    fit_learner,
    kkt_check,
    learner_from_dict,
    learner_to_dict,
    predict,
    tune,
)
from ._linear import RIDGE_JITTER, expit, irls_logistic

__all__ = [
    "KINDS",
    "PROB_CLAMP",
    "RIDGE_JITTER",
    "FittedLearner",
    "LearnerSpec",
    "default_candidates",
    "expit",
    "fit_learner",
    "irls_logistic",
    "kkt_check",
    "learner_from_dict",
    "learner_to_dict",
    "predict",
    "tune",
]
