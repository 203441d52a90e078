"""Adaptive FAB p-values."""

from .exceptions import (
    ConditioningError,
    DegenerateTargetError,
    FabDomainError,
    FabError,
    FitError,
    RankError,
    SeparationError,
)
from .fabcore import (
    AltRoots,
    GuessParams,
    alt_cdf,
    alt_pdf,
    alt_roots,
    fab_p_normal,
    fab_p_symmetric,
    fab_shift,
    fab_threshold,
    t_cdf,
)
from .glm import GlmFit, fit_logistic
from .indirect import (
    Basis,
    CovModel,
    IndirectMoments,
    conditional_moments,
    delete_column_basis,
    gram_schmidt_nullspace,
)
from .linking import (
    CarPath,
    Exchangeable,
    FittedLinking,
    Regression,
    SpikeSlab,
    fit_fay_herriot,
    fit_marginal_ml,
    fit_spike_slab,
    linking_moments,
    marginal_loglik,
)
from .multiplicity import MultiplicityReport, bh_reject, fdp_tpp, ks_statistic
from .pipelines import (
    FabResult,
    Mode,
    fab_asymptotic,
    fab_coefficients,
    fab_lm,
    fab_lm_partial,
    fab_means_t,
    fab_means_z,
)

__all__ = [
    "AltRoots", "Basis", "CarPath", "ConditioningError", "CovModel", "DegenerateTargetError",
    "Exchangeable", "FabDomainError", "FabError", "FabResult", "FitError", "FittedLinking", "GlmFit",
    "GuessParams", "IndirectMoments", "Mode", "MultiplicityReport", "RankError", "Regression",
    "SeparationError", "SpikeSlab", "alt_cdf", "alt_pdf", "alt_roots", "bh_reject", "conditional_moments",
    "delete_column_basis", "fab_asymptotic", "fab_coefficients", "fab_lm", "fab_lm_partial", "fab_means_t",
    "fab_means_z", "fab_p_normal", "fab_p_symmetric", "fab_shift", "fab_threshold", "fdp_tpp",
    "fit_fay_herriot", "fit_logistic", "fit_marginal_ml", "fit_spike_slab", "gram_schmidt_nullspace",
    "ks_statistic", "linking_moments", "marginal_loglik", "t_cdf",
]
