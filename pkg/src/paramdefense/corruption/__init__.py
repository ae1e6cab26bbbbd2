from .attacks import (
    CorruptionStep,
    CorruptionTrace,
    CorruptionWarning,
    GradientCorruption,
    eta_samples,
    eta_statistic,
    gradient_corruption,
    multi_step_corrupt,
    sample_gaussian,
    sample_sphere,
    sample_uniform,
)
from .eta import eta_cdf, eta_cdf_array, eta_pdf, hyp2f1_series, pdf_integral
from .indicators import (
    BoundCheck,
    IndicatorEstimate,
    PacBayesTerms,
    error_bound_ratio,
    estimate_delta_ave,
    estimate_delta_max,
    pac_bayes_bound,
    predict_delta_ave,
)

__all__ = [
    "BoundCheck",
    "CorruptionStep",
    "CorruptionTrace",
    "CorruptionWarning",
    "GradientCorruption",
    "IndicatorEstimate",
    "PacBayesTerms",
    "error_bound_ratio",
    "estimate_delta_ave",
    "estimate_delta_max",
    "eta_cdf",
    "eta_cdf_array",
    "eta_pdf",
    "eta_samples",
    "eta_statistic",
    "gradient_corruption",
    "hyp2f1_series",
    "multi_step_corrupt",
    "pac_bayes_bound",
    "pdf_integral",
    "predict_delta_ave",
    "sample_gaussian",
    "sample_sphere",
    "sample_uniform",
]
