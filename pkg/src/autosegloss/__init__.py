"""Searchable surrogate losses for segmentation metrics, at desk scale."""
from .curves import GCurve, curve_from_params, identity_curve
from .errors import ConfigError, DomainError, NumericError, ParseError
from .metrics import ALL_METRICS, LabelMask, MetricId, MetricName, eval_metric
from .surrogate import LossSpec, identity_spec, spec_from_params, surrogate_loss_and_grad, surrogate_score

__all__ = [
    "GCurve", "curve_from_params", "identity_curve",
    "ConfigError", "DomainError", "NumericError", "ParseError",
    "ALL_METRICS", "LabelMask", "MetricId", "MetricName", "eval_metric",
    "LossSpec", "identity_spec", "spec_from_params", "surrogate_loss_and_grad", "surrogate_score",
]
