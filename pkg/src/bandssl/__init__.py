"""Self-supervised band-classification pretraining for galaxy-cluster richness."""

__version__ = "0.1.0"

from .core_types import (  # noqa: E402
    CANONICAL_BANDS,
    BandImage,
    BandLabel,
    ClusterObservation,
    SplitPlan,
    normalize_pixels,
    validate_observation,
)
from .losses_metrics import loss_eq1, loss_gradient, mae, sigma  # noqa: E402

__all__ = [
    "CANONICAL_BANDS",
    "BandImage",
    "BandLabel",
    "ClusterObservation",
    "SplitPlan",
    "normalize_pixels",
    "validate_observation",
    "loss_eq1",
    "loss_gradient",
    "mae",
    "sigma",
]
