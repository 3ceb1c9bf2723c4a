"""Modular featured-FNN image classification with errorless-training support."""
from .features import CATALOG, FeatureSpec, transform_image
from .fnn import FnnArch, FnnParams
from .training import GdtConfig, ProtoModel, SgdConfig, train_proto_model
from .voting import FeaturedModel, classify

__all__ = [
    "CATALOG",
    "FeatureSpec",
    "FnnArch",
    "FnnParams",
    "FeaturedModel",
    "GdtConfig",
    "ProtoModel",
    "SgdConfig",
    "classify",
    "train_proto_model",
    "transform_image",
]
