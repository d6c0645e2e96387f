"""Kernelized local-patch descriptors with explicit spatial encoding."""

__version__ = "0.1.0"

from .aggregation import (
    Descriptor,
    DescriptorHead,
    FcHead,
    count_parameters,
    describe_batch,
    describe_cat,
    describe_fc,
    describe_fc_split,
    describe_spatial_efficient,
    describe_spatial_naive,
    describe_sum,
    match_kernel_similarity,
    memory_reduction_factor,
    similarity_heatmap,
)
from .estimator import SpatialDescriptor, VonMisesFeatureMap
from .featuremap import AngleMapping, FeatureMapSpec, build_feature_map_spec, embed, kernel_value, to_angle
from .position_encoding import build_position_table, center_weight, encode_position, grid_geometry

__all__ = [
    "AngleMapping",
    "Descriptor",
    "DescriptorHead",
    "FcHead",
    "FeatureMapSpec",
    "SpatialDescriptor",
    "VonMisesFeatureMap",
    "build_feature_map_spec",
    "build_position_table",
    "center_weight",
    "count_parameters",
    "describe_batch",
    "describe_cat",
    "describe_fc",
    "describe_fc_split",
    "describe_spatial_efficient",
    "describe_spatial_naive",
    "describe_sum",
    "embed",
    "encode_position",
    "grid_geometry",
    "kernel_value",
    "match_kernel_similarity",
    "memory_reduction_factor",
    "similarity_heatmap",
    "to_angle",
]
