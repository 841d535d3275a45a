from .extract import (
    GROUP_EXTRACTORS, FeatureVector, content_hash, extract_directory_features,
    extract_dos_header_features, extract_features, extract_file_header_features,
    extract_function_length_features, extract_import_features,
    extract_optional_header_features, extract_string_statistics,
)
from .pe import PeArtifact, ascii_strings, parse_pe, read_function_sidecar
from .schema import GROUPS, N_FEATURES, FeatureSchema, default_schema, load_schema

__all__ = [
    "GROUPS", "GROUP_EXTRACTORS", "N_FEATURES", "FeatureSchema", "FeatureVector",
    "PeArtifact", "ascii_strings", "content_hash", "default_schema",
    "extract_directory_features", "extract_dos_header_features", "extract_features",
    "extract_file_header_features", "extract_function_length_features",
    "extract_import_features", "extract_optional_header_features",
    "extract_string_statistics", "load_schema", "parse_pe", "read_function_sidecar",
]
