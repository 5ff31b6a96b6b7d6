"""Morph synthesis over pluggable backends."""

from .backends import Backends, load_manifest, toy_backends
from .pipeline import (
    MorphResult,
    MorphSpec,
    SynthesisConfig,
    TokenSequence,
    asv_embedding,
    build_profile,
    extract_embeddings,
    generate_tokens,
    integrate_flow,
    morph,
    tokenize_text,
    vocode,
)

__all__ = [
    "Backends",
    "MorphResult",
    "MorphSpec",
    "SynthesisConfig",
    "TokenSequence",
    "asv_embedding",
    "build_profile",
    "extract_embeddings",
    "generate_tokens",
    "integrate_flow",
    "load_manifest",
    "morph",
    "tokenize_text",
    "toy_backends",
    "vocode",
]
