"""Decoupled target attention and complementary modality fusion for CTR models."""

__version__ = "0.1.0"
