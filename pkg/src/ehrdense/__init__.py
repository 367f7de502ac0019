"""Two-stage dense retrieval training for clinical notes at desk scale."""

__version__ = "0.1.0"
