"""Two-level contrastive video-language embedding training at desk scale."""

__version__ = "0.1.0"
