"""Count-level-aware denoising of low-count PET volumes with a gated mixture of denoisers."""

__version__ = "0.1.0"
