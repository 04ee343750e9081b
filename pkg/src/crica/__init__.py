"""Cross-image correlation-aware place recognition, built on a minimal
reverse-mode autodiff engine."""

__version__ = "0.1.0"
