"""HTTP service wrapping the analysis pipeline."""

from .app import create_app

__all__ = ["create_app"]
