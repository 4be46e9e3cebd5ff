"""HTTP service exposing the pipeline commands."""

from .app import create_app

__all__ = ["create_app"]
