"""Exporter producing interchange bundles for the adaptation engine."""

from .export import ExportError, ExportJob, export
from .writer import write_bundle_dir

__all__ = ["ExportError", "ExportJob", "export", "write_bundle_dir"]

__version__ = "0.1.0"
