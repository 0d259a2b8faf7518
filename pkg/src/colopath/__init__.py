"""Histology and colonoscopy classification pipeline: ingest, train, calibrate, evaluate, explain."""

__version__ = "0.1.0"
