"""Instruction-guided video editing: connector model, data pipeline, filtering and benchmark."""

__version__ = "0.1.0"
