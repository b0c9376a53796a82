"""Retrieval-grounded orthopedic CT report generation."""

__version__ = "0.1.0"
CONFIG_SCHEMA_VERSION = 1
