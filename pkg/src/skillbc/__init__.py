"""Skill-based imitation learning with prior-data retrieval, desk scale."""

__version__ = "0.1.0"
