"""Cue-prompted report generation with prompt dropout on synthetic volumetric phantoms."""

__version__ = "0.1.0"
