"""Multitask learning for polyphonic piano transcription at desk scale."""

__version__ = "0.1.0"
