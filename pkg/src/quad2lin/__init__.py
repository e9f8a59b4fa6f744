"""Quadratic-to-linear distillation of toy decoder-only multimodal models."""

__version__ = "0.1.0"
