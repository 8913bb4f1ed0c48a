"""Attribute-consistent domain adaptation for fine-grained recognition, on a
numpy reverse-mode autodiff core and a synthetic source/target generator."""

__version__ = "0.1.0"
