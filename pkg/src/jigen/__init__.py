"""Jigsaw-puzzle self-supervision for domain generalization, at desk scale."""

__version__ = "0.1.0"
