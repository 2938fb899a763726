"""Automated binary classification over a main table and its related tables."""

__version__ = "0.1.0"
