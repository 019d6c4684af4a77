"""Persona-conditioned synthetic population generation."""

__version__ = "0.1.0"
