"""Retrieval-driven cartesian impedance selection and desk-scale simulation."""

__version__ = "0.1.0"
