"""Anisotropic viscoelastic-viscoplastic phase-field fracture of short fiber composites."""

__version__ = "0.1.0"
