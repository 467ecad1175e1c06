"""Numerical certification of canonical and canonoid transformations on
symplectic, cosymplectic, contact and cocontact phase spaces."""

__version__ = "0.1.0"
