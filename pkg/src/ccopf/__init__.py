"""Chance-constrained DC optimal power flow with exact affine expansions."""

__version__ = "0.1.0"
