"""Affordance-grounded visuomotor control at desk scale."""

__version__ = "0.1.0"
