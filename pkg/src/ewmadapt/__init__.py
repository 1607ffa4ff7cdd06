"""Desk-scale unsupervised domain adaptation for a toy window detector."""

__version__ = "0.1.0"
