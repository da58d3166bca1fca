"""Desk-scale consistency-training laboratory with learned noise couplings."""

__version__ = "0.1.0"
