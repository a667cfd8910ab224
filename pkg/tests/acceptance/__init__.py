"""Opt-in desk-scale acceptance runs."""
