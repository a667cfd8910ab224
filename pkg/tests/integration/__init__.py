"""Integration tests for stuffnet."""
