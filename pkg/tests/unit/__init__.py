"""Unit tests for stuffnet."""
