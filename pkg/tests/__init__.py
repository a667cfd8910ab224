"""Tests for stuffnet."""
