"""Test package for PIPQ."""
