"""Unit tests for Acapella."""
