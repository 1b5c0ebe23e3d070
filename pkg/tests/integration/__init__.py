"""Integration tests for Acapella."""
