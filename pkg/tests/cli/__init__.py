"""CLI tests for Acapella."""
