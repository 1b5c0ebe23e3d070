"""Tests for Acapella."""
