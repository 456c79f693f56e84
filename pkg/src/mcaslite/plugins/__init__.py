"""Bundled ADO plugins."""
