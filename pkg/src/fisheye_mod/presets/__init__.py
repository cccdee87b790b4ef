"""Bundled experiment presets (JSON)."""
