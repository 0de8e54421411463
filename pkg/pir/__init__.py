"""Photometric inverse rendering toolkit."""
